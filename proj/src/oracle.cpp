#include "prodding/oracle.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "checkpoint_io.hpp"
#include "prodding/source_model.hpp"

namespace prodding {

std::string QueryMode::to_string() const {
  return kind == Kind::Hard ? "hard" : "soft:" + std::to_string(r);
}

QueryMode QueryMode::parse(std::string_view text) {
  if (text == "hard") return hard();
  if (text == "soft") return soft(1);
  if (text.starts_with("soft:")) {
    const std::string digits(text.substr(5));
    std::size_t used = 0;
    int r = 0;
    try {
      r = std::stoi(digits, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == digits.size() && used > 0 && r >= 1) return soft(r);
  }
  throw ConfigError("unknown query mode '" + std::string(text) + "' (expected hard, soft or soft:<r>)");
}

void QueryMode::validate(int num_classes) const {
  if (kind == Kind::SoftTopR && (r < 1 || r > num_classes - 1)) {
    throw ConfigError("soft query needs 1 <= r <= K - 1 (r = " + std::to_string(r) + ", K = " +
                      std::to_string(num_classes) + ")");
  }
}

nlohmann::json QueryResult::to_json() const {
  nlohmann::json j{{"mode", mode.to_string()}, {"labels", labels}};
  if (mode.kind == QueryMode::Kind::SoftTopR) j["confidences"] = confidences;
  return j;
}

QueryResult QueryResult::from_json(const nlohmann::json& j) {
  QueryResult out;
  out.mode = QueryMode::parse(j.at("mode").get<std::string>());
  out.labels = j.at("labels").get<std::vector<int>>();
  if (j.contains("confidences")) out.confidences = j.at("confidences").get<std::vector<double>>();
  const std::size_t expected = out.mode.kind == QueryMode::Kind::Hard ? 1 : static_cast<std::size_t>(out.mode.r);
  if (out.labels.size() != expected) throw ConfigError("query result has the wrong number of labels");
  if (out.mode.kind == QueryMode::Kind::SoftTopR && out.confidences.size() != expected) {
    throw ConfigError("query result has the wrong number of confidences");
  }
  return out;
}

void QueryLog::record(std::string_view id, const QueryMode& mode) {
  std::lock_guard lock(mutex_);
  ++count_;
  auto [it, inserted] = per_id_.try_emplace(std::string(id), mode, 0);
  it->second.first = mode;
  ++it->second.second;
}

std::size_t QueryLog::count() const {
  std::lock_guard lock(mutex_);
  return count_;
}

std::size_t QueryLog::max_per_id() const {
  std::lock_guard lock(mutex_);
  std::size_t most = 0;
  for (const auto& [id, entry] : per_id_) most = std::max(most, entry.second);
  return most;
}

std::optional<QueryMode> QueryLog::mode_of(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = per_id_.find(id);
  if (it == per_id_.end()) return std::nullopt;
  return it->second.first;
}

struct Oracle::Impl {
  explicit Impl(SourceModel m) : model(std::move(m)) {
    fingerprint = Fingerprint()
                      .add(model.architecture().dump())
                      .add(static_cast<std::int64_t>(model_checksum(model)))
                      .hex();
  }

  ProbMatrix probabilities(const Vector& input) const {
    if (input.size() != model.input_dim() || !input.allFinite()) {
      throw ConfigError("malformed query input (expected " + std::to_string(model.input_dim()) +
                        " finite values)");
    }
    return softmax_rows(model.forward(input.transpose()));
  }

  SourceModel model;
  std::string fingerprint;
  QueryLog log;
};

Oracle::Oracle(SourceModel model) : impl_(std::make_unique<Impl>(std::move(model))) {}
Oracle::Oracle(Oracle&&) noexcept = default;
Oracle& Oracle::operator=(Oracle&&) noexcept = default;
Oracle::~Oracle() = default;

Oracle Oracle::load(const std::filesystem::path& checkpoint) { return Oracle(load_source_checkpoint(checkpoint)); }

Oracle Oracle::provision(const Dataset& source, const ProvisionOptions& options,
                         const std::optional<std::filesystem::path>& checkpoint, const Dataset* holdout,
                         ProvisionReport* report) {
  const std::string settings = Fingerprint()
                                   .add(source.fingerprint())
                                   .add(options.epsilon)
                                   .add(static_cast<std::int64_t>(options.epochs))
                                   .add(static_cast<std::int64_t>(options.seed))
                                   .add(options.encoder.dump())
                                   .add(options.optim.lr_backbone)
                                   .add(options.optim.lr_new_layers)
                                   .add(options.optim.momentum)
                                   .add(options.optim.weight_decay)
                                   .add(static_cast<std::int64_t>(options.optim.batch_size))
                                   .hex();
  if (checkpoint && std::filesystem::exists(*checkpoint)) {
    const auto doc = detail::read_json_file(*checkpoint);
    if (doc.value("provenance", "") == settings) {
      if (report) *report = {doc.value("best_epoch", 0), doc.value("best_accuracy", 0.0), true};
      return load(*checkpoint);
    }
  }

  SourceTrainingOptions train{options.epsilon, options.epochs, options.seed, options.encoder};
  auto result = train_source(source, options.optim, train, holdout);
  if (report) *report = {result.best_epoch, result.best_accuracy, false};
  if (checkpoint) {
    save_checkpoint(result.model, {options.seed, result.best_epoch}, *checkpoint);
    auto doc = detail::read_json_file(*checkpoint);
    doc["provenance"] = settings;
    doc["best_epoch"] = result.best_epoch;
    doc["best_accuracy"] = result.best_accuracy;
    detail::write_json_file(doc, *checkpoint);
  }
  return Oracle(std::move(result.model));
}

void Oracle::save(const std::filesystem::path& checkpoint) const {
  SourceModel copy = impl_->model;
  save_checkpoint(copy, {0, 0}, checkpoint);
}

QueryResult Oracle::query(const Vector& input, const QueryMode& mode, std::string_view id) const {
  const int K = impl_->model.num_classes();
  mode.validate(K);
  const ProbMatrix p = impl_->probabilities(input);

  QueryResult out;
  out.mode = mode;
  if (mode.kind == QueryMode::Kind::Hard) {
    out.labels = {argmax(RowVector(p.row(0)))};
  } else {
    std::vector<int> order(static_cast<std::size_t>(K));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p(0, a) > p(0, b); });
    for (int j = 0; j < mode.r; ++j) {
      out.labels.push_back(order[static_cast<std::size_t>(j)]);
      out.confidences.push_back(p(0, order[static_cast<std::size_t>(j)]));
    }
  }
  impl_->log.record(id, mode);
  return out;
}

int Oracle::num_classes() const { return impl_->model.num_classes(); }
int Oracle::input_dim() const { return impl_->model.input_dim(); }
std::string Oracle::fingerprint() const { return impl_->fingerprint; }
const QueryLog& Oracle::log() const { return impl_->log; }

std::filesystem::path query_cache_path(const std::filesystem::path& cache_dir, const Dataset& dataset,
                                       const BlackBox& oracle) {
  return cache_dir / ("queries-" + dataset.fingerprint() + "-" + oracle.fingerprint() + ".jsonl");
}

void invalidate_query_cache(const std::filesystem::path& cache_dir, const Dataset& dataset, const BlackBox& oracle) {
  std::filesystem::remove(query_cache_path(cache_dir, dataset, oracle));
}

QueryTable query_dataset(const BlackBox& oracle, const Dataset& dataset, const QueryMode& mode,
                         const std::optional<std::filesystem::path>& cache_dir) {
  mode.validate(oracle.num_classes());
  if (dataset.num_classes() != oracle.num_classes()) throw ConfigError("dataset and oracle disagree on K");

  QueryTable table;
  std::filesystem::path cache_file;
  if (cache_dir) {
    cache_file = query_cache_path(*cache_dir, dataset, oracle);
    std::ifstream in(cache_file);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json record;
      try {
        record = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        throw ConfigError("corrupt query cache '" + cache_file.string() + "' at line " + std::to_string(line_no));
      }
      auto result = QueryResult::from_json(record);
      if (!(result.mode == mode)) {
        throw ConfigError("query cache '" + cache_file.string() + "' was recorded in mode " +
                          result.mode.to_string() + ", requested " + mode.to_string() +
                          "; invalidate the cache explicitly to re-query");
      }
      table.emplace(record.at("id").get<std::string>(), std::move(result));
    }
  }

  std::ofstream append;
  if (cache_dir) {
    std::filesystem::create_directories(*cache_dir);
    append.open(cache_file, std::ios::app);
    if (!append) throw RuntimeFailure("cannot write query cache '" + cache_file.string() + "'");
  }
  for (const auto& ex : dataset.examples()) {
    if (table.contains(ex.id)) continue;
    auto result = oracle.query(ex.input, mode, ex.id);
    if (cache_dir) {
      auto record = result.to_json();
      record["id"] = ex.id;
      append << record.dump() << '\n';
    }
    table.emplace(ex.id, std::move(result));
  }

  return table;
}

}  // namespace prodding
