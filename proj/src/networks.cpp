#include "prodding/networks.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "checkpoint_io.hpp"

namespace prodding {

void OptimConfig::validate() const {
  if (!(lr_backbone > 0.0) || !(lr_new_layers > 0.0) || !(momentum > 0.0) || !(weight_decay > 0.0) ||
      batch_size <= 0) {
    throw ConfigError("optimizer settings must all be positive");
  }
  if (lr_new_layers < lr_backbone) throw ConfigError("lr_new_layers must be >= lr_backbone");
}

LearningRates lr_at(const OptimConfig& optim, double progress) {
  if (!(progress >= 0.0 && progress <= 1.0)) throw ConfigError("training progress must lie in [0, 1]");
  const double decay = std::pow(1.0 + 10.0 * progress, -0.75);
  return {optim.lr_backbone * decay, optim.lr_new_layers * decay};
}

void Sgd::step(const std::vector<Parameter*>& params, const LearningRates& lr) {
  for (Parameter* p : params) {
    const double rate = lr.for_group(p->group);
    Matrix update = p->grad + config_.weight_decay * p->value;
    auto [it, inserted] = velocity_.try_emplace(p, update);
    if (!inserted) it->second = config_.momentum * it->second + update;
    p->value -= rate * it->second;
    applied_[p] = rate;
  }
}

double Sgd::applied_lr(const Parameter* param) const {
  auto it = applied_.find(param);
  if (it == applied_.end()) throw ConfigError("parameter was never stepped");
  return it->second;
}

void zero_grad(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

TargetModel::TargetModel(std::unique_ptr<Encoder> encoder, int bottleneck_dim, int num_classes, Rng& rng)
    : encoder_(std::move(encoder)), bottleneck_dim_(bottleneck_dim), num_classes_(num_classes) {
  if (bottleneck_dim < 1 || num_classes < 2) throw ConfigError("target model needs bottleneck >= 1 and K >= 2");
  norm_ = BatchNorm1d("bottleneck.norm", encoder_->output_dim(), ParamGroup::NewLayers);
  bottleneck_ = Linear("bottleneck.fc", encoder_->output_dim(), bottleneck_dim, ParamGroup::NewLayers, rng);
  classifier_ = WeightNormLinear("classifier", bottleneck_dim, num_classes, ParamGroup::NewLayers, rng);
}

TargetModel::TargetModel(const TargetModel& other)
    : encoder_(other.encoder_->clone()),
      norm_(other.norm_),
      bottleneck_(other.bottleneck_),
      classifier_(other.classifier_),
      bottleneck_dim_(other.bottleneck_dim_),
      num_classes_(other.num_classes_) {}

TargetModel& TargetModel::operator=(const TargetModel& other) {
  if (this != &other) *this = TargetModel(other);
  return *this;
}

LogitMatrix TargetModel::forward_train(const Matrix& x, TargetTrace* trace, bool update_running) {
  if (!trace) {
    Matrix f = encoder_->forward(x, nullptr);
    return classifier_.forward(bottleneck_.forward(norm_.forward(f, true, nullptr, update_running)));
  }
  trace->features = encoder_->forward(x, &trace->encoder);
  trace->normalized = norm_.forward(trace->features, true, &trace->norm, update_running);
  trace->bottleneck = bottleneck_.forward(trace->normalized);
  trace->logits = classifier_.forward(trace->bottleneck);
  return trace->logits;
}

LogitMatrix TargetModel::forward_eval(const Matrix& x) const {
  if (x.rows() == 0) return LogitMatrix(0, num_classes_);
  return classifier_.forward(bottleneck_.forward(norm_.forward_eval(encoder_->forward(x, nullptr))));
}

Matrix TargetModel::features(const Matrix& x) const { return encoder_->forward(x, nullptr); }

void TargetModel::backward(const TargetTrace& trace, const Matrix& dlogits) {
  const Matrix dbottleneck = classifier_.backward(trace.bottleneck, dlogits);
  const Matrix dnormalized = bottleneck_.backward(trace.normalized, dbottleneck);
  const Matrix dfeatures = norm_.backward(trace.norm, dnormalized);
  encoder_->backward(trace.encoder, dfeatures);
}

std::vector<Parameter*> TargetModel::parameters() {
  std::vector<Parameter*> out;
  encoder_->collect(out);
  norm_.collect(out);
  bottleneck_.collect(out);
  classifier_.collect(out);
  return out;
}

std::vector<NamedTensor> TargetModel::tensors() {
  std::vector<NamedTensor> out;
  for (Parameter* p : parameters()) out.push_back({p->name, &p->value});
  out.push_back({"bottleneck.norm.running_mean", &norm_.running_mean});
  out.push_back({"bottleneck.norm.running_var", &norm_.running_var});
  return out;
}

nlohmann::json TargetModel::architecture() const {
  return {{"encoder", encoder_->spec()}, {"bottleneck", bottleneck_dim_}, {"num_classes", num_classes_}};
}

LogitMatrix forward(const TargetModel& model, const Matrix& batch) { return model.forward_eval(batch); }

TargetModel make_target_model(const nlohmann::json& encoder_spec, int bottleneck_dim, int num_classes,
                              std::uint64_t seed) {
  Rng rng(derive_seed(seed, "target/init"));
  auto encoder = make_encoder(encoder_spec, rng);
  return TargetModel(std::move(encoder), bottleneck_dim, num_classes, rng);
}

LossGrad label_smoothing_loss(const LogitMatrix& logits, std::span<const int> labels, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw ConfigError("logits/labels size mismatch");
  const auto n = logits.rows();
  const auto K = logits.cols();
  LossGrad out;
  out.dlogits = softmax_rows(logits);
  if (n == 0) return out;
  const Matrix logp = log_softmax_rows(logits);
  for (Eigen::Index i = 0; i < n; ++i) {
    RowVector q = RowVector::Constant(K, epsilon / static_cast<double>(K));
    q[labels[static_cast<std::size_t>(i)]] += 1.0 - epsilon;
    out.value -= q.dot(logp.row(i));
    out.dlogits.row(i) -= q;
  }
  out.value /= static_cast<double>(n);
  out.dlogits /= static_cast<double>(n);
  return out;
}

void save_checkpoint(TargetModel& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  detail::write_checkpoint("target", model.architecture(), model.num_classes(), model.tensors(), meta, path);
}

TargetModel load_target_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  const auto doc = detail::read_checkpoint(path, "target");
  const auto& arch = doc.at("architecture");
  Rng rng(0);
  TargetModel model(make_encoder(arch.at("encoder"), rng), arch.at("bottleneck").get<int>(),
                    arch.at("num_classes").get<int>(), rng);
  detail::restore_tensors(doc, model.tensors());
  if (meta) *meta = detail::read_meta(doc);
  return model;
}

std::uint64_t model_checksum(TargetModel& model) { return checksum(model.tensors()); }

namespace detail {

void write_json_file(const nlohmann::json& doc, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
    out << doc.dump() << '\n';
    if (!out) throw RuntimeFailure("write failed for '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

void write_checkpoint(const std::string& kind, const nlohmann::json& architecture, int num_classes,
                      const std::vector<NamedTensor>& tensors, const CheckpointMeta& meta,
                      const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["format"] = kCheckpointFormat;
  doc["version"] = kCheckpointVersion;
  doc["kind"] = kind;
  doc["architecture"] = architecture;
  doc["num_classes"] = num_classes;
  doc["seed"] = meta.seed;
  doc["epoch"] = meta.epoch;
  auto& list = doc["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    list.push_back({{"name", t.name},
                    {"shape", {t.tensor->rows(), t.tensor->cols()}},
                    {"data", std::vector<double>(t.tensor->data(), t.tensor->data() + t.tensor->size())}});
  }
  doc["checksum"] = Fingerprint().add(static_cast<std::int64_t>(checksum(tensors))).hex();
  write_json_file(doc, path);
}

nlohmann::json read_checkpoint(const std::filesystem::path& path, const std::string& expected_kind) {
  auto doc = read_json_file(path);
  if (doc.value("format", "") != kCheckpointFormat) throw ConfigError("'" + path.string() + "' is not a checkpoint");
  if (doc.value("version", 0) != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
  if (doc.value("kind", "") != expected_kind) {
    throw ConfigError("checkpoint holds a " + doc.value("kind", std::string("?")) + " model, expected " +
                      expected_kind);
  }
  return doc;
}

void restore_tensors(const nlohmann::json& doc, const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& t : doc.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
  for (const auto& t : tensors) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw ConfigError("checkpoint is missing tensor '" + t.name + "'");
    const auto& entry = *it->second;
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    if (rows != t.tensor->rows() || cols != t.tensor->cols()) {
      throw ConfigError("tensor '" + t.name + "' has the wrong shape");
    }
    const auto data = entry.at("data").get<std::vector<double>>();
    if (data.size() != static_cast<std::size_t>(rows * cols)) throw ConfigError("tensor '" + t.name + "' is truncated");
    std::copy(data.begin(), data.end(), t.tensor->data());
  }
}

CheckpointMeta read_meta(const nlohmann::json& doc) {
  return {doc.at("seed").get<std::uint64_t>(), doc.at("epoch").get<int>()};
}

}  // namespace detail

}  // namespace prodding
