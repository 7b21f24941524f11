#include "prodding/harness.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace prodding {

Metrics Evaluator::evaluate_predictions(std::span<const int> predictions, const Dataset& dataset) {
  const EvaluationToken token;
  if (!dataset.labeled() || (dataset.size() > 0 && dataset.evaluation_labels(token).empty())) {
    throw ConfigError("evaluation needs a labeled dataset");
  }
  if (predictions.size() != dataset.size()) throw ConfigError("one prediction per example is required");
  const auto& labels = dataset.evaluation_labels(token);
  const int K = dataset.num_classes();
  Metrics m;
  m.n = dataset.size();
  m.class_counts.assign(static_cast<std::size_t>(K), 0);
  std::vector<std::size_t> hits(static_cast<std::size_t>(K), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    ++m.class_counts[y];
    if (predictions[i] == labels[i]) {
      ++hits[y];
      ++correct;
    }
  }
  m.accuracy = m.n ? static_cast<double>(correct) / static_cast<double>(m.n) : 0.0;
  m.class_recall.assign(static_cast<std::size_t>(K), 0.0);
  double sum = 0.0;
  int present = 0;
  for (std::size_t k = 0; k < m.class_counts.size(); ++k) {
    if (m.class_counts[k] == 0) continue;
    m.class_recall[k] = static_cast<double>(hits[k]) / static_cast<double>(m.class_counts[k]);
    sum += m.class_recall[k];
    ++present;
  }
  m.per_class_accuracy = present ? sum / present : 0.0;
  return m;
}

std::vector<int> predict(const TargetModel& model, const Dataset& dataset) {
  const LogitMatrix logits = model.forward_eval(dataset.inputs());
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax(RowVector(logits.row(i)));
  return out;
}

Metrics Evaluator::evaluate(const TargetModel& model, const Dataset& dataset) {
  return evaluate_predictions(predict(model, dataset), dataset);
}

Metrics evaluate(const TargetModel& model, const Dataset& dataset) { return Evaluator::evaluate(model, dataset); }

Vector load_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open feature file '" + path.string() + "'");
  std::vector<double> values;
  std::string token;
  while (in >> token) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != token.size()) throw ConfigError("non-numeric value '" + token + "' in '" + path.string() + "'");
    values.push_back(v);
  }
  if (values.empty()) throw ConfigError("empty feature file '" + path.string() + "'");
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

LoadedData load_data(const ExperimentConfig& config) {
  LoadedData data;
  if (config.dataset.kind == "synthetic") {
    auto pair = make_synthetic_shift(config.dataset.synthetic);
    data.source = std::move(pair.source);
    data.target = std::move(pair.target);
  } else {
    const std::filesystem::path root(config.dataset.root);
    const int K = config.dataset.num_classes;
    data.source = load_image_list(config.dataset.source_list, root, K, DomainRole::Source, load_feature_file);
    data.target = load_image_list(config.dataset.target_list, root, K, DomainRole::Target, load_feature_file);
  }
  if (config.dataset.label_shift != "none") {
    LabelShift shift;
    shift.mode = config.dataset.label_shift == "rsut" ? LabelShiftMode::Rsut : LabelShiftMode::Partial;
    shift.decay = config.dataset.shift_decay;
    shift.fraction = config.dataset.partial_fraction;
    shift.seed = derive_seed(config.dataset.synthetic.seed, "label-shift");
    // Partial-set keeps the full source label space.
    if (shift.mode == LabelShiftMode::Rsut) data.source = apply_label_shift(data.source, shift);
    data.target = apply_label_shift(data.target, shift);
  }
  return data;
}

namespace {

std::string flag_key(const DistillFlags& f) {
  return std::string(f.skd ? "1" : "0") + (f.mix ? "1" : "0") + (f.mi ? "1" : "0") + (f.proto ? "1" : "0");
}

struct DistillCache {
  TargetModel model;
  std::vector<double> curve;
  std::vector<double> loss;
  double accuracy;
};

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

}  // namespace

Report run_experiment(const ExperimentConfig& config) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const auto out = config.output_path();
  std::filesystem::create_directories(out);
  {
    std::ofstream snapshot(out / "config.txt");
    snapshot << config.to_text();
  }

  const LoadedData data = load_data(config);
  const Dataset target_unlabeled = data.target.without_labels();

  ProvisionOptions provision;
  provision.epsilon = config.source_epsilon;
  provision.epochs = config.source_epochs;
  provision.seed = config.source_seed;
  provision.encoder = config.encoder_spec();
  provision.optim = config.optim;
  ProvisionReport provisioned;
  const Oracle oracle = Oracle::provision(data.source, provision, out / "source.ckpt.json", nullptr, &provisioned);
  const QueryTable answers = query_dataset(oracle, target_unlabeled, config.oracle_mode, out / "cache");

  Report report;
  report.name = config.name;
  report.config_fingerprint = config.fingerprint();
  report.seeds = config.seeds;
  report.source_accuracy = provisioned.best_accuracy;
  report.source_from_checkpoint = provisioned.loaded_from_checkpoint;
  report.queries_issued = oracle.log().count();
  report.target_size = data.target.size();

  const int K = data.target.num_classes();
  const auto weak = config.weak_policy();
  const auto strong = config.strong_policy();
  std::map<std::string, DistillCache> distilled;

  for (const auto& row : config.rows()) {
    ReportRow rr;
    rr.name = row.name;
    for (const auto seed : config.seeds) {
      SeedRun run;
      run.seed = seed;
      const auto run_dir = out / row.name / ("seed-" + std::to_string(seed));
      try {
        std::filesystem::create_directories(run_dir);
        if (row.is_no_adapt()) {
          std::vector<int> preds;
          preds.reserve(data.target.size());
          for (const auto& ex : data.target.examples()) preds.push_back(answers.at(ex.id).labels.at(0));
          run.metrics = Evaluator::evaluate_predictions(preds, data.target);
          Fingerprint fp;
          for (const int p : preds) fp.add(static_cast<std::int64_t>(p));
          run.model_checksum = fp.hex();
        } else {
          TargetModel model = make_target_model(config.encoder_spec(static_cast<int>(data.target.input_dim())), config.bottleneck_dim, K,
                                                derive_seed(seed, "target/init"));
          if (row.runs_distill()) {
            const auto key = flag_key(row.distill) + "/" + std::to_string(seed);
            auto it = distilled.find(key);
            if (it == distilled.end()) {
              DistillCache cache{model, {}, {}, 0.0};
              DistillOptions opts;
              opts.flags = row.distill;
              opts.seed = derive_seed(seed, "distill");
              std::ofstream log(run_dir / "distill-metrics.jsonl");
              opts.metrics_log = &log;
              if (config.write_banks) opts.bank_dir = run_dir / "banks";
              opts.on_epoch_end = [&](int, const TargetModel& m) {
                cache.curve.push_back(Evaluator::evaluate(m, data.target).accuracy);
              };
              auto result = run_distillation(std::move(model), target_unlabeled, answers, config.hp, config.optim, opts);
              for (const auto& e : result.history.epochs) cache.loss.push_back(e.total);
              cache.model = std::move(result.model);
              cache.accuracy = Evaluator::evaluate(cache.model, data.target).accuracy;
              save_checkpoint(cache.model, {seed, config.hp.epochs}, run_dir / "distilled.ckpt.json");
              it = distilled.emplace(key, std::move(cache)).first;
            }
            model = it->second.model;
            run.distill_curve = it->second.curve;
            run.distill_loss = it->second.loss;
            run.distill_accuracy = it->second.accuracy;
          }
          if (row.runs_finetune()) {
            FinetuneOptions opts;
            opts.flags = row.finetune;
            opts.weak = weak;
            opts.strong = strong;
            opts.seed = derive_seed(seed, "finetune");
            std::ofstream log(run_dir / "finetune-metrics.jsonl");
            opts.metrics_log = &log;
            opts.on_epoch_end = [&](int, const TargetModel& m) {
              run.finetune_curve.push_back(Evaluator::evaluate(m, data.target).accuracy);
            };
            auto result = run_finetune(std::move(model), target_unlabeled, config.hp, config.optim, opts);
            for (const auto& e : result.epochs) {
              run.finetune_loss.push_back(e.loss.total);
              run.pass_rate.push_back(e.pass_rate);
            }
            model = std::move(result.model);
          }
          run.metrics = Evaluator::evaluate(model, data.target);
          run.model_checksum = hex64(model_checksum(model));
          save_checkpoint(model, {seed, config.hp.epochs}, run_dir / "final.ckpt.json");
        }
      } catch (const std::exception& e) {
        run.ok = false;
        run.diagnostic = e.what();
      }
      rr.runs.push_back(std::move(run));
    }
    report.rows.push_back(std::move(rr));
  }
  finalize(report);
  report.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  emit_report(report, out, {true, true, config.write_plots});
  return report;
}

}  // namespace prodding
