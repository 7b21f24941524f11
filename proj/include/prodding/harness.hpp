#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prodding/datasets.hpp"
#include "prodding/distill.hpp"
#include "prodding/finetune.hpp"
#include "prodding/networks.hpp"
#include "prodding/oracle.hpp"
#include "prodding/pseudo.hpp"

namespace prodding {

/// One row of the ablation matrix.
struct AblationPreset {
  std::string name;
  DistillFlags distill;
  FinetuneFlags finetune;

  bool runs_distill() const { return distill.any_loss(); }
  bool runs_finetune() const { return finetune.any_loss(); }
  bool is_no_adapt() const { return !runs_distill() && !runs_finetune(); }
};

/// no_adapt, skd, skd_mix, skd_mi, skd_mix_mi, prod, prod_fm, prod_afm, prod_mi,
/// prod_fm_mi, prodding.
const std::vector<AblationPreset>& ablation_presets();
AblationPreset find_preset(std::string_view name);

struct DatasetConfig {
  std::string kind = "synthetic";  ///< synthetic | image_list
  SyntheticSpec synthetic{4, 2, 300, 3.0, 1.0, 35.0, {}, 7};
  std::string source_list;
  std::string target_list;
  std::string root;
  int num_classes = 0;
  std::string label_shift = "none";  ///< none | rsut | partial
  double shift_decay = 0.7;
  double partial_fraction = 0.5;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset;
  QueryMode oracle_mode = QueryMode::soft(1);

  double source_epsilon = 0.1;
  int source_epochs = 50;
  std::uint64_t source_seed = 1234;
  int encoder_hidden = 64;
  int bottleneck_dim = 256;

  Hyperparams hp;
  OptimConfig optim;
  double weak_noise = 0.05;
  double strong_multiplier = 4.0;
  double mask_fraction = 0.25;

  std::vector<std::uint64_t> seeds{2024, 2025, 2026};
  /// Preset names; "custom" selects the flags below.
  std::vector<std::string> ablations{"custom"};
  AblationPreset custom{"custom", {}, {}};

  std::string output_dir = "runs";
  bool write_banks = false;
  bool write_plots = true;

  void validate() const;
  /// Content hash of every semantic field (output settings excluded).
  std::string fingerprint() const;
  /// Canonical `key = value` text; parse_config(to_text()) reproduces the config.
  std::string to_text() const;

  /// `input_dim` is added when positive.
  nlohmann::json encoder_spec(int input_dim = 0) const;
  AugmentationPolicy weak_policy() const;
  AugmentationPolicy strong_policy() const;
  std::vector<AblationPreset> rows() const;
  /// output_dir resolved against $PRODDING_OUTPUT_ROOT when relative.
  std::filesystem::path output_path() const;
};

/// Flat `key = value` lines; `#` starts a comment. Unknown keys, malformed
/// values and duplicate keys are ConfigErrors.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct ConfigKeyDoc {
  std::string key;
  std::string doc;
};
std::vector<ConfigKeyDoc> config_keys();

struct Metrics {
  double accuracy = 0.0;
  double per_class_accuracy = 0.0;
  std::vector<double> class_recall;       ///< 0 for classes absent from the dataset
  std::vector<std::size_t> class_counts;
  std::size_t n = 0;
};

/// The only holder of evaluation access to target labels.
class Evaluator {
 public:
  static Metrics evaluate(const TargetModel& model, const Dataset& dataset);
  static Metrics evaluate_predictions(std::span<const int> predictions, const Dataset& dataset);
};

Metrics evaluate(const TargetModel& model, const Dataset& dataset);

/// Predictions of a model on every row of the dataset, evaluation mode.
std::vector<int> predict(const TargetModel& model, const Dataset& dataset);

struct SeedRun {
  std::uint64_t seed = 0;
  bool ok = true;
  std::string diagnostic;
  Metrics metrics;
  std::optional<double> distill_accuracy;   ///< after stage one, when it ran
  std::vector<double> distill_curve;        ///< accuracy per epoch
  std::vector<double> finetune_curve;
  std::vector<double> distill_loss;         ///< mean total loss per epoch
  std::vector<double> finetune_loss;
  std::vector<double> pass_rate;
  std::string model_checksum;

  bool operator==(const SeedRun&) const;
};

struct ReportRow {
  std::string name;
  std::vector<SeedRun> runs;
  double mean_accuracy = 0.0;
  double mean_per_class_accuracy = 0.0;

  bool operator==(const ReportRow&) const;
};

struct Report {
  std::string name;
  std::string config_fingerprint;
  std::vector<std::uint64_t> seeds;
  std::vector<ReportRow> rows;
  bool partial = false;
  double source_accuracy = 0.0;
  std::size_t target_size = 0;
  /// Bookkeeping, excluded from the fingerprint.
  std::size_t queries_issued = 0;
  bool source_from_checkpoint = false;
  double elapsed_seconds = 0.0;

  const ReportRow& row(std::string_view name) const;
  /// Hash of the results; independent of bookkeeping fields.
  std::string fingerprint() const;
  nlohmann::json to_json() const;
  static Report from_json(const nlohmann::json& j);
  bool operator==(const Report&) const;
};

/// Recomputes row means from the ok runs of each row and the partial flag.
void finalize(Report& report);

struct LoadedData {
  Dataset source;
  Dataset target;
};
LoadedData load_data(const ExperimentConfig& config);

/// Reads one whitespace-separated numeric vector per file.
Vector load_feature_file(const std::filesystem::path& path);

Report run_experiment(const ExperimentConfig& config);

struct ReportFormats {
  bool csv = true;
  bool json = true;
  bool plots = true;
};

/// report.csv, report.json, loss.svg, convergence.svg under `dir`.
void emit_report(const Report& report, const std::filesystem::path& dir, const ReportFormats& formats = {});
std::string report_csv(const Report& report);
/// `metric` is "accuracy" or "loss"; one series per stage of the reference row.
std::string report_svg(const Report& report, std::string_view metric);

}  // namespace prodding
