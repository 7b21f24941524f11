#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <vector>

#include "prodding/datasets.hpp"
#include "prodding/networks.hpp"
#include "prodding/oracle.hpp"
#include "prodding/pseudo.hpp"

namespace prodding {

/// Which terms of the first-stage objective are active.
struct DistillFlags {
  bool skd = true;
  bool mix = true;
  bool mi = true;
  /// Prototype pseudo-labels in the teacher init; off means beta = 1.
  bool proto = true;

  bool any_loss() const { return skd || mix || mi; }
};

struct LossBreakdown {
  double skd = 0.0;
  double mix = 0.0;
  double mi = 0.0;
  double total = 0.0;
};

/// Mean KL(teacher || softmax(student_logits)); gradient w.r.t. the student logits.
LossGrad skd_loss(const ProbMatrix& teacher, const LogitMatrix& student_logits);

/// h(mean_i p_i) - mean_i h(p_i) with p_i = softmax(logits_i), in nats.
LossGrad mutual_info(const LogitMatrix& logits);

struct MixSample {
  double lambda = 1.0;
  /// Row i is mixed with row partner[i].
  std::vector<std::size_t> partner;
};

/// lambda ~ Beta(alpha, alpha); partners are a seeded permutation of the batch.
MixSample sample_mix(std::size_t batch_size, double alpha, Rng& rng);
double sample_beta(double a, double b, Rng& rng);

/// lambda * a_i + (1 - lambda) * a_partner(i).
Matrix mix_inputs(const Matrix& batch, const MixSample& mix);

/// Interpolation consistency: cross-entropy between the mixed (gradient-free)
/// predictions and the prediction on the mixed input. When `accumulate` is
/// set, parameter gradients of `scale * loss` are added to the model.
double ict_loss(TargetModel& model, const Matrix& batch, const MixSample& mix, bool accumulate, double scale = 1.0);
/// Draws the mix from `seed` and returns the value only.
double ict_loss(TargetModel& model, const Matrix& batch, double alpha, std::uint64_t seed);

/// Accumulates gradients of skd + mix - mi into the model and reports the terms.
LossBreakdown prod_objective(TargetModel& model, const Matrix& batch, const ProbMatrix& teacher,
                             const DistillFlags& flags, const MixSample& mix);

/// One SGD step on the first-stage objective.
LossBreakdown prod_step(TargetModel& model, Sgd& sgd, const LearningRates& lr, const Matrix& batch,
                        const ProbMatrix& teacher, const DistillFlags& flags, const MixSample& mix);

struct StepRecord {
  int epoch = 0;
  int step = 0;
  LossBreakdown loss;
};

struct DistillHistory {
  std::vector<StepRecord> steps;
  std::vector<LossBreakdown> epochs;  ///< batch-size-weighted epoch means
  std::vector<TeacherBank> banks;     ///< index 0 is the initial bank, then one per epoch
};

struct DistillResult {
  TargetModel model;
  TeacherBank bank;
  DistillHistory history;
};

struct DistillOptions {
  DistillFlags flags;
  std::uint64_t seed = 2024;
  /// JSON lines {epoch, step, skd, mix, mi, total} are appended here when set.
  std::ostream* metrics_log = nullptr;
  /// Teacher bank snapshots bank-epoch-<e>.json are written here when set.
  std::optional<std::filesystem::path> bank_dir;
  /// Called after every epoch's teacher update; evaluation hook only.
  std::function<void(int epoch, const TargetModel&)> on_epoch_end;
};

/// Source-side pseudo-labels: adaptive smoothing of soft answers, conventional
/// smoothing of hard answers.
ProbMatrix source_pseudo_labels(const Dataset& dataset, const QueryTable& answers, const Hyperparams& hp);

/// Builds the teacher bank (prototypes are computed once, from the model's
/// current encoder) and trains for hp.epochs epochs.
DistillResult run_distillation(TargetModel model, const Dataset& dataset, const QueryTable& answers,
                               const Hyperparams& hp, const OptimConfig& optim, const DistillOptions& options);

}  // namespace prodding
