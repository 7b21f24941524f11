#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "prodding/datasets.hpp"
#include "prodding/networks.hpp"
#include "prodding/pseudo.hpp"

namespace prodding {

/// Second-stage terms. `fm` is plain weak-to-strong consistency, `afm` the
/// prior-adjusted variant; afm wins when both are set.
struct FinetuneFlags {
  bool fm = false;
  bool afm = true;
  bool mi = true;

  bool consistency() const { return fm || afm; }
  bool any_loss() const { return fm || afm || mi; }
};

/// Class frequencies of the pseudo-labels, floored and renormalized.
Vector estimate_prior(std::span<const int> pseudo_labels, int num_classes, double floor = 1e-4);

struct ConsistencyLoss {
  double value = 0.0;
  Matrix dstrong;  ///< gradient w.r.t. the strong-view logits; the weak view is treated as constant
  std::size_t passed = 0;
};

/// (1/B) sum_i 1[max softmax(weak_i) >= eta] CE(yhat_i, softmax(strong_i)).
ConsistencyLoss fixmatch_loss(const LogitMatrix& weak, const LogitMatrix& strong, double eta);
/// Same with strong logits shifted by rho * log(prior) before the softmax.
ConsistencyLoss adjusted_fixmatch_loss(const LogitMatrix& weak, const LogitMatrix& strong, double eta,
                                       const Vector& prior, double rho);

struct DingBreakdown {
  double consistency = 0.0;
  double mi = 0.0;
  double total = 0.0;
  double pass_rate = 0.0;
};

/// Accumulates gradients of consistency - mi; mi is computed on the weak view.
DingBreakdown ding_objective(TargetModel& model, const Matrix& weak, const Matrix& strong, const Vector& prior,
                             const Hyperparams& hp, const FinetuneFlags& flags);

DingBreakdown ding_step(TargetModel& model, Sgd& sgd, const LearningRates& lr, const Matrix& weak,
                        const Matrix& strong, const Vector& prior, const Hyperparams& hp, const FinetuneFlags& flags);

struct FinetuneEpoch {
  int epoch = 0;
  Vector prior;
  double pass_rate = 0.0;
  DingBreakdown loss;  ///< batch-size-weighted means
};

struct FinetuneResult {
  TargetModel model;
  std::vector<FinetuneEpoch> epochs;
};

struct FinetuneOptions {
  FinetuneFlags flags;
  AugmentationPolicy weak;
  AugmentationPolicy strong;
  std::uint64_t seed = 2024;
  /// JSON lines {epoch, step, pi, pass_rate, afm, mi, total} are appended here when set.
  std::ostream* metrics_log = nullptr;
  std::function<void(int epoch, const TargetModel&)> on_epoch_end;
};

/// Re-estimates the prior from weak-view predictions at the start of every
/// epoch, then trains for hp.epochs epochs.
FinetuneResult run_finetune(TargetModel model, const Dataset& dataset, const Hyperparams& hp,
                            const OptimConfig& optim, const FinetuneOptions& options);

}  // namespace prodding
