#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "prodding/core.hpp"
#include "prodding/datasets.hpp"
#include "prodding/nn.hpp"

namespace prodding {

struct OptimConfig {
  double lr_backbone = 1e-3;
  double lr_new_layers = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  int batch_size = 64;

  void validate() const;
};

struct LearningRates {
  double backbone = 0.0;
  double new_layers = 0.0;
  double for_group(ParamGroup g) const { return g == ParamGroup::Backbone ? backbone : new_layers; }
};

/// lr0 * (1 + 10 p)^-0.75 for each parameter group; p is training progress in [0, 1].
LearningRates lr_at(const OptimConfig& optim, double progress);

/// Mini-batch SGD with momentum and coupled weight decay.
class Sgd {
 public:
  explicit Sgd(OptimConfig config) : config_(config) {}
  void step(const std::vector<Parameter*>& params, const LearningRates& lr);
  /// Learning rate used for `param` in the most recent step.
  double applied_lr(const Parameter* param) const;

 private:
  OptimConfig config_;
  std::unordered_map<const Parameter*, Matrix> velocity_;
  std::unordered_map<const Parameter*, double> applied_;
};

void zero_grad(const std::vector<Parameter*>& params);

enum class Mode { Train, Eval };

struct TargetTrace {
  EncoderTrace encoder;
  Matrix features;
  BatchNormTrace norm;
  Matrix normalized;
  Matrix bottleneck;
  Matrix logits;
};

/// Encoder, then a bottleneck (batch norm followed by a linear layer), then a
/// weight-normalized linear classifier.
class TargetModel {
 public:
  TargetModel(std::unique_ptr<Encoder> encoder, int bottleneck_dim, int num_classes, Rng& rng);
  TargetModel(const TargetModel& other);
  TargetModel& operator=(const TargetModel& other);
  TargetModel(TargetModel&&) noexcept = default;
  TargetModel& operator=(TargetModel&&) noexcept = default;

  int num_classes() const { return num_classes_; }
  int input_dim() const { return encoder_->input_dim(); }
  int bottleneck_dim() const { return bottleneck_dim_; }

  /// Training-mode pass; batch-norm uses batch statistics. `update_running`
  /// controls whether the running estimates move.
  LogitMatrix forward_train(const Matrix& x, TargetTrace* trace = nullptr, bool update_running = true);
  /// Evaluation-mode pass with running batch-norm statistics.
  LogitMatrix forward_eval(const Matrix& x) const;
  /// Encoder output (the feature extractor g_t).
  Matrix features(const Matrix& x) const;

  void backward(const TargetTrace& trace, const Matrix& dlogits);

  std::vector<Parameter*> parameters();
  std::vector<NamedTensor> tensors();
  nlohmann::json architecture() const;
  Matrix classifier_weight() const { return classifier_.effective_weight(); }

 private:
  std::unique_ptr<Encoder> encoder_;
  BatchNorm1d norm_;
  Linear bottleneck_;
  WeightNormLinear classifier_;
  int bottleneck_dim_;
  int num_classes_;
};

LogitMatrix forward(const TargetModel& model, const Matrix& batch);

TargetModel make_target_model(const nlohmann::json& encoder_spec, int bottleneck_dim, int num_classes,
                              std::uint64_t seed);

/// Mean cross-entropy against (1 - eps) onehot(y) + eps / K.
LossGrad label_smoothing_loss(const LogitMatrix& logits, std::span<const int> labels, double epsilon);

/// Checkpoint files are JSON: architecture, named tensors, K, seed, epoch.
/// Doubles are written with round-trip precision, so reloads are bit-exact.
struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
};

void save_checkpoint(TargetModel& model, const CheckpointMeta& meta, const std::filesystem::path& path);
TargetModel load_target_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

std::uint64_t model_checksum(TargetModel& model);

}  // namespace prodding
