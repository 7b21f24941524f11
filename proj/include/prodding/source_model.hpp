#pragma once

// The source model lives behind the oracle. Only the oracle module and the
// source-side tooling include this header.

#include <filesystem>
#include <memory>

#include "prodding/networks.hpp"

namespace prodding {

struct SourceTrace {
  EncoderTrace encoder;
  Matrix features;
  Matrix logits;
};

/// Backbone encoder followed by one linear head; nothing else.
class SourceModel {
 public:
  SourceModel(std::unique_ptr<Encoder> encoder, int num_classes, Rng& rng);
  SourceModel(const SourceModel& other);
  SourceModel& operator=(const SourceModel& other);
  SourceModel(SourceModel&&) noexcept = default;
  SourceModel& operator=(SourceModel&&) noexcept = default;

  int num_classes() const { return num_classes_; }
  int input_dim() const { return encoder_->input_dim(); }

  LogitMatrix forward(const Matrix& x, SourceTrace* trace = nullptr) const;
  void backward(const SourceTrace& trace, const Matrix& dlogits);

  std::vector<Parameter*> parameters();
  std::vector<NamedTensor> tensors();
  nlohmann::json architecture() const;

 private:
  std::unique_ptr<Encoder> encoder_;
  Linear head_;
  int num_classes_;
};

LogitMatrix forward(const SourceModel& model, const Matrix& batch);

struct SourceTrainingOptions {
  double epsilon = 0.1;
  int epochs = 50;
  std::uint64_t seed = 1234;
  nlohmann::json encoder = {{"type", "mlp"}, {"hidden", 64}};
};

struct SourceTrainingResult {
  SourceModel model;
  int best_epoch = 0;
  double best_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

/// Trains on the labeled source set and returns the epoch with the best accuracy
/// on `holdout` (or on the training set when no holdout is given).
SourceTrainingResult train_source(const Dataset& data, const OptimConfig& optim, const SourceTrainingOptions& options,
                                  const Dataset* holdout = nullptr);

double source_accuracy(const SourceModel& model, const Dataset& data);

void save_checkpoint(SourceModel& model, const CheckpointMeta& meta, const std::filesystem::path& path);
SourceModel load_source_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);
std::uint64_t model_checksum(SourceModel& model);

}  // namespace prodding
