#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "prodding/core.hpp"

namespace prodding {

/// Pretrained/backbone layers vs. layers added on top and trained from scratch.
enum class ParamGroup { Backbone, NewLayers };

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  ParamGroup group = ParamGroup::NewLayers;

  Parameter() = default;
  Parameter(std::string n, Matrix v, ParamGroup g)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())), group(g) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// A named tensor exposed for checkpointing (parameters and buffers alike).
struct NamedTensor {
  std::string name;
  Matrix* tensor;
};

/// Scalar loss with its gradient w.r.t. the logits it was computed from.
struct LossGrad {
  double value = 0.0;
  Matrix dlogits;
};

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, ParamGroup group, Rng& rng);

  Matrix forward(const Matrix& x) const;
  /// Accumulates parameter gradients and returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& dy);
  void collect(std::vector<Parameter*>& out) { out.push_back(&weight); out.push_back(&bias); }

  Parameter weight;  // out x in
  Parameter bias;    // 1 x out
};

/// Linear layer whose effective weight rows are v_k / ||v_k||.
class WeightNormLinear {
 public:
  WeightNormLinear() = default;
  WeightNormLinear(const std::string& name, int in, int out, ParamGroup group, Rng& rng);

  Matrix effective_weight() const;
  Matrix forward(const Matrix& x) const;
  Matrix backward(const Matrix& x, const Matrix& dy);
  void collect(std::vector<Parameter*>& out) { out.push_back(&direction); out.push_back(&bias); }

  Parameter direction;  // out x in, unnormalized
  Parameter bias;       // 1 x out
};

struct BatchNormTrace {
  Matrix normalized;
  RowVector inv_std;
  bool training = true;
};

class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  BatchNorm1d(const std::string& name, int features, ParamGroup group);

  /// Training mode normalizes with batch statistics (needs >= 2 rows); evaluation
  /// mode uses the running estimates.
  Matrix forward(const Matrix& x, bool training, BatchNormTrace* trace, bool update_running);
  Matrix forward_eval(const Matrix& x) const;
  Matrix backward(const BatchNormTrace& trace, const Matrix& dy);
  void collect(std::vector<Parameter*>& out) { out.push_back(&gamma); out.push_back(&beta); }

  Parameter gamma;
  Parameter beta;
  Matrix running_mean;  // 1 x features
  Matrix running_var;   // 1 x features
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Activations saved by an encoder forward pass for its backward pass.
struct EncoderTrace {
  std::vector<Matrix> saved;
};

/// Feature extractor interface. Implementations are registered by type name
/// so checkpoints can rebuild them.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;
  virtual Matrix forward(const Matrix& x, EncoderTrace* trace) const = 0;
  virtual Matrix backward(const EncoderTrace& trace, const Matrix& dy) = 0;
  virtual void collect(std::vector<Parameter*>& out) = 0;
  virtual nlohmann::json spec() const = 0;
  virtual std::unique_ptr<Encoder> clone() const = 0;
};

/// Two hidden ReLU layers of equal width.
class MlpEncoder final : public Encoder {
 public:
  MlpEncoder(int input_dim, int hidden, Rng& rng);

  int input_dim() const override { return input_dim_; }
  int output_dim() const override { return hidden_; }
  Matrix forward(const Matrix& x, EncoderTrace* trace) const override;
  Matrix backward(const EncoderTrace& trace, const Matrix& dy) override;
  void collect(std::vector<Parameter*>& out) override;
  nlohmann::json spec() const override;
  std::unique_ptr<Encoder> clone() const override { return std::make_unique<MlpEncoder>(*this); }

 private:
  int input_dim_;
  int hidden_;
  Linear fc1_;
  Linear fc2_;
};

using EncoderFactory = std::function<std::unique_ptr<Encoder>(const nlohmann::json& spec, Rng& rng)>;

/// Registers an encoder type; "mlp" is built in.
void register_encoder(const std::string& type, EncoderFactory factory);
std::unique_ptr<Encoder> make_encoder(const nlohmann::json& spec, Rng& rng);

/// Shuffled index batches. A trailing batch of one is folded into the previous
/// batch so batch-norm always sees at least two rows.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng);

std::uint64_t checksum(const std::vector<NamedTensor>& tensors);

}  // namespace prodding
