#include "prodding/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>

namespace prodding {

namespace {

Matrix uniform_matrix(int rows, int cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

Linear::Linear(const std::string& name, int in, int out, ParamGroup group, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = Parameter(name + ".weight", uniform_matrix(out, in, bound, rng), group);
  bias = Parameter(name + ".bias", uniform_matrix(1, out, bound, rng), group);
}

Matrix Linear::forward(const Matrix& x) const {
  Matrix y = x * weight.value.transpose();
  y.rowwise() += bias.value.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
  weight.grad.noalias() += dy.transpose() * x;
  bias.grad.row(0) += dy.colwise().sum();
  return dy * weight.value;
}

WeightNormLinear::WeightNormLinear(const std::string& name, int in, int out, ParamGroup group, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  direction = Parameter(name + ".direction", uniform_matrix(out, in, bound, rng), group);
  bias = Parameter(name + ".bias", uniform_matrix(1, out, bound, rng), group);
}

Matrix WeightNormLinear::effective_weight() const {
  Matrix w = direction.value;
  for (Eigen::Index k = 0; k < w.rows(); ++k) w.row(k) /= w.row(k).norm();
  return w;
}

Matrix WeightNormLinear::forward(const Matrix& x) const {
  Matrix y = x * effective_weight().transpose();
  y.rowwise() += bias.value.row(0);
  return y;
}

Matrix WeightNormLinear::backward(const Matrix& x, const Matrix& dy) {
  const Matrix w = effective_weight();
  const Matrix dw = dy.transpose() * x;
  // d(v/|v|)/dv projects out the radial component.
  for (Eigen::Index k = 0; k < w.rows(); ++k) {
    const double norm = direction.value.row(k).norm();
    direction.grad.row(k) += (dw.row(k) - dw.row(k).dot(w.row(k)) * w.row(k)) / norm;
  }
  bias.grad.row(0) += dy.colwise().sum();
  return dy * w;
}

BatchNorm1d::BatchNorm1d(const std::string& name, int features, ParamGroup group)
    : gamma(name + ".gamma", Matrix::Ones(1, features), group),
      beta(name + ".beta", Matrix::Zero(1, features), group),
      running_mean(Matrix::Zero(1, features)),
      running_var(Matrix::Ones(1, features)) {}

Matrix BatchNorm1d::forward(const Matrix& x, bool training, BatchNormTrace* trace, bool update_running) {
  if (!training) {
    if (trace) {
      trace->training = false;
      trace->inv_std = (running_var.row(0).array() + eps).rsqrt().matrix();
      trace->normalized = (x.rowwise() - running_mean.row(0)).array().rowwise() * trace->inv_std.array();
    }
    return forward_eval(x);
  }
  const auto n = x.rows();
  if (n < 2) throw RuntimeFailure("batch norm in training mode needs at least two rows");
  const RowVector mean = x.colwise().mean();
  const Matrix centered = x.rowwise() - mean;
  const RowVector var = centered.array().square().colwise().sum() / static_cast<double>(n);
  const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix normalized = centered.array().rowwise() * inv_std.array();
  if (update_running) {
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    running_mean.row(0) = (1.0 - momentum) * running_mean.row(0) + momentum * mean;
    running_var.row(0) = (1.0 - momentum) * running_var.row(0) + momentum * unbias * var;
  }
  Matrix y = (normalized.array().rowwise() * gamma.value.row(0).array()).matrix();
  y.rowwise() += beta.value.row(0);
  if (trace) {
    trace->training = true;
    trace->inv_std = inv_std;
    trace->normalized = std::move(normalized);
  }
  return y;
}

Matrix BatchNorm1d::forward_eval(const Matrix& x) const {
  const RowVector scale = ((running_var.row(0).array() + eps).rsqrt() * gamma.value.row(0).array()).matrix();
  Matrix y = (x.rowwise() - running_mean.row(0)).array().rowwise() * scale.array();
  y.rowwise() += beta.value.row(0);
  return y;
}

Matrix BatchNorm1d::backward(const BatchNormTrace& trace, const Matrix& dy) {
  gamma.grad.row(0) += (dy.array() * trace.normalized.array()).colwise().sum().matrix();
  beta.grad.row(0) += dy.colwise().sum();
  const Matrix dnorm = dy.array().rowwise() * gamma.value.row(0).array();
  if (!trace.training) return dnorm.array().rowwise() * trace.inv_std.array();

  const auto n = static_cast<double>(dy.rows());
  const RowVector sum_dnorm = dnorm.colwise().sum();
  const RowVector sum_dnorm_xhat = (dnorm.array() * trace.normalized.array()).colwise().sum().matrix();
  Matrix dx = (n * dnorm).rowwise() - sum_dnorm;
  dx -= (trace.normalized.array().rowwise() * sum_dnorm_xhat.array()).matrix();
  dx = (dx.array().rowwise() * (trace.inv_std.array() / n)).matrix();
  return dx;
}

MlpEncoder::MlpEncoder(int input_dim, int hidden, Rng& rng)
    : input_dim_(input_dim),
      hidden_(hidden),
      fc1_("encoder.fc1", input_dim, hidden, ParamGroup::Backbone, rng),
      fc2_("encoder.fc2", hidden, hidden, ParamGroup::Backbone, rng) {
  if (input_dim < 1 || hidden < 1) throw ConfigError("mlp encoder dimensions must be positive");
}

Matrix MlpEncoder::forward(const Matrix& x, EncoderTrace* trace) const {
  if (x.cols() != input_dim_) {
    throw ConfigError("input has " + std::to_string(x.cols()) + " columns, encoder expects " +
                      std::to_string(input_dim_));
  }
  Matrix h1 = fc1_.forward(x).cwiseMax(0.0);
  Matrix h2 = fc2_.forward(h1).cwiseMax(0.0);
  if (trace) trace->saved = {x, h1, h2};
  return h2;
}

Matrix MlpEncoder::backward(const EncoderTrace& trace, const Matrix& dy) {
  const Matrix& x = trace.saved.at(0);
  const Matrix& h1 = trace.saved.at(1);
  const Matrix& h2 = trace.saved.at(2);
  const Matrix dz2 = (h2.array() > 0.0).select(dy, 0.0);
  const Matrix dh1 = fc2_.backward(h1, dz2);
  const Matrix dz1 = (h1.array() > 0.0).select(dh1, 0.0);
  return fc1_.backward(x, dz1);
}

void MlpEncoder::collect(std::vector<Parameter*>& out) {
  fc1_.collect(out);
  fc2_.collect(out);
}

nlohmann::json MlpEncoder::spec() const {
  return {{"type", "mlp"}, {"input_dim", input_dim_}, {"hidden", hidden_}};
}

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, EncoderFactory>& registry() {
  static std::map<std::string, EncoderFactory> r{
      {"mlp", [](const nlohmann::json& spec, Rng& rng) -> std::unique_ptr<Encoder> {
         return std::make_unique<MlpEncoder>(spec.at("input_dim").get<int>(), spec.value("hidden", 64), rng);
       }}};
  return r;
}

}  // namespace

void register_encoder(const std::string& type, EncoderFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[type] = std::move(factory);
}

std::unique_ptr<Encoder> make_encoder(const nlohmann::json& spec, Rng& rng) {
  EncoderFactory factory;
  {
    std::lock_guard lock(registry_mutex());
    const auto type = spec.value("type", std::string("mlp"));
    auto it = registry().find(type);
    if (it == registry().end()) throw ConfigError("unknown encoder type '" + type + "'");
    factory = it->second;
  }
  return factory(spec, rng);
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const auto end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() >= 2 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

std::uint64_t checksum(const std::vector<NamedTensor>& tensors) {
  Fingerprint fp;
  for (const auto& t : tensors) {
    fp.add(t.name);
    fp.add(static_cast<std::int64_t>(t.tensor->rows())).add(static_cast<std::int64_t>(t.tensor->cols()));
    fp.add(std::span<const double>(t.tensor->data(), static_cast<std::size_t>(t.tensor->size())));
  }
  return fp.value();
}

}  // namespace prodding
