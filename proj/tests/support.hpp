#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "prodding/core.hpp"
#include "prodding/datasets.hpp"
#include "prodding/networks.hpp"

namespace prodding {

struct EvaluationTokenForTests {
  static EvaluationToken make() { return EvaluationToken{}; }
};

}  // namespace prodding

namespace testing {

using namespace prodding;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

/// Dirichlet(1, ..., 1) rows.
inline ProbMatrix random_probs(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  ProbMatrix p(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) p(i, j) = g(rng) + 1e-12;
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline TargetModel toy_target(std::uint64_t seed, int input_dim = 4, int num_classes = 3) {
  return make_target_model({{"type", "mlp"}, {"input_dim", input_dim}, {"hidden", 5}}, 6, num_classes, seed);
}

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) of
/// the parameter gradient. `objective` returns the loss and accumulates its
/// gradient into the parameters.
inline double gradient_rel_error(const std::vector<Parameter*>& params, const std::function<double()>& objective,
                                 double h = 1e-5) {
  zero_grad(params);
  objective();
  std::vector<double> analytic;
  for (auto* p : params)
    for (Eigen::Index i = 0; i < p->grad.size(); ++i) analytic.push_back(p->grad.data()[i]);

  std::vector<double> numeric;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double saved = p->value.data()[i];
      p->value.data()[i] = saved + h;
      const double up = objective();
      p->value.data()[i] = saved - h;
      const double down = objective();
      p->value.data()[i] = saved;
      numeric.push_back((up - down) / (2.0 * h));
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

/// Same, with the analytic gradient accumulated by `accumulate` and the
/// numeric one taken from `value` (used when part of the objective is frozen).
inline double split_gradient_rel_error(const std::vector<Parameter*>& params, const std::function<void()>& accumulate,
                                       const std::function<double()>& value, double h = 1e-5) {
  zero_grad(params);
  accumulate();
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double saved = p->value.data()[i];
      p->value.data()[i] = saved + h;
      const double up = value();
      p->value.data()[i] = saved - h;
      const double down = value();
      p->value.data()[i] = saved;
      const double a = p->grad.data()[i];
      const double n = (up - down) / (2.0 * h);
      diff += (a - n) * (a - n);
      na += a * a;
      nn += n * n;
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

// Brute-force references, written without Eigen expressions or shared helpers.

inline std::vector<double> ref_softmax(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = v > m ? v : m;
  std::vector<double> out(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (out[i] = std::exp(z[i] - m));
  for (double& v : out) v /= s;
  return out;
}

inline std::vector<double> ref_adals(const std::vector<double>& p, int r) {
  const std::size_t K = p.size();
  std::vector<bool> kept(K, false);
  double mass = 0.0;
  for (int j = 0; j < r; ++j) {
    std::size_t best = K;
    for (std::size_t k = 0; k < K; ++k) {
      if (kept[k]) continue;
      if (best == K || p[k] > p[best]) best = k;
    }
    kept[best] = true;
    mass += p[best];
  }
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) out[k] = kept[k] ? p[k] : (1.0 - mass) / static_cast<double>(K - r);
  return out;
}

inline double ref_entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

inline std::vector<double> row_of(const Matrix& m, Eigen::Index i) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(j)] = m(i, j);
  return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  double d = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) d = std::max(d, std::abs(a(i, j) - b(i, j)));
  return d;
}

/// Weighted centroids, by loops.
inline Matrix ref_prototypes(const Matrix& f, const Matrix& w) {
  Matrix c = Matrix::Zero(w.cols(), f.cols());
  for (Eigen::Index k = 0; k < w.cols(); ++k) {
    double mass = 0.0;
    for (Eigen::Index i = 0; i < f.rows(); ++i) mass += w(i, k);
    if (mass <= 0) continue;
    for (Eigen::Index d = 0; d < f.cols(); ++d) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < f.rows(); ++i) s += w(i, k) * f(i, d);
      c(k, d) = s / mass;
    }
  }
  return c;
}

/// Softmax of -(1 - cos) / tau, by loops.
inline Matrix ref_proto_labels(const Matrix& f, const Matrix& c, double tau) {
  Matrix out(f.rows(), c.rows());
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    std::vector<double> z(static_cast<std::size_t>(c.rows()));
    for (Eigen::Index k = 0; k < c.rows(); ++k) {
      double dot = 0, nf = 0, nc = 0;
      for (Eigen::Index d = 0; d < f.cols(); ++d) {
        dot += f(i, d) * c(k, d);
        nf += f(i, d) * f(i, d);
        nc += c(k, d) * c(k, d);
      }
      z[static_cast<std::size_t>(k)] = -(1.0 - dot / (std::sqrt(nf) * std::sqrt(nc))) / tau;
    }
    const auto p = ref_softmax(z);
    for (Eigen::Index k = 0; k < c.rows(); ++k) out(i, k) = p[static_cast<std::size_t>(k)];
  }
  return out;
}

/// Training-mode forward of a toy target model by loops over its parameter
/// list: fc1, fc2 (ReLU), batch norm, bottleneck linear, weight-normed classifier.
inline Matrix ref_forward_train(const std::vector<Parameter*>& p, const Matrix& x) {
  auto linear = [](const Matrix& in, const Matrix& w, const Matrix& b, bool relu) {
    Matrix out(in.rows(), w.rows());
    for (Eigen::Index i = 0; i < in.rows(); ++i)
      for (Eigen::Index o = 0; o < w.rows(); ++o) {
        double s = b(0, o);
        for (Eigen::Index j = 0; j < in.cols(); ++j) s += in(i, j) * w(o, j);
        out(i, o) = relu && s < 0 ? 0.0 : s;
      }
    return out;
  };
  const Matrix h1 = linear(x, p[0]->value, p[1]->value, true);
  const Matrix h2 = linear(h1, p[2]->value, p[3]->value, true);
  Matrix bn(h2.rows(), h2.cols());
  for (Eigen::Index j = 0; j < h2.cols(); ++j) {
    double mean = 0.0, var = 0.0;
    for (Eigen::Index i = 0; i < h2.rows(); ++i) mean += h2(i, j);
    mean /= static_cast<double>(h2.rows());
    for (Eigen::Index i = 0; i < h2.rows(); ++i) var += (h2(i, j) - mean) * (h2(i, j) - mean);
    var /= static_cast<double>(h2.rows());
    for (Eigen::Index i = 0; i < h2.rows(); ++i)
      bn(i, j) = (h2(i, j) - mean) / std::sqrt(var + 1e-5) * p[4]->value(0, j) + p[5]->value(0, j);
  }
  const Matrix b = linear(bn, p[6]->value, p[7]->value, false);
  Matrix w = p[8]->value;
  for (Eigen::Index k = 0; k < w.rows(); ++k) {
    double n = 0.0;
    for (Eigen::Index j = 0; j < w.cols(); ++j) n += w(k, j) * w(k, j);
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(k, j) /= std::sqrt(n);
  }
  return linear(b, w, p[9]->value, false);
}

}  // namespace testing
