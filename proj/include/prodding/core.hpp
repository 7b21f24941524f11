#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace prodding {

/// Row-major dense matrix; rows are instances, columns are features or classes.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Rows are probability vectors over K classes.
using ProbMatrix = Matrix;
/// Rows are unnormalized scores over K classes.
using LogitMatrix = Matrix;

/// Invalid user-supplied configuration or arguments (CLI exit code 1).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while executing a well-formed request (CLI exit code 2).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a purpose tag.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

/// 64-bit FNV-1a content hash.
class Fingerprint {
 public:
  Fingerprint& add(std::string_view bytes);
  Fingerprint& add(std::span<const double> values);
  Fingerprint& add(std::int64_t value);
  Fingerprint& add(double value);
  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

/// Row-wise numerically stable softmax.
ProbMatrix softmax_rows(const LogitMatrix& logits);
/// Row-wise log-softmax.
Matrix log_softmax_rows(const LogitMatrix& logits);

/// Index of the largest entry; ties go to the lowest index.
int argmax(const RowVector& row);
int argmax(std::span<const double> row);

/// Shannon entropy in nats with 0 log 0 = 0.
double entropy(const RowVector& p);

/// Throws ConfigError unless every row is nonnegative and sums to 1 within `tol`.
void require_prob_rows(const ProbMatrix& p, std::string_view what, double tol = 1e-6);
bool is_prob_rows(const ProbMatrix& p, double tol = 1e-6);

}  // namespace prodding
