#include "prodding/core.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>

namespace prodding {

namespace {

constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
  Fingerprint fp;
  fp.add(static_cast<std::int64_t>(base)).add(tag).add(static_cast<std::int64_t>(index));
  return splitmix64(fp.value());
}

Fingerprint& Fingerprint::add(std::string_view bytes) {
  for (unsigned char c : bytes) {
    state_ ^= c;
    state_ *= kFnvPrime;
  }
  // Length terminator keeps ("ab","c") distinct from ("a","bc").
  state_ ^= static_cast<std::uint64_t>(bytes.size()) + 0x1f;
  state_ *= kFnvPrime;
  return *this;
}

Fingerprint& Fingerprint::add(std::span<const double> values) {
  for (double v : values) add(v);
  return *this;
}

Fingerprint& Fingerprint::add(std::int64_t value) {
  auto bits = static_cast<std::uint64_t>(value);
  for (int i = 0; i < 8; ++i) {
    state_ ^= (bits >> (8 * i)) & 0xffU;
    state_ *= kFnvPrime;
  }
  return *this;
}

Fingerprint& Fingerprint::add(double value) {
  if (value == 0.0) value = 0.0;  // fold -0 into +0
  return add(static_cast<std::int64_t>(std::bit_cast<std::uint64_t>(value)));
}

std::string Fingerprint::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
  return buf;
}

ProbMatrix softmax_rows(const LogitMatrix& logits) {
  ProbMatrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix log_softmax_rows(const LogitMatrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

int argmax(const RowVector& row) {
  return argmax(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
}

int argmax(std::span<const double> row) {
  int best = 0;
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  }
  return best;
}

double entropy(const RowVector& p) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) h -= p[k] * std::log(p[k]);
  }
  return h;
}

bool is_prob_rows(const ProbMatrix& p, double tol) {
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    if (!p.row(i).allFinite() || p.row(i).minCoeff() < -tol) return false;
    if (std::abs(p.row(i).sum() - 1.0) > tol) return false;
  }
  return true;
}

void require_prob_rows(const ProbMatrix& p, std::string_view what, double tol) {
  if (!is_prob_rows(p, tol)) {
    throw ConfigError(std::string(what) + ": rows must be probability vectors");
  }
}

}  // namespace prodding
