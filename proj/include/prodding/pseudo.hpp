#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "prodding/core.hpp"

namespace prodding {

/// Method hyperparameters. Defaults are the standard-benchmark values; the
/// large-scale preset lowers epochs to 10 and eta to 0.6.
struct Hyperparams {
  int r = 1;               ///< top-r entries kept by adaptive label smoothing
  double beta = 0.5;       ///< weight of the source branch in the teacher init
  double tau = 0.1;        ///< prototype softmax temperature
  double gamma = 0.7;      ///< teacher EMA momentum
  double alpha = 0.3;      ///< MixUp Beta(alpha, alpha)
  double eta = 0.95;       ///< confidence gate for weak-to-strong consistency
  double rho = 0.5;        ///< logit adjustment strength
  double epsilon = 0.1;    ///< conventional label smoothing
  int epochs = 30;         ///< epochs per adaptation stage
  int pca_dim = 0;         ///< 0 selects min(256, n - 1, feature dim)
  double prior_floor = 1e-4;

  void validate() const;
  static Hyperparams large_scale();
};

/// Keeps the top-r probabilities and spreads the remaining mass evenly over the other K - r classes.
RowVector adaptive_label_smooth(const RowVector& p, int r);
ProbMatrix adaptive_label_smooth(const ProbMatrix& p, int r);

/// Same rule when only the top-r labels and their probabilities are known.
RowVector smooth_truncated(std::span<const int> labels, std::span<const double> confidences, int num_classes);

/// (1 - eps) onehot(label) + eps / K.
RowVector conventional_label_smooth(int label, int num_classes, double epsilon);

/// Projects onto the leading principal directions (estimated from the centered
/// feature covariance) and L2-normalizes each row. The projection itself is not
/// centered, so data lying in a pca_dim-dimensional subspace keeps its cosine geometry.
/// `ids`, when given, names offending rows in errors.
Matrix reduce_features(const Matrix& features, int pca_dim, std::span<const std::string> ids = {});

int default_pca_dim(std::size_t n, std::size_t feature_dim);

struct Prototypes {
  Matrix centroids;   ///< K x d
  Vector class_mass;  ///< total weight per class
  bool defined(int k) const { return class_mass[k] > 0.0; }
  int num_classes() const { return static_cast<int>(centroids.rows()); }
};

/// Row k is the weights[:, k]-weighted mean of the feature rows.
Prototypes compute_prototypes(const Matrix& features, const ProbMatrix& weights);

/// Softmax over -cosine_distance / tau. Classes without a defined prototype get
/// zero probability and the survivors are renormalized.
ProbMatrix prototype_pseudo_labels(const Matrix& features, const Prototypes& prototypes, double tau);

/// Per-instance teacher distributions, EMA-updated at epoch boundaries.
class TeacherBank {
 public:
  TeacherBank() = default;
  TeacherBank(std::vector<std::string> ids, ProbMatrix rows, int epoch = 0);

  const std::vector<std::string>& ids() const { return ids_; }
  const ProbMatrix& rows() const { return rows_; }
  ProbMatrix rows(std::span<const std::size_t> indices) const;
  int epoch() const { return epoch_; }
  std::size_t size() const { return ids_.size(); }

  void save(const std::filesystem::path& path) const;
  static TeacherBank load(const std::filesystem::path& path);

 private:
  std::vector<std::string> ids_;
  ProbMatrix rows_;
  int epoch_ = 0;

  friend TeacherBank ema_update(const TeacherBank&, std::span<const std::string>, const ProbMatrix&, double);
};

/// beta * p_src + (1 - beta) * p_proto, row-wise.
TeacherBank init_teacher(std::vector<std::string> ids, const ProbMatrix& p_src, const ProbMatrix& p_proto,
                         double beta);

/// gamma * bank + (1 - gamma) * student, row-wise; bumps the epoch counter.
/// `student_ids` must list the bank's ids in the same order.
TeacherBank ema_update(const TeacherBank& bank, std::span<const std::string> student_ids, const ProbMatrix& student,
                       double gamma);

}  // namespace prodding
