#include "prodding/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "checkpoint_io.hpp"

namespace prodding {

void Hyperparams::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (r < 1) throw ConfigError("r must be >= 1");
  if (!in_unit(beta)) throw ConfigError("beta must lie in [0, 1]");
  if (!in_unit(gamma)) throw ConfigError("gamma must lie in [0, 1]");
  if (!in_unit(epsilon)) throw ConfigError("epsilon must lie in [0, 1]");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  if (!(eta > 0.0)) throw ConfigError("eta must be > 0");
  if (!(rho >= 0.0)) throw ConfigError("rho must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (pca_dim < 0) throw ConfigError("pca_dim must be >= 0");
  if (!(prior_floor > 0.0 && prior_floor < 1.0)) throw ConfigError("prior_floor must lie in (0, 1)");
}

Hyperparams Hyperparams::large_scale() {
  Hyperparams hp;
  hp.epochs = 10;
  hp.eta = 0.6;
  return hp;
}

namespace {

std::vector<int> top_indices(const RowVector& p, int r) {
  std::vector<int> order(static_cast<std::size_t>(p.size()));
  std::iota(order.begin(), order.end(), 0);
  // Stable: equal probabilities rank by lower index, matching argmax.
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
  order.resize(static_cast<std::size_t>(r));
  return order;
}

}  // namespace

RowVector adaptive_label_smooth(const RowVector& p, int r) {
  const auto K = static_cast<int>(p.size());
  if (r < 1 || r > K - 1) throw ConfigError("adaptive label smoothing needs 1 <= r <= K - 1");
  const auto top = top_indices(p, r);
  std::vector<double> conf;
  for (int k : top) conf.push_back(p[k]);
  return smooth_truncated(top, conf, K);
}

ProbMatrix adaptive_label_smooth(const ProbMatrix& p, int r) {
  ProbMatrix out(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) out.row(i) = adaptive_label_smooth(RowVector(p.row(i)), r);
  return out;
}

RowVector smooth_truncated(std::span<const int> labels, std::span<const double> confidences, int num_classes) {
  const auto r = static_cast<int>(labels.size());
  if (r < 1 || r > num_classes - 1) throw ConfigError("adaptive label smoothing needs 1 <= r <= K - 1");
  if (confidences.size() != labels.size()) throw ConfigError("labels and confidences differ in length");
  const double kept = std::accumulate(confidences.begin(), confidences.end(), 0.0);
  if (kept > 1.0 + 1e-9) throw ConfigError("top-r confidences sum above 1");
  RowVector out = RowVector::Constant(num_classes, std::max(0.0, 1.0 - kept) / (num_classes - r));
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] < 0 || labels[j] >= num_classes) throw ConfigError("label out of range");
    out[labels[j]] = confidences[j];
  }
  return out;
}

RowVector conventional_label_smooth(int label, int num_classes, double epsilon) {
  if (label < 0 || label >= num_classes) throw ConfigError("label out of range");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  RowVector q = RowVector::Constant(num_classes, epsilon / num_classes);
  q[label] += 1.0 - epsilon;
  return q;
}

int default_pca_dim(std::size_t n, std::size_t feature_dim) {
  const auto cap = std::min<std::size_t>({256, n > 0 ? n - 1 : 0, feature_dim});
  return static_cast<int>(std::max<std::size_t>(1, cap));
}

Matrix reduce_features(const Matrix& features, int pca_dim, std::span<const std::string> ids) {
  const auto n = features.rows();
  const auto e = features.cols();
  if (n < 2) throw ConfigError("feature reduction needs at least two rows");
  if (pca_dim < 1 || pca_dim > std::min(n, e)) {
    throw ConfigError("pca_dim must lie in [1, min(n, feature dim)]");
  }

  const RowVector mean = features.colwise().mean();
  const Matrix centered = features.rowwise() - mean;
  const Matrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success) throw RuntimeFailure("covariance eigendecomposition failed");

  // Eigenvalues ascend; take the last pca_dim columns in descending order.
  Matrix basis(e, pca_dim);
  for (int j = 0; j < pca_dim; ++j) {
    Vector v = solver.eigenvectors().col(e - 1 - j);
    Eigen::Index pivot = 0;
    v.cwiseAbs().maxCoeff(&pivot);
    if (v[pivot] < 0.0) v = -v;
    basis.col(j) = v;
  }

  Matrix reduced = features * basis;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = reduced.row(i).norm();
    if (!(norm > 1e-12)) {
      const std::string name =
          static_cast<std::size_t>(i) < ids.size() ? ids[static_cast<std::size_t>(i)] : "row " + std::to_string(i);
      throw RuntimeFailure("feature of '" + name + "' vanishes after projection");
    }
    reduced.row(i) /= norm;
  }
  return reduced;
}

Prototypes compute_prototypes(const Matrix& features, const ProbMatrix& weights) {
  if (features.rows() != weights.rows()) throw ConfigError("features and weights differ in row count");
  require_prob_rows(weights, "prototype weights");
  Prototypes out;
  out.class_mass = weights.colwise().sum().transpose();
  out.centroids = weights.transpose() * features;
  for (Eigen::Index k = 0; k < out.centroids.rows(); ++k) {
    if (out.class_mass[k] > 0.0) {
      out.centroids.row(k) /= out.class_mass[k];
    } else {
      out.centroids.row(k).setZero();
    }
  }
  return out;
}

ProbMatrix prototype_pseudo_labels(const Matrix& features, const Prototypes& prototypes, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (features.cols() != prototypes.centroids.cols()) throw ConfigError("feature and prototype dims differ");
  const int K = prototypes.num_classes();

  Matrix unit_protos = prototypes.centroids;
  std::vector<bool> live(static_cast<std::size_t>(K), false);
  for (int k = 0; k < K; ++k) {
    if (!prototypes.defined(k)) continue;
    const double norm = unit_protos.row(k).norm();
    if (!(norm > 0.0)) throw ConfigError("prototype " + std::to_string(k) + " has zero norm");
    unit_protos.row(k) /= norm;
    live[static_cast<std::size_t>(k)] = true;
  }
  if (std::none_of(live.begin(), live.end(), [](bool b) { return b; })) {
    throw ConfigError("no class has a defined prototype");
  }

  ProbMatrix out = ProbMatrix::Zero(features.rows(), K);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const double norm = features.row(i).norm();
    if (!(norm > 0.0)) throw ConfigError("feature row " + std::to_string(i) + " has zero norm");
    const RowVector f = features.row(i) / norm;
    double best = -std::numeric_limits<double>::infinity();
    RowVector score = RowVector::Constant(K, -std::numeric_limits<double>::infinity());
    for (int k = 0; k < K; ++k) {
      if (!live[static_cast<std::size_t>(k)]) continue;
      const double distance = 1.0 - f.dot(unit_protos.row(k));
      score[k] = -distance / tau;
      best = std::max(best, score[k]);
    }
    double total = 0.0;
    for (int k = 0; k < K; ++k) {
      if (!live[static_cast<std::size_t>(k)]) continue;
      out(i, k) = std::exp(score[k] - best);
      total += out(i, k);
    }
    out.row(i) /= total;
  }
  return out;
}

TeacherBank::TeacherBank(std::vector<std::string> ids, ProbMatrix rows, int epoch)
    : ids_(std::move(ids)), rows_(std::move(rows)), epoch_(epoch) {
  if (ids_.size() != static_cast<std::size_t>(rows_.rows())) throw ConfigError("bank ids and rows differ in count");
  require_prob_rows(rows_, "teacher bank");
}

ProbMatrix TeacherBank::rows(std::span<const std::size_t> indices) const {
  ProbMatrix out(static_cast<Eigen::Index>(indices.size()), rows_.cols());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    out.row(static_cast<Eigen::Index>(j)) = rows_.row(static_cast<Eigen::Index>(indices[j]));
  }
  return out;
}

void TeacherBank::save(const std::filesystem::path& path) const {
  nlohmann::json doc;
  doc["format"] = "prodding.teacher-bank";
  doc["epoch"] = epoch_;
  doc["num_classes"] = rows_.cols();
  auto& entries = doc["rows"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const auto row = rows_.row(static_cast<Eigen::Index>(i));
    entries.push_back({{"id", ids_[i]}, {"p", std::vector<double>(row.data(), row.data() + row.size())}});
  }
  detail::write_json_file(doc, path);
}

TeacherBank TeacherBank::load(const std::filesystem::path& path) {
  const auto doc = detail::read_json_file(path);
  if (doc.value("format", "") != "prodding.teacher-bank") throw ConfigError("'" + path.string() + "' is not a bank");
  const auto K = doc.at("num_classes").get<Eigen::Index>();
  const auto& entries = doc.at("rows");
  std::vector<std::string> ids;
  ProbMatrix rows(static_cast<Eigen::Index>(entries.size()), K);
  Eigen::Index i = 0;
  for (const auto& entry : entries) {
    ids.push_back(entry.at("id").get<std::string>());
    const auto p = entry.at("p").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(p.size()) != K) throw ConfigError("bank row has the wrong length");
    for (Eigen::Index k = 0; k < K; ++k) rows(i, k) = p[static_cast<std::size_t>(k)];
    ++i;
  }
  return TeacherBank(std::move(ids), std::move(rows), doc.at("epoch").get<int>());
}

TeacherBank init_teacher(std::vector<std::string> ids, const ProbMatrix& p_src, const ProbMatrix& p_proto,
                         double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  if (p_src.rows() != p_proto.rows() || p_src.cols() != p_proto.cols()) {
    throw ConfigError("source and prototype pseudo-labels differ in shape");
  }
  require_prob_rows(p_src, "source pseudo-labels");
  require_prob_rows(p_proto, "prototype pseudo-labels");
  ProbMatrix rows = beta * p_src + (1.0 - beta) * p_proto;
  return TeacherBank(std::move(ids), std::move(rows), 0);
}

TeacherBank ema_update(const TeacherBank& bank, std::span<const std::string> student_ids, const ProbMatrix& student,
                       double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (student.rows() != bank.rows_.rows() || student.cols() != bank.rows_.cols()) {
    throw ConfigError("student predictions and bank differ in shape");
  }
  if (student_ids.size() != bank.ids_.size() || !std::equal(student_ids.begin(), student_ids.end(), bank.ids_.begin())) {
    throw ConfigError("student prediction ids do not match the bank");
  }
  require_prob_rows(student, "student predictions");
  TeacherBank out = bank;
  out.rows_ = gamma * bank.rows_ + (1.0 - gamma) * student;
  out.epoch_ = bank.epoch_ + 1;
  return out;
}

}  // namespace prodding
