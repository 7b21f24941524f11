#include "prodding/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace prodding {

std::string to_string(DomainRole role) { return role == DomainRole::Source ? "source" : "target"; }

Dataset::Dataset(int num_classes, DomainRole role, std::vector<Example> examples,
                 std::vector<int> labels, std::vector<std::string> class_names)
    : num_classes_(num_classes),
      role_(role),
      examples_(std::move(examples)),
      labels_(std::move(labels)),
      class_names_(std::move(class_names)) {
  if (num_classes_ < 1) throw ConfigError("dataset needs at least one class");
  if (!labels_.empty() && labels_.size() != examples_.size()) {
    throw ConfigError("label count does not match example count");
  }
  if (!class_names_.empty() && class_names_.size() != static_cast<std::size_t>(num_classes_)) {
    throw ConfigError("class_names must have one entry per class");
  }
  for (int y : labels_) {
    if (y < 0 || y >= num_classes_) throw ConfigError("label " + std::to_string(y) + " out of range");
  }
  std::set<std::string_view> seen;
  for (const auto& ex : examples_) {
    if (!seen.insert(ex.id).second) throw ConfigError("duplicate example id '" + ex.id + "'");
  }
}

std::size_t Dataset::input_dim() const {
  return examples_.empty() ? 0 : static_cast<std::size_t>(examples_.front().input.size());
}

Matrix Dataset::inputs() const {
  std::vector<std::size_t> all(size());
  std::iota(all.begin(), all.end(), 0);
  return inputs(all);
}

Matrix Dataset::inputs(std::span<const std::size_t> indices) const {
  const auto dim = static_cast<Eigen::Index>(input_dim());
  Matrix out(static_cast<Eigen::Index>(indices.size()), dim);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& x = examples_.at(indices[r]).input;
    if (x.size() != dim) throw ConfigError("example '" + examples_[indices[r]].id + "' has wrong input size");
    out.row(static_cast<Eigen::Index>(r)) = x.transpose();
  }
  return out;
}

const std::vector<int>& Dataset::training_labels() const {
  if (role_ != DomainRole::Source) {
    throw ConfigError("target-domain labels are reserved for evaluation");
  }
  if (!labeled()) throw ConfigError("dataset is unlabeled");
  return labels_;
}

const std::vector<int>& Dataset::evaluation_labels(const EvaluationToken&) const {
  if (!labeled()) throw ConfigError("dataset carries no evaluation labels");
  return labels_;
}

Dataset Dataset::with_role(DomainRole role) const {
  Dataset out = *this;
  out.role_ = role;
  return out;
}

Dataset Dataset::without_labels() const {
  Dataset out = *this;
  out.labels_.clear();
  return out;
}

std::string Dataset::fingerprint() const {
  Fingerprint fp;
  fp.add(static_cast<std::int64_t>(num_classes_)).add(static_cast<std::int64_t>(examples_.size()));
  for (const auto& ex : examples_) {
    fp.add(ex.id);
    fp.add(std::span<const double>(ex.input.data(), static_cast<std::size_t>(ex.input.size())));
  }
  return fp.hex();
}

Dataset load_image_list(const std::filesystem::path& list_file, const std::filesystem::path& root,
                        int num_classes, DomainRole role, const ImageLoader& loader) {
  std::ifstream in(list_file);
  if (!in) throw ConfigError("cannot open image list '" + list_file.string() + "'");

  std::vector<Example> examples;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    // The label is the last whitespace-separated token; paths may contain spaces.
    const auto end = line.find_last_not_of(" \t");
    const auto split = line.find_last_of(" \t", end);
    if (split == std::string::npos) {
      throw ConfigError("malformed line " + std::to_string(line_no) + ": expected 'path label'");
    }
    const std::string path = line.substr(0, line.find_last_not_of(" \t", split) + 1);
    const std::string label_text = line.substr(split + 1, end - split);
    const auto path_start = path.find_first_not_of(" \t");
    if (path_start == std::string::npos) {
      throw ConfigError("malformed line " + std::to_string(line_no) + ": missing path");
    }

    int label = 0;
    std::size_t consumed = 0;
    try {
      label = std::stoi(label_text, &consumed);
    } catch (const std::exception&) {
      consumed = 0;
    }
    if (consumed != label_text.size()) {
      throw ConfigError("malformed line " + std::to_string(line_no) + ": label '" + label_text +
                        "' is not an integer");
    }
    if (label < 0 || label >= num_classes) {
      throw ConfigError("label out of range at line " + std::to_string(line_no));
    }

    Example ex;
    ex.id = path.substr(path_start);
    if (loader) ex.input = loader(root / ex.id);
    examples.push_back(std::move(ex));
    labels.push_back(label);
  }
  return Dataset(num_classes, role, std::move(examples), std::move(labels));
}

void save_image_list(const Dataset& dataset, const std::filesystem::path& list_file) {
  if (!dataset.labeled()) throw ConfigError("cannot write an image list without labels");
  std::ofstream out(list_file);
  if (!out) throw RuntimeFailure("cannot write '" + list_file.string() + "'");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out << dataset.examples_[i].id << ' ' << dataset.labels_[i] << '\n';
  }
}

std::vector<std::size_t> class_counts(const Dataset& dataset) {
  if (!dataset.labeled()) throw ConfigError("class counts need labels");
  std::vector<std::size_t> counts(static_cast<std::size_t>(dataset.num_classes()), 0);
  for (int y : dataset.labels_) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic spec needs K >= 2");
  if (dim < 2) throw ConfigError("synthetic spec needs dim >= 2");
  if (samples_per_class <= 0) throw ConfigError("synthetic spec needs samples_per_class > 0");
  if (!(noise_scale >= 0.0) || !(radius >= 0.0)) throw ConfigError("synthetic spec scales must be >= 0");
  if (!translation.empty() && translation.size() != static_cast<std::size_t>(dim)) {
    throw ConfigError("synthetic translation must have dim entries");
  }
}

SyntheticPair make_synthetic_shift(const SyntheticSpec& spec) {
  spec.validate();
  const int K = spec.num_classes;
  const int d = spec.dim;

  Rng mean_rng(derive_seed(spec.seed, "synthetic/means"));
  std::normal_distribution<double> unit(0.0, 1.0);
  Matrix means = Matrix::Zero(K, d);
  for (int k = 0; k < K; ++k) {
    const double angle = 2.0 * std::numbers::pi * k / K;
    means(k, 0) = spec.radius * std::cos(angle);
    means(k, 1) = spec.radius * std::sin(angle);
    for (int j = 2; j < d; ++j) means(k, j) = 0.5 * spec.radius * unit(mean_rng);
  }

  const double theta = spec.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);

  auto draw = [&](std::string_view tag, bool shifted, DomainRole role, char prefix) {
    Rng rng(derive_seed(spec.seed, tag));
    std::vector<std::pair<Vector, int>> rows;
    rows.reserve(static_cast<std::size_t>(K * spec.samples_per_class));
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < spec.samples_per_class; ++i) {
        Vector x(d);
        for (int j = 0; j < d; ++j) x[j] = means(k, j) + spec.noise_scale * unit(rng);
        if (shifted) {
          const double x0 = x[0];
          const double x1 = x[1];
          x[0] = c * x0 - s * x1;
          x[1] = s * x0 + c * x1;
          for (std::size_t j = 0; j < spec.translation.size(); ++j) x[static_cast<Eigen::Index>(j)] += spec.translation[j];
        }
        rows.emplace_back(std::move(x), k);
      }
    }
    std::shuffle(rows.begin(), rows.end(), rng);
    std::vector<Example> examples;
    std::vector<int> labels;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "%c%06zu", prefix, i);
      examples.push_back({id, std::move(rows[i].first)});
      labels.push_back(rows[i].second);
    }
    return Dataset(K, role, std::move(examples), std::move(labels));
  };

  return {draw("synthetic/source", false, DomainRole::Source, 's'),
          draw("synthetic/target", true, DomainRole::Target, 't')};
}

Dataset apply_label_shift(const Dataset& dataset, const LabelShift& shift) {
  if (!dataset.labeled() || (dataset.labels_.empty() && !dataset.empty())) {
    throw ConfigError("label shift needs a labeled dataset");
  }
  const int K = dataset.num_classes();
  std::vector<std::size_t> quota(static_cast<std::size_t>(K));
  const auto counts = class_counts(dataset);

  if (shift.mode == LabelShiftMode::Partial) {
    if (!(shift.fraction > 0.0 && shift.fraction <= 1.0)) throw ConfigError("partial fraction must be in (0, 1]");
    const auto kept = static_cast<std::size_t>(std::ceil(shift.fraction * K - 1e-9));
    for (std::size_t k = 0; k < quota.size(); ++k) quota[k] = k < kept ? counts[k] : 0;
  } else {
    if (!(shift.decay > 0.0 && shift.decay <= 1.0)) throw ConfigError("rsut decay must be in (0, 1]");
    const std::size_t base = *std::min_element(counts.begin(), counts.end());
    for (int k = 0; k < K; ++k) {
      const int rank = dataset.role() == DomainRole::Source ? k : K - 1 - k;
      quota[static_cast<std::size_t>(k)] =
          static_cast<std::size_t>(std::llround(static_cast<double>(base) * std::pow(shift.decay, rank)));
      if (quota[static_cast<std::size_t>(k)] == 0) {
        throw ConfigError("rsut subsampling empties class " + std::to_string(k));
      }
    }
  }

  // Seeded choice of which members survive; survivors keep their original order.
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < dataset.size(); ++i) members[static_cast<std::size_t>(dataset.labels_[i])].push_back(i);
  Rng rng(derive_seed(shift.seed, "label-shift"));
  std::vector<bool> keep(dataset.size(), false);
  for (std::size_t k = 0; k < members.size(); ++k) {
    auto& m = members[k];
    std::shuffle(m.begin(), m.end(), rng);
    for (std::size_t j = 0; j < std::min(quota[k], m.size()); ++j) keep[m[j]] = true;
  }

  std::vector<Example> examples;
  std::vector<int> labels;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (!keep[i]) continue;
    examples.push_back(dataset.examples_[i]);
    labels.push_back(dataset.labels_[i]);
  }
  Dataset out(K, dataset.role(), std::move(examples), std::move(labels), dataset.class_names());
  out.set_image_shape(dataset.image_shape());
  return out;
}

AugmentKind parse_augment_kind(std::string_view text) {
  if (text == "weak") return AugmentKind::Weak;
  if (text == "strong") return AugmentKind::Strong;
  throw ConfigError("unknown augmentation policy '" + std::string(text) + "'");
}

namespace {

Vector augment_features(const Vector& x, const AugmentationPolicy& policy, Rng& rng) {
  const double sigma =
      policy.kind == AugmentKind::Weak ? policy.noise_scale : policy.strong_multiplier * policy.noise_scale;
  Vector out = x;
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (Eigen::Index j = 0; j < out.size(); ++j) out[j] += noise(rng);
  }
  if (policy.kind == AugmentKind::Strong && policy.mask_fraction > 0.0) {
    const auto dim = static_cast<std::size_t>(out.size());
    const auto masked = std::min(dim, static_cast<std::size_t>(std::floor(policy.mask_fraction * dim + 1e-9)));
    std::vector<std::size_t> order(dim);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t j = 0; j < masked; ++j) out[static_cast<Eigen::Index>(order[j])] = 0.0;
  }
  return out;
}

// Image ops act on a CHW tensor with values in [0, 1].
class ImageView {
 public:
  ImageView(Vector& data, const ImageShape& shape) : data_(data), shape_(shape) {}
  double& at(int c, int y, int x) { return data_[(static_cast<Eigen::Index>(c) * shape_.height + y) * shape_.width + x]; }
  const ImageShape& shape() const { return shape_; }
  Vector& data() { return data_; }

 private:
  Vector& data_;
  const ImageShape& shape_;
};

void crop_and_flip(Vector& img, const ImageShape& shape, int pad, Rng& rng) {
  std::uniform_int_distribution<int> offset(-pad, pad);
  const int dy = offset(rng);
  const int dx = offset(rng);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  Vector src = img;
  ImageView in(src, shape);
  ImageView out(img, shape);
  for (int c = 0; c < shape.channels; ++c) {
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const int sy = y + dy;
        const int sx0 = x + dx;
        const int sx = flip ? shape.width - 1 - sx0 : sx0;
        const bool inside = sy >= 0 && sy < shape.height && sx >= 0 && sx < shape.width;
        out.at(c, y, x) = inside ? in.at(c, sy, sx) : 0.0;
      }
    }
  }
}

void apply_image_op(Vector& img, const ImageShape& shape, int op, double magnitude, Rng& rng) {
  auto clamp01 = [](Vector& v) { v = v.cwiseMax(0.0).cwiseMin(1.0); };
  switch (op) {
    case 0: {  // brightness
      img *= 1.0 + magnitude * std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
      clamp01(img);
      break;
    }
    case 1: {  // contrast
      const double mean = img.mean();
      const double factor = 1.0 + magnitude * std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
      img = ((img.array() - mean) * factor + mean).matrix();
      clamp01(img);
      break;
    }
    case 2: {  // solarize
      const double threshold = 1.0 - magnitude;
      for (Eigen::Index i = 0; i < img.size(); ++i) {
        if (img[i] >= threshold) img[i] = 1.0 - img[i];
      }
      break;
    }
    case 3: {  // posterize
      const int bits = std::max(1, 8 - static_cast<int>(std::round(magnitude * 6.0)));
      const double levels = std::pow(2.0, bits) - 1.0;
      img = ((img.array() * levels).round() / levels).matrix();
      break;
    }
    case 4: {  // autocontrast per channel
      const auto plane = static_cast<Eigen::Index>(shape.height) * shape.width;
      for (int c = 0; c < shape.channels; ++c) {
        auto seg = img.segment(c * plane, plane);
        const double lo = seg.minCoeff();
        const double hi = seg.maxCoeff();
        if (hi > lo) seg = ((seg.array() - lo) / (hi - lo)).matrix();
      }
      break;
    }
    case 5: {  // translate
      const int max_shift = std::max(1, static_cast<int>(magnitude * shape.width));
      crop_and_flip(img, shape, max_shift, rng);
      break;
    }
    default: {  // cutout
      const int side = std::max(1, static_cast<int>(magnitude * std::min(shape.height, shape.width)));
      const int cy = std::uniform_int_distribution<int>(0, shape.height - 1)(rng);
      const int cx = std::uniform_int_distribution<int>(0, shape.width - 1)(rng);
      ImageView view(img, shape);
      for (int c = 0; c < shape.channels; ++c) {
        for (int y = std::max(0, cy - side / 2); y < std::min(shape.height, cy + (side + 1) / 2); ++y) {
          for (int x = std::max(0, cx - side / 2); x < std::min(shape.width, cx + (side + 1) / 2); ++x) {
            view.at(c, y, x) = 0.5;
          }
        }
      }
      break;
    }
  }
}

constexpr int kImageOps = 7;

Vector augment_image(const Vector& x, const AugmentationPolicy& policy, Rng& rng) {
  const auto& shape = *policy.image;
  if (static_cast<std::size_t>(x.size()) != shape.size()) throw ConfigError("image input does not match its shape");
  Vector out = x;
  crop_and_flip(out, shape, policy.crop_padding, rng);
  if (policy.kind == AugmentKind::Strong) {
    std::uniform_int_distribution<int> pick(0, kImageOps - 1);
    for (int i = 0; i < policy.num_ops; ++i) apply_image_op(out, shape, pick(rng), policy.magnitude, rng);
  }
  return out;
}

}  // namespace

Vector augment(const Vector& input, const AugmentationPolicy& policy, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "augment"));
  return policy.image ? augment_image(input, policy, rng) : augment_features(input, policy, rng);
}

Matrix augment_rows(const Matrix& inputs, const AugmentationPolicy& policy, std::uint64_t seed) {
  Matrix out(inputs.rows(), inputs.cols());
  for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
    out.row(i) = augment(inputs.row(i).transpose(), policy, derive_seed(seed, "row", static_cast<std::uint64_t>(i)))
                     .transpose();
  }
  return out;
}

}  // namespace prodding
