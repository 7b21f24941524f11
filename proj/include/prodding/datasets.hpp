#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prodding/core.hpp"

namespace prodding {

enum class DomainRole { Source, Target };

std::string to_string(DomainRole role);

/// Channel-major layout of an image input stored flat in Example::input.
struct ImageShape {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::size_t size() const { return static_cast<std::size_t>(channels) * height * width; }
  bool operator==(const ImageShape&) const = default;
};

struct Example {
  std::string id;
  Vector input;
};

class Dataset;
struct LabelShift;

/// Passkey for reading labels of a target-role dataset. Only evaluation code
/// can mint one, so adaptation code cannot peek at target labels.
class EvaluationToken {
 private:
  EvaluationToken() = default;
  friend class Evaluator;
  friend struct EvaluationTokenForTests;
};

class Dataset {
 public:
  Dataset() = default;
  /// `labels` is either empty (unlabeled) or parallel to `examples`.
  Dataset(int num_classes, DomainRole role, std::vector<Example> examples,
          std::vector<int> labels = {}, std::vector<std::string> class_names = {});

  std::size_t size() const { return examples_.size(); }
  bool empty() const { return examples_.empty(); }
  int num_classes() const { return num_classes_; }
  DomainRole role() const { return role_; }
  bool labeled() const { return !labels_.empty() || examples_.empty(); }
  std::size_t input_dim() const;

  const Example& operator[](std::size_t i) const { return examples_[i]; }
  const std::vector<Example>& examples() const { return examples_; }
  const std::vector<std::string>& class_names() const { return class_names_; }

  const std::optional<ImageShape>& image_shape() const { return image_shape_; }
  void set_image_shape(std::optional<ImageShape> shape) { image_shape_ = shape; }

  /// Stacked inputs, one row per example (optionally a subset).
  Matrix inputs() const;
  Matrix inputs(std::span<const std::size_t> indices) const;

  /// Labels for supervised training; only source-role datasets expose them.
  const std::vector<int>& training_labels() const;
  /// Labels for evaluation, whatever the role.
  const std::vector<int>& evaluation_labels(const EvaluationToken&) const;

  /// Same examples, relabeled role. Labels are kept (gated for targets).
  Dataset with_role(DomainRole role) const;
  /// Drops labels entirely.
  Dataset without_labels() const;

  /// Content hash over ids and inputs (labels excluded).
  std::string fingerprint() const;

 private:
  int num_classes_ = 0;
  DomainRole role_ = DomainRole::Source;
  std::vector<Example> examples_;
  std::vector<int> labels_;
  std::vector<std::string> class_names_;
  std::optional<ImageShape> image_shape_;

  friend Dataset apply_label_shift(const Dataset&, const LabelShift&);
  friend void save_image_list(const Dataset&, const std::filesystem::path&);
  friend std::vector<std::size_t> class_counts(const Dataset&);
};

/// Decodes an image file into a flat CHW vector. Not bundled; callers inject one.
using ImageLoader = std::function<Vector(const std::filesystem::path&)>;

/// Reads the `relative/path label` list format. Empty and whitespace-only lines are skipped.
Dataset load_image_list(const std::filesystem::path& list_file, const std::filesystem::path& root,
                        int num_classes, DomainRole role = DomainRole::Source,
                        const ImageLoader& loader = {});

/// Writes `id label` lines; the inverse of load_image_list for ids and labels.
void save_image_list(const Dataset& dataset, const std::filesystem::path& list_file);

/// Per-class example counts. Requires labels.
std::vector<std::size_t> class_counts(const Dataset& dataset);

struct SyntheticSpec {
  int num_classes = 4;
  int dim = 2;
  int samples_per_class = 300;
  /// Radius of the circle (in the first coordinate plane) holding the class means.
  double radius = 3.0;
  double noise_scale = 1.0;
  /// Rotation applied to the target domain in the first coordinate plane.
  double rotation_deg = 0.0;
  /// Optional additive translation of the target domain (length dim, or empty).
  std::vector<double> translation;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticPair {
  Dataset source;
  Dataset target;
};

/// Labeled Gaussian blobs for the source; independently drawn blobs moved by
/// the shift for the target. Deterministic in `spec.seed`.
SyntheticPair make_synthetic_shift(const SyntheticSpec& spec);

enum class LabelShiftMode { Rsut, Partial };

struct LabelShift {
  LabelShiftMode mode = LabelShiftMode::Partial;
  /// Rsut: count ratio between consecutive class ranks.
  double decay = 0.7;
  /// Partial: fraction of classes kept, lowest indices first.
  double fraction = 1.0;
  std::uint64_t seed = 0;
};

/// Subsamples membership only; labels are never rewritten. For Rsut the
/// frequency profile decays with class index on the source role and is
/// reversed on the target role.
Dataset apply_label_shift(const Dataset& dataset, const LabelShift& shift);

enum class AugmentKind { Weak, Strong };

AugmentKind parse_augment_kind(std::string_view text);

struct AugmentationPolicy {
  AugmentKind kind = AugmentKind::Weak;
  /// Feature modality: weak jitter std; strong uses strong_multiplier times this.
  double noise_scale = 0.05;
  double strong_multiplier = 4.0;
  /// Feature modality: fraction of coordinates zeroed by the strong view (floored).
  double mask_fraction = 0.25;
  /// Image modality.
  std::optional<ImageShape> image;
  int crop_padding = 4;
  int num_ops = 2;
  double magnitude = 0.3;
};

Vector augment(const Vector& input, const AugmentationPolicy& policy, std::uint64_t seed);

/// Row-wise augment with per-row seeds derived from `seed`.
Matrix augment_rows(const Matrix& inputs, const AugmentationPolicy& policy, std::uint64_t seed);

}  // namespace prodding
