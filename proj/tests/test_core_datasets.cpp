#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <algorithm>
#include <functional>
#include <map>
#include <set>

#include "prodding/core.hpp"
#include "prodding/datasets.hpp"
#include "support.hpp"

using namespace prodding;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("prodding-test-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("derive_seed separates tags and indices") {
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a", 0) != derive_seed(1, "a", 1));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
}

TEST_CASE("fingerprint is order sensitive and hex is 16 chars") {
  Fingerprint a, b;
  a.add("x").add(std::int64_t{1});
  b.add(std::int64_t{1}).add("x");
  CHECK(a.value() != b.value());
  CHECK(a.hex().size() == 16);
  CHECK(Fingerprint{}.add("abc").value() == Fingerprint{}.add("abc").value());
}

TEST_CASE("softmax and log-softmax agree with a reference") {
  Rng rng(3);
  const Matrix z = testing::random_matrix(6, 5, rng, 4.0);
  const ProbMatrix p = softmax_rows(z);
  const Matrix lp = log_softmax_rows(z);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const auto ref = testing::ref_softmax(testing::row_of(z, i));
    for (Eigen::Index k = 0; k < z.cols(); ++k) {
      CHECK(p(i, k) == doctest::Approx(ref[static_cast<std::size_t>(k)]).epsilon(1e-12));
      CHECK(lp(i, k) == doctest::Approx(std::log(ref[static_cast<std::size_t>(k)])).epsilon(1e-12));
    }
  }
  Matrix big(1, 2);
  big << 1000.0, 0.0;
  CHECK(softmax_rows(big)(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  RowVector r(4);
  r << 0.3, 0.3, 0.1, 0.3;
  CHECK(argmax(r) == 0);
  r << 0.1, 0.4, 0.1, 0.4;
  CHECK(argmax(r) == 1);
}

TEST_CASE("entropy treats 0 log 0 as 0") {
  RowVector p(3);
  p << 1.0, 0.0, 0.0;
  CHECK(entropy(p) == 0.0);
  p << 0.5, 0.5, 0.0;
  CHECK(entropy(p) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("load_image_list parses and reports line numbers") {
  const auto dir = scratch("lists");
  SUBCASE("empty file") {
    write(dir / "e.txt", "");
    CHECK(load_image_list(dir / "e.txt", dir, 3).size() == 0);
  }
  SUBCASE("two lines") {
    write(dir / "a.txt", "a.jpg 0\nb.jpg 2");
    const auto d = load_image_list(dir / "a.txt", dir, 3);
    REQUIRE(d.size() == 2);
    CHECK(d[0].id == "a.jpg");
    CHECK(d[1].id == "b.jpg");
    CHECK(d.training_labels() == std::vector<int>{0, 2});
  }
  SUBCASE("label out of range") {
    write(dir / "bad.txt", "a.jpg 5\n");
    CHECK(error_of([&] { load_image_list(dir / "bad.txt", dir, 3); }) == "label out of range at line 1");
  }
  SUBCASE("malformed line") {
    write(dir / "m.txt", "a.jpg 0\nb.jpg x\n");
    CHECK(error_of([&] { load_image_list(dir / "m.txt", dir, 3); }).find("line 2") != std::string::npos);
    write(dir / "m2.txt", "a.jpg 0\nnolabel\n");
    CHECK(error_of([&] { load_image_list(dir / "m2.txt", dir, 3); }).find("line 2") != std::string::npos);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_image_list(dir / "nope.txt", dir, 3), ConfigError);
  }
  SUBCASE("duplicate id") {
    write(dir / "d.txt", "a.jpg 0\na.jpg 1\n");
    CHECK_THROWS_AS(load_image_list(dir / "d.txt", dir, 3), ConfigError);
  }
}

TEST_CASE("image list round trip keeps ids, order and labels") {
  const auto dir = scratch("roundtrip");
  write(dir / "in.txt", "z/3.png 1\na/1.png 0\nm/2.png 2\n");
  const auto d = load_image_list(dir / "in.txt", dir, 3);
  save_image_list(d, dir / "out.txt");
  const auto e = load_image_list(dir / "out.txt", dir, 3);
  REQUIRE(e.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(e[i].id == d[i].id);
  CHECK(e.training_labels() == d.training_labels());
}

TEST_CASE("target labels are gated behind the evaluation token") {
  const SyntheticPair pair = make_synthetic_shift({3, 2, 10, 3.0, 0.5, 20.0, {}, 1});
  CHECK_THROWS_AS(pair.target.training_labels(), ConfigError);
  const auto token = EvaluationTokenForTests::make();
  CHECK(pair.target.evaluation_labels(token).size() == pair.target.size());
  CHECK(pair.source.training_labels().size() == pair.source.size());
}

TEST_CASE("synthetic shift is deterministic with exact class counts") {
  const SyntheticSpec spec{4, 3, 25, 3.0, 1.0, 30.0, {}, 11};
  const auto a = make_synthetic_shift(spec);
  const auto b = make_synthetic_shift(spec);
  CHECK(a.source.inputs() == b.source.inputs());
  CHECK(a.target.inputs() == b.target.inputs());
  CHECK(a.source.fingerprint() == b.source.fingerprint());
  for (const auto c : class_counts(a.source)) CHECK(c == 25);
  for (const auto c : class_counts(a.target)) CHECK(c == 25);
  CHECK(a.source.input_dim() == 3);
  auto other = spec;
  other.seed = 12;
  CHECK(make_synthetic_shift(other).source.fingerprint() != a.source.fingerprint());
}

TEST_CASE("synthetic spec validation") {
  CHECK_THROWS_AS(make_synthetic_shift({1, 2, 10, 3.0, 1.0, 0.0, {}, 1}), ConfigError);
  CHECK_THROWS_AS(make_synthetic_shift({2, 2, 0, 3.0, 1.0, 0.0, {}, 1}), ConfigError);
  CHECK_THROWS_AS(make_synthetic_shift({2, 1, 10, 3.0, 1.0, 0.0, {}, 1}), ConfigError);
}

namespace {

// Least-squares linear probe: one-vs-rest regression on [x, 1].
std::vector<int> probe_predict(const Dataset& train, const Dataset& test) {
  const int K = train.num_classes();
  const Matrix X = train.inputs();
  Matrix A(X.rows(), X.cols() + 1);
  A << X, Matrix::Ones(X.rows(), 1);
  Matrix Y = Matrix::Zero(X.rows(), K);
  const auto& y = train.training_labels();
  for (Eigen::Index i = 0; i < X.rows(); ++i) Y(i, y[static_cast<std::size_t>(i)]) = 1.0;
  const Matrix W = A.colPivHouseholderQr().solve(Y);
  const Matrix T = test.inputs();
  Matrix B(T.rows(), T.cols() + 1);
  B << T, Matrix::Ones(T.rows(), 1);
  const Matrix S = B * W;
  std::vector<int> out;
  for (Eigen::Index i = 0; i < S.rows(); ++i) out.push_back(argmax(RowVector(S.row(i))));
  return out;
}

double probe_accuracy(const Dataset& train, const Dataset& test) {
  const auto pred = probe_predict(train, test);
  const auto& y = test.evaluation_labels(EvaluationTokenForTests::make());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += pred[i] == y[i];
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

}  // namespace

TEST_CASE("identity shift: source probe scores alike on both domains") {
  const auto pair = make_synthetic_shift({3, 2, 200, 3.0, 0.8, 0.0, {}, 5});
  const double on_source = probe_accuracy(pair.source, pair.source.with_role(DomainRole::Target));
  const double on_target = probe_accuracy(pair.source, pair.target);
  CHECK(std::abs(on_source - on_target) < 0.05);
}

TEST_CASE("180 degree rotation swaps two symmetric blobs") {
  const auto pair = make_synthetic_shift({2, 2, 200, 3.0, 0.5, 180.0, {}, 5});
  CHECK(probe_accuracy(pair.source, pair.source.with_role(DomainRole::Target)) > 0.95);
  CHECK(probe_accuracy(pair.source, pair.target) < 0.05);
}

TEST_CASE("partial label shift keeps the lowest classes") {
  std::vector<Example> ex;
  std::vector<int> labels;
  for (int k = 0; k < 65; ++k) {
    for (int j = 0; j < 2; ++j) {
      ex.push_back({"c" + std::to_string(k) + "_" + std::to_string(j), Vector::Constant(2, k)});
      labels.push_back(k);
    }
  }
  const Dataset d(65, DomainRole::Source, ex, labels);
  LabelShift shift;
  shift.fraction = 25.0 / 65.0;
  const auto kept = apply_label_shift(d, shift);
  const auto counts = class_counts(kept);
  for (int k = 0; k < 65; ++k) CHECK((counts[static_cast<std::size_t>(k)] > 0) == (k < 25));
  CHECK(kept.num_classes() == 65);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const int y = kept.training_labels()[i];
    CHECK(kept[i].id.rfind("c" + std::to_string(y) + "_", 0) == 0);
  }

  shift.fraction = 1.0;
  const auto same = apply_label_shift(d, shift);
  CHECK(same.size() == d.size());
  CHECK(same.training_labels() == d.training_labels());
}

TEST_CASE("rsut profiles are reversed between roles") {
  const auto pair = make_synthetic_shift({5, 2, 60, 3.0, 1.0, 0.0, {}, 2});
  LabelShift shift;
  shift.mode = LabelShiftMode::Rsut;
  shift.decay = 0.7;
  const auto src = apply_label_shift(pair.source, shift);
  const auto tgt = apply_label_shift(pair.target, shift);
  auto cs = class_counts(src);
  const auto ct = class_counts(tgt);
  CHECK(cs.front() > cs.back());
  std::reverse(cs.begin(), cs.end());
  CHECK(cs == ct);
  // membership only: every surviving label matches the original
  std::map<std::string, int> original;
  for (std::size_t i = 0; i < pair.source.size(); ++i) original[pair.source[i].id] = pair.source.training_labels()[i];
  for (std::size_t i = 0; i < src.size(); ++i) CHECK(original.at(src[i].id) == src.training_labels()[i]);

  LabelShift harsh = shift;
  harsh.decay = 0.01;
  CHECK(error_of([&] { apply_label_shift(pair.source, harsh); }).find("empties class") != std::string::npos);
}

TEST_CASE("augmentation policies") {
  Vector x(8);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  AugmentationPolicy weak;
  weak.noise_scale = 0.0;
  CHECK(augment(x, weak, 9) == x);

  AugmentationPolicy strong;
  strong.kind = AugmentKind::Strong;
  strong.noise_scale = 0.0;
  strong.mask_fraction = 0.5;
  const Vector s = augment(x, strong, 9);
  CHECK((s.array() == 0.0).count() == 4);
  CHECK(s.size() == x.size());

  weak.noise_scale = 0.1;
  CHECK(augment(x, weak, 4) == augment(x, weak, 4));
  CHECK(augment(x, weak, 4) != augment(x, weak, 5));

  CHECK(parse_augment_kind("weak") == AugmentKind::Weak);
  CHECK(parse_augment_kind("strong") == AugmentKind::Strong);
  CHECK_THROWS_AS(parse_augment_kind("autoaugment-plus"), ConfigError);
}

TEST_CASE("image modality views keep their shape") {
  ImageShape shape{3, 8, 8};
  Rng rng(1);
  Vector img(static_cast<Eigen::Index>(shape.size()));
  for (Eigen::Index i = 0; i < img.size(); ++i) img[i] = std::uniform_real_distribution<double>(0, 1)(rng);
  for (const auto kind : {AugmentKind::Weak, AugmentKind::Strong}) {
    AugmentationPolicy p;
    p.kind = kind;
    p.image = shape;
    const Vector out = augment(img, p, 17);
    CHECK(out.size() == img.size());
    CHECK(out == augment(img, p, 17));
  }
}

TEST_CASE("augment_rows is per-row deterministic") {
  Rng rng(2);
  const Matrix x = testing::random_matrix(5, 3, rng);
  AugmentationPolicy p;
  const Matrix a = augment_rows(x, p, 77);
  CHECK(a == augment_rows(x, p, 77));
  CHECK(a.rows() == 5);
  CHECK(a.cols() == 3);
}
