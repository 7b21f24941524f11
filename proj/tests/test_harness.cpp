#include <doctest.h>

#include <filesystem>
#include <algorithm>
#include <fstream>
#include <sstream>

#include "prodding/harness.hpp"
#include "support.hpp"

using namespace prodding;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("prodding-test-" + name);
  fs::remove_all(dir);
  return dir;
}

Dataset labeled_target(const std::vector<int>& labels, int K) {
  std::vector<Example> ex;
  for (std::size_t i = 0; i < labels.size(); ++i) ex.push_back({"e" + std::to_string(i), Vector::Zero(2)});
  return Dataset(K, DomainRole::Target, ex, labels);
}

SeedRun run_with(double acc, double pc, bool ok = true) {
  SeedRun r;
  r.ok = ok;
  r.metrics.accuracy = acc;
  r.metrics.per_class_accuracy = pc;
  return r;
}

std::string tiny_config(const fs::path& out, const std::string& extra = "") {
  return "name = tiny\n"
         "synthetic.num_classes = 3\n"
         "synthetic.samples_per_class = 30\n"
         "synthetic.rotation_deg = 20\n"
         "source.epochs = 5\n"
         "model.bottleneck_dim = 16\n"
         "model.encoder_hidden = 16\n"
         "hp.epochs = 2\n"
         "optim.batch_size = 32\n"
         "run.seeds = 2024, 2025\n"
         "output.dir = " + out.string() + "\n" + extra;
}

}  // namespace

TEST_CASE("config parsing: defaults, values, errors") {
  const auto c = parse_config("");
  CHECK(c.seeds == std::vector<std::uint64_t>{2024, 2025, 2026});
  CHECK(c.hp.beta == 0.5);
  CHECK(c.oracle_mode == QueryMode::soft(1));

  const auto d = parse_config("hp.eta = 0.6  # large scale\noracle.mode = hard\nrun.ablations = prod, prodding\n");
  CHECK(d.hp.eta == 0.6);
  CHECK(d.oracle_mode == QueryMode::hard());
  CHECK(d.rows().size() == 2);
  CHECK(d.rows()[1].name == "prodding");

  CHECK_THROWS_AS(parse_config("hp.etta = 0.6"), ConfigError);
  CHECK_THROWS_AS(parse_config("hp.eta = 0.6\nhp.eta = 0.7"), ConfigError);
  CHECK_THROWS_AS(parse_config("hp.eta = high"), ConfigError);
  CHECK_THROWS_AS(parse_config("hp.epochs = 2.5"), ConfigError);
  CHECK_THROWS_AS(parse_config("no equals sign"), ConfigError);
  CHECK_THROWS_AS(parse_config("hp.beta = 2"), ConfigError);
  CHECK_THROWS_AS(parse_config("run.seeds = "), ConfigError);
  CHECK_THROWS_AS(parse_config("run.ablations = prod, nonsense"), ConfigError);
  CHECK_THROWS_AS(parse_config("flags.fm = true\nflags.afm = true"), ConfigError);
  CHECK_THROWS_AS(parse_config("oracle.mode = soft:4"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.txt"), ConfigError);
}

TEST_CASE("config text round trips and the fingerprint tracks semantics only") {
  const auto a = parse_config("hp.tau = 0.2\nrun.seeds = 1, 2\n");
  const auto b = parse_config("# comment\nrun.seeds = 1,2\n\n   hp.tau = 0.2   # trailing\n");
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(parse_config(a.to_text()).fingerprint() == a.fingerprint());
  CHECK(parse_config(a.to_text()).to_text() == a.to_text());

  const auto c = parse_config("hp.tau = 0.2\nrun.seeds = 1, 2\noutput.dir = elsewhere\noutput.plots = false\n");
  CHECK(c.fingerprint() == a.fingerprint());
  CHECK(parse_config("hp.tau = 0.21\nrun.seeds = 1, 2\n").fingerprint() != a.fingerprint());
  CHECK(parse_config("hp.tau = 0.2\nrun.seeds = 1, 3\n").fingerprint() != a.fingerprint());

  // every documented key changes the fingerprint when its value changes
  for (const auto& key : config_keys()) CHECK_FALSE(key.doc.empty());
}

TEST_CASE("ablation presets mirror the flag table") {
  const auto& all = ablation_presets();
  CHECK(all.size() == 11);
  CHECK(find_preset("no_adapt").is_no_adapt());
  const auto prod = find_preset("prod");
  CHECK(prod.runs_distill());
  CHECK_FALSE(prod.runs_finetune());
  const auto full = find_preset("prodding");
  CHECK(full.finetune.afm);
  CHECK(full.finetune.mi);
  CHECK_FALSE(full.finetune.fm);
  const auto skd = find_preset("skd");
  CHECK(skd.distill.skd);
  CHECK_FALSE(skd.distill.mix);
  CHECK_FALSE(skd.distill.proto);
  CHECK_THROWS_AS(find_preset("dine"), ConfigError);
}

TEST_CASE("evaluation metrics") {
  const Dataset d = labeled_target({0, 0, 1, 1, 2, 2}, 3);
  const auto perfect = Evaluator::evaluate_predictions(std::vector<int>{0, 0, 1, 1, 2, 2}, d);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.per_class_accuracy == 1.0);
  const auto some = Evaluator::evaluate_predictions(std::vector<int>{0, 1, 1, 0, 2, 0}, d);
  CHECK(some.accuracy == doctest::Approx(some.per_class_accuracy));

  std::vector<int> labels(10, 0);
  labels.insert(labels.end(), 30, 1);
  std::vector<int> preds(10, 0);
  for (int i = 0; i < 30; ++i) preds.push_back(i < 15 ? 1 : 0);
  const auto m = Evaluator::evaluate_predictions(preds, labeled_target(labels, 2));
  CHECK(m.class_recall[0] == 1.0);
  CHECK(m.class_recall[1] == 0.5);
  CHECK(m.per_class_accuracy == doctest::Approx(0.75));
  CHECK(m.accuracy == doctest::Approx(0.625));

  // absent classes are excluded
  const auto partial = Evaluator::evaluate_predictions(std::vector<int>{0, 1}, labeled_target({0, 0}, 3));
  CHECK(partial.per_class_accuracy == 0.5);

  std::vector<Example> ex{{"a", Vector::Zero(2)}};
  CHECK_THROWS_AS(Evaluator::evaluate_predictions(std::vector<int>{0}, Dataset(2, DomainRole::Target, ex)), ConfigError);
  CHECK_THROWS_AS(Evaluator::evaluate_predictions(std::vector<int>{0, 1, 2}, d), ConfigError);
}

TEST_CASE("finalize computes exact means and flags partial reports") {
  Rng rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    Report r;
    ReportRow row;
    row.name = "x";
    double sum = 0.0;
    int ok = 0;
    const int n = 1 + t % 5;
    bool any_failed = false;
    for (int s = 0; s < n; ++s) {
      const bool good = t % 7 != 0 || s > 0;
      const double acc = u(rng);
      row.runs.push_back(run_with(acc, acc, good));
      if (good) {
        sum += acc;
        ++ok;
      } else {
        any_failed = true;
      }
    }
    r.rows.push_back(row);
    finalize(r);
    CHECK(r.partial == any_failed);
    CHECK(r.rows[0].mean_accuracy == doctest::Approx(ok ? sum / ok : 0.0).epsilon(1e-15));
  }
}

TEST_CASE("report json, csv and svg") {
  Report r;
  r.name = "demo";
  r.config_fingerprint = "abc";
  r.seeds = {1, 2, 3};
  r.target_size = 10;
  r.queries_issued = 10;
  for (const char* name : {"no_adapt", "prod", "prodding"}) {
    ReportRow row;
    row.name = name;
    for (int s = 0; s < 3; ++s) {
      auto run = run_with(0.1 * s + 0.3, 0.2, true);
      run.seed = static_cast<std::uint64_t>(s + 1);
      run.metrics.class_recall = {0.5, 0.25};
      run.metrics.class_counts = {4, 6};
      run.metrics.n = 10;
      run.model_checksum = "00ff";
      if (std::string(name) != "no_adapt") {
        run.distill_curve = {0.5, 0.6};
        run.distill_loss = {1.0, 0.8};
        run.distill_accuracy = 0.6;
      }
      if (std::string(name) == "prodding") {
        run.finetune_curve = {0.7, 0.1 / 3.0};
        run.finetune_loss = {0.5, 0.4};
        run.pass_rate = {0.3, 0.4};
      }
      row.runs.push_back(run);
    }
    r.rows.push_back(row);
  }
  r.rows[1].runs[2].ok = false;
  r.rows[1].runs[2].diagnostic = "boom";
  finalize(r);

  const auto back = Report::from_json(nlohmann::json::parse(r.to_json().dump()));
  CHECK(back == r);
  CHECK(back.fingerprint() == r.fingerprint());
  Report bookkeeping = r;
  bookkeeping.elapsed_seconds = 99.0;
  bookkeeping.queries_issued = 0;
  CHECK(bookkeeping.fingerprint() == r.fingerprint());
  Report changed = r;
  changed.rows[0].runs[0].metrics.accuracy += 1e-9;
  CHECK(changed.fingerprint() != r.fingerprint());

  const std::string csv = report_csv(r);
  std::istringstream lines(csv);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  REQUIRE(rows.size() == 4);
  for (const auto& l : rows) CHECK(std::count(l.begin(), l.end(), ',') == 4);
  CHECK(rows[0] == "row,seed_1,seed_2,seed_3,mean");

  for (const char* metric : {"accuracy", "loss"}) {
    const auto svg = report_svg(r, metric);
    CHECK(svg.find("data-stage=\"distill\"") != std::string::npos);
    CHECK(svg.find("data-stage=\"finetune\"") != std::string::npos);
    std::size_t count = 0;
    for (auto pos = svg.find("class=\"series\""); pos != std::string::npos; pos = svg.find("class=\"series\"", pos + 1)) ++count;
    CHECK(count == 2);
  }
  CHECK_THROWS_AS(report_svg(r, "f1"), ConfigError);

  const auto dir = scratch("emit");
  emit_report(r, dir);
  for (const char* f : {"report.csv", "report.json", "loss.svg", "convergence.svg"}) CHECK(fs::exists(dir / f));
  CHECK_THROWS_AS(emit_report(r, "/proc/forbidden/dir"), RuntimeFailure);
}

TEST_CASE("label shift in the data loader") {
  auto c = parse_config("synthetic.num_classes = 4\nsynthetic.samples_per_class = 50\ndataset.label_shift = partial\n"
                        "dataset.partial_fraction = 0.5\n");
  auto data = load_data(c);
  CHECK(data.source.size() == 200);
  const auto& y = data.target.evaluation_labels(EvaluationTokenForTests::make());
  for (int label : y) CHECK(label < 2);

  c = parse_config("synthetic.num_classes = 4\nsynthetic.samples_per_class = 50\ndataset.label_shift = rsut\n");
  data = load_data(c);
  auto cs = class_counts(data.source);
  const auto ct = class_counts(data.target);
  std::reverse(cs.begin(), cs.end());
  CHECK(cs == ct);
}

TEST_CASE("image-list datasets load through feature files") {
  const auto dir = scratch("features");
  fs::create_directories(dir / "img");
  std::ofstream(dir / "img/a.txt") << "0.5 1.5\n";
  std::ofstream(dir / "img/b.txt") << "2 3";
  std::ofstream(dir / "src.txt") << "img/a.txt 0\nimg/b.txt 1\n";
  std::ofstream(dir / "tgt.txt") << "img/b.txt 1\n";
  auto c = parse_config("dataset.kind = image_list\ndataset.source_list = " + (dir / "src.txt").string() +
                        "\ndataset.target_list = " + (dir / "tgt.txt").string() + "\ndataset.root = " + dir.string() +
                        "\ndataset.num_classes = 2\n");
  const auto data = load_data(c);
  CHECK(data.source.size() == 2);
  CHECK(data.source[0].input[1] == 1.5);
  CHECK(data.target.role() == DomainRole::Target);
  std::ofstream(dir / "img/bad.txt") << "1 x";
  CHECK_THROWS_AS(load_feature_file(dir / "img/bad.txt"), ConfigError);
}

TEST_CASE("end-to-end run: artifacts, no-adapt bypass, warm rerun") {
  const auto out = scratch("e2e");
  const auto config = parse_config(tiny_config(out, "run.ablations = no_adapt, prodding\n"));
  const Report first = run_experiment(config);
  CHECK_FALSE(first.partial);
  CHECK(first.queries_issued == first.target_size);
  CHECK_FALSE(first.source_from_checkpoint);
  REQUIRE(first.rows.size() == 2);
  const auto dir = config.output_path();
  for (const char* f : {"config.txt", "source.ckpt.json", "report.csv", "report.json", "convergence.svg"})
    CHECK(fs::exists(dir / f));
  CHECK(fs::exists(dir / "prodding/seed-2024/final.ckpt.json"));
  CHECK(fs::exists(dir / "prodding/seed-2024/distill-metrics.jsonl"));
  CHECK(fs::exists(dir / "prodding/seed-2025/finetune-metrics.jsonl"));

  // no adaptation equals the source predictions, the same for every seed
  const auto& na = first.row("no_adapt");
  CHECK(na.runs[0].metrics.accuracy == na.runs[1].metrics.accuracy);
  const auto& full = first.row("prodding");
  CHECK(full.runs[0].distill_curve.size() == 2);
  CHECK(full.runs[0].finetune_curve.size() == 2);
  CHECK(full.runs[0].distill_accuracy.has_value());

  const Report second = run_experiment(config);
  CHECK(second.queries_issued == 0);
  CHECK(second.source_from_checkpoint);
  CHECK(second.fingerprint() == first.fingerprint());

  // a reloaded checkpoint evaluates like the in-run model
  const auto data = load_data(config);
  const auto m = evaluate(load_target_checkpoint(dir / "prodding/seed-2024/final.ckpt.json"), data.target);
  CHECK(m.accuracy == full.runs[0].metrics.accuracy);
}

TEST_CASE("all flags off through the custom row reproduces no-adapt") {
  const auto out = scratch("bypass");
  const auto config = parse_config(tiny_config(
      out, "run.ablations = custom, no_adapt\nflags.skd = false\nflags.mix = false\nflags.mi_distill = false\n"
           "flags.proto = false\nflags.afm = false\nflags.mi_finetune = false\n"));
  const Report r = run_experiment(config);
  CHECK(r.rows[0].mean_accuracy == r.rows[1].mean_accuracy);
}

TEST_CASE("a failing stage becomes a diagnostic and marks the report partial") {
  const auto out = scratch("partial");
  // pca_dim larger than the encoder output makes prototype construction fail
  const auto config = parse_config(tiny_config(out, "run.ablations = prod\nhp.pca_dim = 64\n"));
  const Report r = run_experiment(config);
  CHECK(r.partial);
  CHECK_FALSE(r.rows[0].runs[0].ok);
  CHECK_FALSE(r.rows[0].runs[0].diagnostic.empty());
}
