// One PASS/FAIL line per acceptance criterion. Exit status is the number of failures.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include "prodding/harness.hpp"
#include "prodding/source_model.hpp"
#include "support.hpp"

using namespace prodding;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kBruteTol = 1e-8;
constexpr double kClosedTol = 1e-3;
constexpr double kExactTol = 1e-12;  // "exact" up to floating-point rounding
constexpr double kEquivTol = 1e-6;
constexpr double kTrendGap = 0.01;
constexpr double kFinetuneDrop = 0.01;
constexpr double kHardSlack = 0.05;
constexpr double kBudgetSeconds = 600.0;

int failures = 0;

void verdict(int id, bool ok, const std::string& what, const std::string& detail) {
  if (!ok) ++failures;
  std::cout << (ok ? "PASS" : "FAIL") << " C" << id << " " << what << ": " << detail << std::endl;
}

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("prodding-acceptance-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// --- C1 -------------------------------------------------------------------

double frozen_ict(TargetModel& m, const Matrix& x, const Matrix& frozen, const MixSample& mix) {
  const Matrix t = mix_inputs(frozen, mix);
  const Matrix ls = log_softmax_rows(m.forward_train(mix_inputs(x, mix), nullptr, false));
  return -(t.array() * ls.array()).sum() / static_cast<double>(x.rows());
}

void criterion_gradients() {
  std::map<std::string, double> worst{{"Ls", 0}, {"skd", 0}, {"mix", 0}, {"mi", 0}, {"fm", 0}, {"afm", 0}};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TargetModel m = testing::toy_target(seed, 4, 3);
    Rng rng(seed * 7919);
    const Matrix x = testing::random_matrix(8, 4, rng);
    const Matrix strong = testing::random_matrix(8, 4, rng);
    const ProbMatrix t = testing::random_probs(8, 3, rng);
    const std::vector<int> y{0, 1, 2, 0, 1, 2, 1, 0};
    const auto params = m.parameters();
    auto logit_loss = [&](auto loss) {
      return testing::gradient_rel_error(params, [&] {
        TargetTrace tr;
        const LossGrad l = loss(m.forward_train(x, &tr, false));
        m.backward(tr, l.dlogits);
        return l.value;
      });
    };
    worst["Ls"] = std::max(worst["Ls"], logit_loss([&](const Matrix& z) { return label_smoothing_loss(z, y, 0.1); }));
    worst["skd"] = std::max(worst["skd"], logit_loss([&](const Matrix& z) { return skd_loss(t, z); }));
    worst["mi"] = std::max(worst["mi"], logit_loss([&](const Matrix& z) { return mutual_info(z); }));

    const MixSample mix = sample_mix(8, 0.3, rng);
    const Matrix frozen = softmax_rows(m.forward_train(x, nullptr, false));
    worst["mix"] = std::max(worst["mix"], testing::split_gradient_rel_error(
                                              params, [&] { ict_loss(m, x, mix, true); },
                                              [&] { return frozen_ict(m, x, frozen, mix); }));

    Hyperparams hp;
    hp.eta = 0.0;  // all samples pass; pseudo-labels are locally constant
    Vector pi(3);
    pi << 0.5, 0.3, 0.2;
    worst["fm"] = std::max(worst["fm"], testing::gradient_rel_error(params, [&] {
      return ding_objective(m, x, strong, pi, hp, {true, false, false}).total;
    }));
    worst["afm"] = std::max(worst["afm"], testing::gradient_rel_error(params, [&] {
      return ding_objective(m, x, strong, pi, hp, {false, true, false}).total;
    }));
  }
  bool ok = true;
  std::string detail;
  for (const auto& [k, v] : worst) {
    ok = ok && v <= kGradTol;
    detail += k + "=" + num(v, 2) + " ";
  }
  verdict(1, ok, "gradient oracles (5 seeds, K=3, dim=4)", detail + "(tol " + num(kGradTol) + ")");
}

// --- C2 -------------------------------------------------------------------

void criterion_brute_force() {
  Rng rng(2024);
  double adals = 0, protos = 0, labels = 0, init = 0, ema = 0;
  for (int t = 0; t < 200; ++t) {
    const int K = 2 + t % 9;
    const int n = 6 + t % 5;
    const int d = 2 + t % 4;
    const int r = 1 + t % (K - 1);
    const ProbMatrix p = testing::random_probs(n, K, rng);
    const ProbMatrix q = testing::random_probs(n, K, rng);

    const ProbMatrix a = adaptive_label_smooth(p, r);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto ref = testing::ref_adals(testing::row_of(p, i), r);
      for (int k = 0; k < K; ++k) adals = std::max(adals, std::abs(a(i, k) - ref[static_cast<std::size_t>(k)]));
    }

    const Matrix f = testing::random_matrix(n, d, rng);
    const Prototypes pr = compute_prototypes(f, p);
    protos = std::max(protos, testing::max_abs_diff(pr.centroids, testing::ref_prototypes(f, p)));
    labels = std::max(labels, testing::max_abs_diff(prototype_pseudo_labels(f, pr, 0.1),
                                                    testing::ref_proto_labels(f, testing::ref_prototypes(f, p), 0.1)));

    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back(std::to_string(i));
    const double beta = std::uniform_real_distribution<double>(0, 1)(rng);
    const double gamma = std::uniform_real_distribution<double>(0, 1)(rng);
    const auto bank = init_teacher(ids, p, q, beta);
    const auto next = ema_update(bank, ids, q, gamma);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int k = 0; k < K; ++k) {
        const double b = beta * p(i, k) + (1 - beta) * q(i, k);
        init = std::max(init, std::abs(bank.rows()(i, k) - b));
        ema = std::max(ema, std::abs(next.rows()(i, k) - (gamma * b + (1 - gamma) * q(i, k))));
      }
  }
  const double worst = std::max({adals, protos, labels, init, ema});
  verdict(2, worst <= kBruteTol, "pseudo-label brute-force oracles (200 instances, K 2..10)",
          "adals=" + num(adals, 2) + " prototypes=" + num(protos, 2) + " proto_labels=" + num(labels, 2) +
              " init=" + num(init, 2) + " ema=" + num(ema, 2) + " (tol " + num(kBruteTol) + ")");
}

// --- C3 -------------------------------------------------------------------

void criterion_closed_form() {
  RowVector p(4);
  p << 0.4, 0.3, 0.2, 0.1;
  RowVector want(4);
  want << 0.4, 0.2, 0.2, 0.2;
  const double adals = (adaptive_label_smooth(p, 1) - want).cwiseAbs().maxCoeff();

  Matrix z(2, 2);
  z << std::log(0.8), std::log(0.2), std::log(0.2), std::log(0.8);
  const double mi = mutual_info(z).value;

  Matrix b(1, 2), s(1, 2);
  b << 1, 0;
  s << 0, 1;
  const std::vector<std::string> id{"x"};
  const auto e = ema_update(TeacherBank(id, b), id, s, 0.7).rows();

  Matrix w(1, 2), st(1, 2);
  w << 5, 0;
  st << 2, 0;
  Vector pi(2);
  pi << 0.9, 0.1;
  const double afm = adjusted_fixmatch_loss(w, st, 0.95, pi, 0.5).value;

  const bool ok = adals <= kExactTol && std::abs(mi - 0.1927) <= kClosedTol && std::abs(e(0, 0) - 0.7) <= kExactTol &&
                  std::abs(e(0, 1) - 0.3) <= kExactTol && std::abs(afm - 0.0441) <= kClosedTol;
  verdict(3, ok, "closed-form values",
          "adals_err=" + num(adals) + " mi=" + num(mi) + " ema=[" + num(e(0, 0)) + "," + num(e(0, 1)) +
              "] afm=" + num(afm));
}

// --- C4 -------------------------------------------------------------------

void criterion_equivalences() {
  Rng rng(7);
  double uniform_pi = 0, rho_zero = 0, beta_one = 0, gamma_one = 0, eps_zero = 0;
  for (int t = 0; t < 100; ++t) {
    const int K = 2 + t % 9;
    const int n = 4 + t % 6;
    const Matrix weak = testing::random_matrix(n, K, rng, 3.0);
    const Matrix strong = testing::random_matrix(n, K, rng, 2.0);
    const double eta = 0.3 + 0.6 * std::uniform_real_distribution<double>(0, 1)(rng);
    const double fm = fixmatch_loss(weak, strong, eta).value;
    uniform_pi = std::max(
        uniform_pi, std::abs(adjusted_fixmatch_loss(weak, strong, eta, Vector::Constant(K, 1.0 / K), 0.5).value - fm));
    const Vector pi = testing::random_probs(1, K, rng).row(0).transpose();
    rho_zero = std::max(rho_zero, std::abs(adjusted_fixmatch_loss(weak, strong, eta, pi, 0.0).value - fm));

    const ProbMatrix p = testing::random_probs(n, K, rng);
    const ProbMatrix proto = testing::random_probs(n, K, rng);
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back(std::to_string(i));
    const ProbMatrix smoothed = adaptive_label_smooth(p, 1);
    const auto bank = init_teacher(ids, smoothed, proto, 1.0);
    beta_one = std::max(beta_one, testing::max_abs_diff(bank.rows(), smoothed));
    gamma_one = std::max(gamma_one, testing::max_abs_diff(ema_update(bank, ids, proto, 1.0).rows(), bank.rows()));

    std::vector<int> y;
    for (int i = 0; i < n; ++i) y.push_back(i % K);
    const double ls = label_smoothing_loss(strong, y, 0.0).value;
    double ce = 0.0;
    for (int i = 0; i < n; ++i)
      ce -= std::log(testing::ref_softmax(testing::row_of(strong, i))[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])]);
    eps_zero = std::max(eps_zero, std::abs(ls - ce / n));
  }
  const double worst = std::max({uniform_pi, rho_zero, beta_one, gamma_one, eps_zero});
  verdict(4, worst <= kEquivTol, "equivalence invariants (100 instances each)",
          "uniform_pi=" + num(uniform_pi, 2) + " rho0=" + num(rho_zero, 2) + " beta1=" + num(beta_one, 2) +
              " gamma1=" + num(gamma_one, 2) + " eps0=" + num(eps_zero, 2) + " (tol " + num(kEquivTol) + ")");
}

// --- C5, C6 ---------------------------------------------------------------

ExperimentConfig benchmark(const std::string& file, const fs::path& out) {
  auto c = load_config(fs::path(PRODDING_CONFIG_DIR) / file);
  c.output_dir = out.string();
  c.write_plots = false;
  return c;
}

std::string pct(double v) { return num(100.0 * v, 4); }

Report soft_report;

void criterion_trend() {
  const auto started = std::chrono::steady_clock::now();
  const auto config = benchmark("benchmark.conf", scratch("trend"));
  soft_report = run_experiment(config);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  const double none = soft_report.row("no_adapt").mean_accuracy;
  const double skd = soft_report.row("skd").mean_accuracy;
  const double prod = soft_report.row("prod").mean_accuracy;
  const double full = soft_report.row("prodding").mean_accuracy;
  double worst_drop = 0.0;
  for (const auto& run : soft_report.row("prodding").runs) {
    if (run.ok && run.distill_accuracy) worst_drop = std::max(worst_drop, *run.distill_accuracy - run.metrics.accuracy);
  }
  const bool ok = !soft_report.partial && skd - none >= kTrendGap && prod - skd >= kTrendGap &&
                  full - prod >= kTrendGap && worst_drop <= kFinetuneDrop && seconds <= kBudgetSeconds;
  verdict(5, ok, "trend no_adapt < skd < prod < prodding (gaps >= 1 point)",
          "means " + pct(none) + " / " + pct(skd) + " / " + pct(prod) + " / " + pct(full) + ", gaps " +
              pct(skd - none) + " / " + pct(prod - skd) + " / " + pct(full - prod) + ", worst finetune drop " +
              pct(worst_drop) + ", " + num(seconds, 3) + " s");
}

void criterion_hard() {
  const auto config = benchmark("benchmark_hard.conf", scratch("hard"));
  const Report hard = run_experiment(config);
  const double soft_acc = soft_report.row("prodding").mean_accuracy;
  const double hard_acc = hard.row("prodding").mean_accuracy;
  const bool ok = !hard.partial && std::abs(hard_acc - soft_acc) <= kHardSlack;
  verdict(6, ok, "hard-label pipeline within 5 points of soft r=1",
          "hard " + pct(hard_acc) + " soft " + pct(soft_acc) + (hard.partial ? " (partial)" : ""));
}

// --- C7 -------------------------------------------------------------------

bool allowed_to_see_source(const fs::path& p) {
  const auto name = p.filename().string();
  return name == "source_model.hpp" || name == "source_model.cpp" || name == "oracle.cpp" || name == "oracle.hpp";
}

void criterion_containment() {
  std::vector<std::string> leaks;
  for (const char* sub : {"src", "include", "tools", "python"}) {
    const fs::path root = fs::path(PRODDING_SOURCE_DIR) / sub;
    if (!fs::exists(root)) continue;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (!entry.is_regular_file()) continue;
      const auto ext = entry.path().extension().string();
      if (ext != ".cpp" && ext != ".hpp" && ext != ".h" && ext != ".py") continue;
      if (allowed_to_see_source(entry.path())) continue;
      std::ifstream in(entry.path());
      std::stringstream ss;
      ss << in.rdbuf();
      const auto text = ss.str();
      if (text.find("source_model.hpp") != std::string::npos || text.find("SourceModel") != std::string::npos ||
          text.find("load_source_checkpoint") != std::string::npos) {
        leaks.push_back(fs::relative(entry.path(), PRODDING_SOURCE_DIR).string());
      }
    }
  }
  // The oracle's public class exposes answers only.
  std::ifstream header(fs::path(PRODDING_SOURCE_DIR) / "include/prodding/oracle.hpp");
  std::stringstream hs;
  hs << header.rdbuf();
  const auto h = hs.str();
  const auto begin = h.find("class Oracle final");
  const auto end = h.find("};", begin);
  const auto body = h.substr(begin, end - begin);
  for (const char* banned : {"ProbMatrix", "LogitMatrix", "Parameter", "tensors", "forward", "Impl&"}) {
    if (body.find(banned) != std::string::npos) leaks.push_back(std::string("Oracle exposes ") + banned);
  }

  // Answers never carry the full distribution.
  const int K = 4;
  const auto pair = make_synthetic_shift({K, 2, 30, 3.0, 1.0, 35.0, {}, 7});
  ProvisionOptions opts;
  opts.epochs = 3;
  const Oracle oracle = Oracle::provision(pair.source, opts);
  bool truncated = true;
  for (int r = 1; r < K; ++r) {
    const auto a = oracle.query(pair.target[0].input, QueryMode::soft(r));
    truncated = truncated && a.confidences.size() <= static_cast<std::size_t>(K - 1);
  }
  bool rejects_full = false;
  try {
    oracle.query(pair.target[0].input, QueryMode::soft(K));
  } catch (const ConfigError&) {
    rejects_full = true;
  }
  const Oracle fresh = Oracle::provision(pair.source, opts);
  const auto table = query_dataset(fresh, pair.target.without_labels(), QueryMode::soft(1));
  const std::size_t issued = fresh.log().count();

  const bool one_shot = soft_report.queries_issued == soft_report.target_size && issued == pair.target.size() &&
                        table.size() == pair.target.size() && fresh.log().max_per_id() == 1;
  const bool ok = leaks.empty() && truncated && rejects_full && one_shot;
  std::string detail = "scan " + std::string(leaks.empty() ? "clean" : "found:");
  for (const auto& l : leaks) detail += " " + l;
  detail += ", confidences <= K-1 " + std::string(truncated ? "yes" : "no") + ", r=K refused " +
            (rejects_full ? "yes" : "no") + ", benchmark queries " + std::to_string(soft_report.queries_issued) + "/" +
            std::to_string(soft_report.target_size) + ", fresh run " + std::to_string(issued) + "/" +
            std::to_string(pair.target.size());
  verdict(7, ok, "black-box containment and one-shot querying", detail);
}

// --- C8 -------------------------------------------------------------------

struct CliRun {
  int status = -1;
  std::string fingerprint;
  std::vector<std::string> checksums;
};

CliRun run_cli(const fs::path& root) {
  CliRun out;
  const auto log = root / "stdout.txt";
  const std::string cmd = "PRODDING_OUTPUT_ROOT='" + root.string() + "' '" + std::string(PRODDING_CLI) +
                          "' run --config '" + std::string(PRODDING_CONFIG_DIR) + "/quick.conf' > '" + log.string() +
                          "' 2>&1";
  out.status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::string line;
  const std::regex fp("report fingerprint ([0-9a-f]+)");
  std::smatch m;
  while (std::getline(in, line)) {
    if (std::regex_search(line, m, fp)) out.fingerprint = m[1];
  }
  std::ifstream rj(root / "runs/quick/report.json");
  if (rj) {
    const auto j = nlohmann::json::parse(rj);
    for (const auto& row : j.at("rows"))
      for (const auto& run : row.at("runs")) out.checksums.push_back(run.at("model_checksum").get<std::string>());
  }
  return out;
}

void criterion_determinism() {
  const auto a = run_cli(scratch("cli-a"));
  const auto b = run_cli(scratch("cli-b"));
  const bool ok = a.status == 0 && b.status == 0 && !a.fingerprint.empty() && a.fingerprint == b.fingerprint &&
                  !a.checksums.empty() && a.checksums == b.checksums;
  verdict(8, ok, "two CLI runs give identical reports and checksums",
          "fingerprints " + a.fingerprint + " / " + b.fingerprint + ", " + std::to_string(a.checksums.size()) +
              " checksums " + (a.checksums == b.checksums ? "equal" : "differ"));
}

}  // namespace

int main() {
  criterion_gradients();
  criterion_brute_force();
  criterion_closed_form();
  criterion_equivalences();
  criterion_trend();
  criterion_hard();
  criterion_containment();
  criterion_determinism();
  std::cout << (8 - failures) << "/8 criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
