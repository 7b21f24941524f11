#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "prodding/harness.hpp"

namespace prodding {

namespace {

nlohmann::json metrics_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"per_class_accuracy", m.per_class_accuracy},
          {"class_recall", m.class_recall},
          {"class_counts", m.class_counts},
          {"n", m.n}};
}

Metrics metrics_from(const nlohmann::json& j) {
  Metrics m;
  m.accuracy = j.at("accuracy").get<double>();
  m.per_class_accuracy = j.at("per_class_accuracy").get<double>();
  m.class_recall = j.at("class_recall").get<std::vector<double>>();
  m.class_counts = j.at("class_counts").get<std::vector<std::size_t>>();
  m.n = j.at("n").get<std::size_t>();
  return m;
}

bool same_metrics(const Metrics& a, const Metrics& b) {
  return a.accuracy == b.accuracy && a.per_class_accuracy == b.per_class_accuracy && a.class_recall == b.class_recall &&
         a.class_counts == b.class_counts && a.n == b.n;
}

nlohmann::json run_json(const SeedRun& r) {
  nlohmann::json j{{"seed", r.seed},
                   {"ok", r.ok},
                   {"diagnostic", r.diagnostic},
                   {"metrics", metrics_json(r.metrics)},
                   {"distill_curve", r.distill_curve},
                   {"finetune_curve", r.finetune_curve},
                   {"distill_loss", r.distill_loss},
                   {"finetune_loss", r.finetune_loss},
                   {"pass_rate", r.pass_rate},
                   {"model_checksum", r.model_checksum}};
  j["distill_accuracy"] = r.distill_accuracy ? nlohmann::json(*r.distill_accuracy) : nlohmann::json(nullptr);
  return j;
}

SeedRun run_from(const nlohmann::json& j) {
  SeedRun r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ok = j.at("ok").get<bool>();
  r.diagnostic = j.at("diagnostic").get<std::string>();
  r.metrics = metrics_from(j.at("metrics"));
  if (!j.at("distill_accuracy").is_null()) r.distill_accuracy = j.at("distill_accuracy").get<double>();
  r.distill_curve = j.at("distill_curve").get<std::vector<double>>();
  r.finetune_curve = j.at("finetune_curve").get<std::vector<double>>();
  r.distill_loss = j.at("distill_loss").get<std::vector<double>>();
  r.finetune_loss = j.at("finetune_loss").get<std::vector<double>>();
  r.pass_rate = j.at("pass_rate").get<std::vector<double>>();
  r.model_checksum = j.at("model_checksum").get<std::string>();
  return r;
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Element-wise mean over the ok runs that have a curve of full length.
std::vector<double> mean_curve(const ReportRow& row, std::vector<double> SeedRun::*member) {
  std::vector<double> sum;
  int count = 0;
  for (const auto& r : row.runs) {
    const auto& c = r.*member;
    if (!r.ok || c.empty()) continue;
    if (sum.empty()) sum.assign(c.size(), 0.0);
    if (c.size() != sum.size()) continue;
    for (std::size_t i = 0; i < c.size(); ++i) sum[i] += c[i];
    ++count;
  }
  for (auto& v : sum) v /= std::max(count, 1);
  return sum;
}

const ReportRow* reference_row(const Report& report) {
  for (const auto& r : report.rows) {
    if (r.name == "prodding") return &r;
  }
  for (auto it = report.rows.rbegin(); it != report.rows.rend(); ++it) {
    for (const auto& run : it->runs) {
      if (!run.distill_curve.empty() || !run.finetune_curve.empty()) return &*it;
    }
  }
  return nullptr;
}

}  // namespace

bool SeedRun::operator==(const SeedRun& o) const {
  return seed == o.seed && ok == o.ok && diagnostic == o.diagnostic && same_metrics(metrics, o.metrics) &&
         distill_accuracy == o.distill_accuracy && distill_curve == o.distill_curve &&
         finetune_curve == o.finetune_curve && distill_loss == o.distill_loss && finetune_loss == o.finetune_loss &&
         pass_rate == o.pass_rate && model_checksum == o.model_checksum;
}

bool ReportRow::operator==(const ReportRow& o) const {
  return name == o.name && runs == o.runs && mean_accuracy == o.mean_accuracy &&
         mean_per_class_accuracy == o.mean_per_class_accuracy;
}

bool Report::operator==(const Report& o) const {
  return name == o.name && config_fingerprint == o.config_fingerprint && seeds == o.seeds && rows == o.rows &&
         partial == o.partial && source_accuracy == o.source_accuracy && target_size == o.target_size &&
         queries_issued == o.queries_issued && source_from_checkpoint == o.source_from_checkpoint &&
         elapsed_seconds == o.elapsed_seconds;
}

const ReportRow& Report::row(std::string_view wanted) const {
  for (const auto& r : rows) {
    if (r.name == wanted) return r;
  }
  throw ConfigError("report has no row '" + std::string(wanted) + "'");
}

void finalize(Report& report) {
  report.partial = false;
  for (auto& row : report.rows) {
    double acc = 0.0;
    double pc = 0.0;
    int ok = 0;
    for (const auto& r : row.runs) {
      if (!r.ok) {
        report.partial = true;
        continue;
      }
      acc += r.metrics.accuracy;
      pc += r.metrics.per_class_accuracy;
      ++ok;
    }
    row.mean_accuracy = ok ? acc / ok : 0.0;
    row.mean_per_class_accuracy = ok ? pc / ok : 0.0;
  }
}

nlohmann::json Report::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : r.runs) runs.push_back(run_json(run));
    rows_json.push_back({{"name", r.name},
                         {"mean_accuracy", r.mean_accuracy},
                         {"mean_per_class_accuracy", r.mean_per_class_accuracy},
                         {"runs", runs}});
  }
  return {{"format", "prodding.report"},
          {"version", 1},
          {"name", name},
          {"config_fingerprint", config_fingerprint},
          {"seeds", seeds},
          {"partial", partial},
          {"source_accuracy", source_accuracy},
          {"target_size", target_size},
          {"rows", rows_json},
          {"queries_issued", queries_issued},
          {"source_from_checkpoint", source_from_checkpoint},
          {"elapsed_seconds", elapsed_seconds}};
}

Report Report::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "prodding.report") throw ConfigError("not a report document");
  if (j.value("version", 0) != 1) throw ConfigError("unsupported report version");
  Report r;
  r.name = j.at("name").get<std::string>();
  r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  r.partial = j.at("partial").get<bool>();
  r.source_accuracy = j.at("source_accuracy").get<double>();
  r.target_size = j.at("target_size").get<std::size_t>();
  r.queries_issued = j.at("queries_issued").get<std::size_t>();
  r.source_from_checkpoint = j.at("source_from_checkpoint").get<bool>();
  r.elapsed_seconds = j.at("elapsed_seconds").get<double>();
  for (const auto& rj : j.at("rows")) {
    ReportRow row;
    row.name = rj.at("name").get<std::string>();
    row.mean_accuracy = rj.at("mean_accuracy").get<double>();
    row.mean_per_class_accuracy = rj.at("mean_per_class_accuracy").get<double>();
    for (const auto& run : rj.at("runs")) row.runs.push_back(run_from(run));
    r.rows.push_back(std::move(row));
  }
  return r;
}

std::string Report::fingerprint() const {
  auto j = to_json();
  j.erase("queries_issued");
  j.erase("source_from_checkpoint");
  j.erase("elapsed_seconds");
  return Fingerprint().add(j.dump()).hex();
}

std::string report_csv(const Report& report) {
  std::ostringstream out;
  out << "row";
  for (const auto s : report.seeds) out << ",seed_" << s;
  out << ",mean\n";
  for (const auto& row : report.rows) {
    out << row.name;
    for (const auto s : report.seeds) {
      out << ',';
      for (const auto& r : row.runs) {
        if (r.seed == s && r.ok) out << fmt(100.0 * r.metrics.accuracy, 4);
      }
    }
    out << ',' << fmt(100.0 * row.mean_accuracy, 4) << '\n';
  }
  return out.str();
}

std::string report_svg(const Report& report, std::string_view metric) {
  const bool accuracy = metric == "accuracy";
  if (!accuracy && metric != "loss") throw ConfigError("plot metric must be accuracy or loss");
  std::vector<double> distill;
  std::vector<double> finetune;
  std::string title = accuracy ? "target accuracy per epoch" : "training loss per epoch";
  if (const auto* row = reference_row(report)) {
    distill = mean_curve(*row, accuracy ? &SeedRun::distill_curve : &SeedRun::distill_loss);
    finetune = mean_curve(*row, accuracy ? &SeedRun::finetune_curve : &SeedRun::finetune_loss);
    title += " (" + row->name + ")";
  }

  constexpr double W = 640, H = 400, L = 60, R = 130, T = 40, B = 50;
  double lo = 0.0, hi = 1.0;
  if (!accuracy) {
    lo = 1e300;
    hi = -1e300;
    for (const auto* c : {&distill, &finetune}) {
      for (const double v : *c) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (lo > hi) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-9) hi = lo + 1.0;
  }
  const double n = std::max<double>(1.0, static_cast<double>(distill.size() + finetune.size()));
  auto x = [&](double epoch) { return L + (W - L - R) * (epoch - 1.0) / std::max(1.0, n - 1.0); };
  auto y = [&](double v) { return T + (H - T - B) * (1.0 - (v - lo) / (hi - lo)); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">epoch</text>\n";
  s << "<text x=\"" << L - 8 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(hi, 2) << "</text>\n";
  s << "<text x=\"" << L - 8 << "\" y=\"" << H - B << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(lo, 2) << "</text>\n";

  struct Series {
    const char* stage;
    const char* color;
    const std::vector<double>* values;
    double offset;
  };
  const Series series[] = {{"distill", "#1f77b4", &distill, 0.0},
                           {"finetune", "#d62728", &finetune, static_cast<double>(distill.size())}};
  double legend_y = T + 10;
  for (const auto& sr : series) {
    s << "<g class=\"series\" data-stage=\"" << sr.stage << "\">\n<polyline fill=\"none\" stroke=\"" << sr.color
      << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < sr.values->size(); ++i) {
      s << fmt(x(sr.offset + static_cast<double>(i) + 1.0), 2) << ',' << fmt(y((*sr.values)[i]), 2) << ' ';
    }
    s << "\"/>\n";
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << legend_y << "\" font-size=\"12\" fill=\"" << sr.color << "\">"
      << sr.stage << "</text>\n</g>\n";
    legend_y += 18;
  }
  s << "</svg>\n";
  return s.str();
}

void emit_report(const Report& report, const std::filesystem::path& dir, const ReportFormats& formats) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto write = [&](const std::string& file, const std::string& content) {
    const auto path = dir / file;
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
    out << content;
    if (!out) throw RuntimeFailure("failed writing '" + path.string() + "'");
  };
  if (formats.csv) write("report.csv", report_csv(report));
  if (formats.json) write("report.json", report.to_json().dump(2) + "\n");
  if (formats.plots) {
    write("convergence.svg", report_svg(report, "accuracy"));
    write("loss.svg", report_svg(report, "loss"));
  }
}

}  // namespace prodding
