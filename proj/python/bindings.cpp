#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "prodding/harness.hpp"

namespace py = pybind11;
using namespace prodding;

namespace {

std::vector<std::string> index_ids(Eigen::Index n) {
  std::vector<std::string> ids;
  for (Eigen::Index i = 0; i < n; ++i) ids.push_back(std::to_string(i));
  return ids;
}

py::tuple loss_tuple(const LossGrad& l) { return py::make_tuple(l.value, l.dlogits); }

py::dict synthetic(int num_classes, int dim, int samples_per_class, double radius, double noise, double rotation_deg,
                   std::uint64_t seed) {
  const auto pair = make_synthetic_shift({num_classes, dim, samples_per_class, radius, noise, rotation_deg, {}, seed});
  const auto& y = pair.target.with_role(DomainRole::Source).training_labels();
  py::dict d;
  d["source_x"] = pair.source.inputs();
  d["source_y"] = pair.source.training_labels();
  d["target_x"] = pair.target.inputs();
  d["target_y_eval"] = y;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Black-box domain adaptation: teacher construction, losses and the experiment harness.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

  m.def("softmax", &softmax_rows, py::arg("logits"));
  m.def("adaptive_label_smooth", py::overload_cast<const ProbMatrix&, int>(&adaptive_label_smooth), py::arg("p"),
        py::arg("r") = 1);
  m.def("conventional_label_smooth", &conventional_label_smooth, py::arg("label"), py::arg("num_classes"),
        py::arg("epsilon") = 0.1);
  m.def("reduce_features", [](const Matrix& f, int pca_dim) { return reduce_features(f, pca_dim); },
        py::arg("features"), py::arg("pca_dim"));
  m.def("compute_prototypes",
        [](const Matrix& f, const ProbMatrix& w) {
          const auto p = compute_prototypes(f, w);
          return py::make_tuple(p.centroids, p.class_mass);
        },
        py::arg("features"), py::arg("weights"), "Returns (centroids, class_mass).");
  m.def("prototype_pseudo_labels",
        [](const Matrix& f, const Matrix& centroids, const Vector& mass, double tau) {
          return prototype_pseudo_labels(f, Prototypes{centroids, mass}, tau);
        },
        py::arg("features"), py::arg("centroids"), py::arg("class_mass"), py::arg("tau") = 0.1);
  m.def("init_teacher",
        [](const ProbMatrix& src, const ProbMatrix& proto, double beta) {
          return init_teacher(index_ids(src.rows()), src, proto, beta).rows();
        },
        py::arg("p_src"), py::arg("p_proto"), py::arg("beta") = 0.5);
  m.def("ema_update",
        [](const ProbMatrix& bank, const ProbMatrix& student, double gamma) {
          const auto ids = index_ids(bank.rows());
          return ema_update(TeacherBank(ids, bank), ids, student, gamma).rows();
        },
        py::arg("bank"), py::arg("student"), py::arg("gamma") = 0.7);

  m.def("skd_loss", [](const ProbMatrix& t, const LogitMatrix& z) { return loss_tuple(skd_loss(t, z)); },
        py::arg("teacher"), py::arg("logits"), "Returns (value, dlogits).");
  m.def("mutual_info", [](const LogitMatrix& z) { return loss_tuple(mutual_info(z)); }, py::arg("logits"),
        "Returns (value, dlogits).");
  m.def("fixmatch_loss",
        [](const LogitMatrix& w, const LogitMatrix& s, double eta) {
          const auto l = fixmatch_loss(w, s, eta);
          return py::make_tuple(l.value, l.dstrong, l.passed);
        },
        py::arg("weak"), py::arg("strong"), py::arg("eta") = 0.95, "Returns (value, dstrong, passed).");
  m.def("adjusted_fixmatch_loss",
        [](const LogitMatrix& w, const LogitMatrix& s, double eta, const Vector& prior, double rho) {
          const auto l = adjusted_fixmatch_loss(w, s, eta, prior, rho);
          return py::make_tuple(l.value, l.dstrong, l.passed);
        },
        py::arg("weak"), py::arg("strong"), py::arg("eta"), py::arg("prior"), py::arg("rho") = 0.5);
  m.def("estimate_prior",
        [](const std::vector<int>& labels, int K, double floor) { return estimate_prior(labels, K, floor); },
        py::arg("labels"), py::arg("num_classes"), py::arg("floor") = 1e-4);
  m.def("lr_at",
        [](double progress, double lr_backbone, double lr_new) {
          OptimConfig o;
          o.lr_backbone = lr_backbone;
          o.lr_new_layers = lr_new;
          const auto lr = lr_at(o, progress);
          return py::make_tuple(lr.backbone, lr.new_layers);
        },
        py::arg("progress"), py::arg("lr_backbone") = 1e-3, py::arg("lr_new_layers") = 1e-2);

  m.def("make_synthetic_shift", &synthetic, py::arg("num_classes") = 4, py::arg("dim") = 2,
        py::arg("samples_per_class") = 300, py::arg("radius") = 3.0, py::arg("noise") = 1.0,
        py::arg("rotation_deg") = 35.0, py::arg("seed") = 7,
        "Dict of numpy arrays; target_y_eval is for scoring only.");

  py::class_<QueryResult>(m, "QueryResult")
      .def_readonly("labels", &QueryResult::labels)
      .def_readonly("confidences", &QueryResult::confidences)
      .def_property_readonly("mode", [](const QueryResult& q) { return q.mode.to_string(); });

  py::class_<Oracle>(m, "Oracle")
      .def_static("load", &Oracle::load, py::arg("checkpoint"))
      .def("query",
           [](const Oracle& o, const Vector& x, const std::string& mode, const std::string& id) {
             return o.query(x, QueryMode::parse(mode), id);
           },
           py::arg("x"), py::arg("mode") = "soft:1", py::arg("id") = "")
      .def_property_readonly("num_classes", &Oracle::num_classes)
      .def_property_readonly("fingerprint", &Oracle::fingerprint)
      .def_property_readonly("queries", [](const Oracle& o) { return o.log().count(); });

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def_readwrite("name", &ExperimentConfig::name)
      .def_readwrite("output_dir", &ExperimentConfig::output_dir)
      .def_readwrite("seeds", &ExperimentConfig::seeds)
      .def_readwrite("ablations", &ExperimentConfig::ablations)
      .def_readwrite("write_plots", &ExperimentConfig::write_plots)
      .def_property_readonly("output_path", &ExperimentConfig::output_path)
      .def("fingerprint", &ExperimentConfig::fingerprint)
      .def("to_text", &ExperimentConfig::to_text)
      .def("validate", &ExperimentConfig::validate);
  m.def("parse_config", &parse_config, py::arg("text"));
  m.def("load_config", &load_config, py::arg("path"));
  m.def("ablation_presets", [] {
    std::vector<std::string> names;
    for (const auto& p : ablation_presets()) names.push_back(p.name);
    return names;
  });

  py::class_<Report>(m, "Report")
      .def_readonly("name", &Report::name)
      .def_readonly("partial", &Report::partial)
      .def_readonly("target_size", &Report::target_size)
      .def_readonly("queries_issued", &Report::queries_issued)
      .def_readonly("source_accuracy", &Report::source_accuracy)
      .def("fingerprint", &Report::fingerprint)
      .def("to_json", [](const Report& r) { return r.to_json().dump(); })
      .def("csv", [](const Report& r) { return report_csv(r); })
      .def("mean_accuracy", [](const Report& r) {
        py::dict d;
        for (const auto& row : r.rows) d[py::str(row.name)] = row.mean_accuracy;
        return d;
      });
  m.def("run_experiment", &run_experiment, py::arg("config"), py::call_guard<py::gil_scoped_release>());
}
