#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "prodding/harness.hpp"

namespace prodding {

namespace {

AblationPreset preset(std::string name, bool skd, bool mix, bool mi, bool proto, bool fm, bool afm, bool mi_ft) {
  return {std::move(name), {skd, mix, mi, proto}, {fm, afm, mi_ft}};
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

struct KeyDef {
  std::string key;
  std::string doc;
  bool semantic = true;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Member>
KeyDef double_key(std::string key, std::string doc, Member member) {
  return {key, std::move(doc), true,
          [member, key](ExperimentConfig& c, const std::string& v) { member(c) = to_double(key, v); },
          [member](const ExperimentConfig& c) { return format_double(member(c)); }};
}

template <class Member>
KeyDef int_key(std::string key, std::string doc, Member member) {
  return {key, std::move(doc), true,
          [member, key](ExperimentConfig& c, const std::string& v) {
            member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(to_int(key, v));
          },
          [member](const ExperimentConfig& c) { return std::to_string(member(c)); }};
}

template <class Member>
KeyDef u64_key(std::string key, std::string doc, Member member) {
  return {key, std::move(doc), true,
          [member, key](ExperimentConfig& c, const std::string& v) { member(c) = to_u64(key, v); },
          [member](const ExperimentConfig& c) { return std::to_string(member(c)); }};
}

template <class Member>
KeyDef bool_key(std::string key, std::string doc, Member member, bool semantic = true) {
  return {key, std::move(doc), semantic,
          [member, key](ExperimentConfig& c, const std::string& v) { member(c) = to_bool(key, v); },
          [member](const ExperimentConfig& c) {
            return std::string(member(c) ? "true" : "false");
          }};
}

template <class Member>
KeyDef string_key(std::string key, std::string doc, Member member, bool semantic = true) {
  return {key, std::move(doc), semantic,
          [member](ExperimentConfig& c, const std::string& v) { member(c) = v; },
          [member](const ExperimentConfig& c) { return member(c); }};
}

const std::vector<KeyDef>& key_table() {
  using C = ExperimentConfig;
  static const std::vector<KeyDef> table = {
      string_key("name", "experiment name; also the artifact subdirectory", [](auto& c) -> auto& { return c.name; }),
      string_key("dataset.kind", "synthetic or image_list", [](auto& c) -> auto& { return c.dataset.kind; }),
      int_key("synthetic.num_classes", "classes K", [](auto& c) -> auto& { return c.dataset.synthetic.num_classes; }),
      int_key("synthetic.dim", "input dimension", [](auto& c) -> auto& { return c.dataset.synthetic.dim; }),
      int_key("synthetic.samples_per_class", "examples per class in each domain",
              [](auto& c) -> auto& { return c.dataset.synthetic.samples_per_class; }),
      double_key("synthetic.radius", "radius of the circle holding class means",
                 [](auto& c) -> auto& { return c.dataset.synthetic.radius; }),
      double_key("synthetic.noise", "per-coordinate std of each blob",
                 [](auto& c) -> auto& { return c.dataset.synthetic.noise_scale; }),
      double_key("synthetic.rotation_deg", "rotation of the target domain",
                 [](auto& c) -> auto& { return c.dataset.synthetic.rotation_deg; }),
      KeyDef{"synthetic.translation", "comma-separated target translation (empty for none)", true,
             [](C& c, const std::string& v) {
               c.dataset.synthetic.translation.clear();
               for (const auto& item : split_list(v)) {
                 c.dataset.synthetic.translation.push_back(to_double("synthetic.translation", item));
               }
             },
             [](const C& c) {
               std::string out;
               for (std::size_t i = 0; i < c.dataset.synthetic.translation.size(); ++i) {
                 if (i) out += ", ";
                 out += format_double(c.dataset.synthetic.translation[i]);
               }
               return out;
             }},
      u64_key("synthetic.seed", "data generation seed", [](auto& c) -> auto& { return c.dataset.synthetic.seed; }),
      string_key("dataset.source_list", "image_list: source list file", [](auto& c) -> auto& { return c.dataset.source_list; }),
      string_key("dataset.target_list", "image_list: target list file", [](auto& c) -> auto& { return c.dataset.target_list; }),
      string_key("dataset.root", "image_list: root directory for list entries", [](auto& c) -> auto& { return c.dataset.root; }),
      int_key("dataset.num_classes", "image_list: classes K", [](auto& c) -> auto& { return c.dataset.num_classes; }),
      string_key("dataset.label_shift", "none, rsut or partial", [](auto& c) -> auto& { return c.dataset.label_shift; }),
      double_key("dataset.shift_decay", "rsut count ratio between consecutive classes",
                 [](auto& c) -> auto& { return c.dataset.shift_decay; }),
      double_key("dataset.partial_fraction", "partial: fraction of classes kept in the target",
                 [](auto& c) -> auto& { return c.dataset.partial_fraction; }),
      KeyDef{"oracle.mode", "hard or soft:<r>", true,
             [](C& c, const std::string& v) { c.oracle_mode = QueryMode::parse(v); },
             [](const C& c) { return c.oracle_mode.to_string(); }},
      double_key("source.epsilon", "label smoothing of the source model", [](auto& c) -> auto& { return c.source_epsilon; }),
      int_key("source.epochs", "source training epochs", [](auto& c) -> auto& { return c.source_epochs; }),
      u64_key("source.seed", "source training seed", [](auto& c) -> auto& { return c.source_seed; }),
      int_key("model.encoder_hidden", "hidden width of the MLP encoder", [](auto& c) -> auto& { return c.encoder_hidden; }),
      int_key("model.bottleneck_dim", "target bottleneck width", [](auto& c) -> auto& { return c.bottleneck_dim; }),
      double_key("hp.beta", "teacher init weight of the source branch", [](auto& c) -> auto& { return c.hp.beta; }),
      double_key("hp.tau", "prototype softmax temperature", [](auto& c) -> auto& { return c.hp.tau; }),
      double_key("hp.gamma", "teacher EMA momentum", [](auto& c) -> auto& { return c.hp.gamma; }),
      double_key("hp.alpha", "MixUp Beta parameter", [](auto& c) -> auto& { return c.hp.alpha; }),
      double_key("hp.eta", "confidence threshold", [](auto& c) -> auto& { return c.hp.eta; }),
      double_key("hp.rho", "logit adjustment strength", [](auto& c) -> auto& { return c.hp.rho; }),
      double_key("hp.epsilon", "label smoothing of hard oracle answers", [](auto& c) -> auto& { return c.hp.epsilon; }),
      int_key("hp.epochs", "epochs per adaptation stage", [](auto& c) -> auto& { return c.hp.epochs; }),
      int_key("hp.pca_dim", "prototype PCA dimension; 0 for automatic", [](auto& c) -> auto& { return c.hp.pca_dim; }),
      double_key("hp.prior_floor", "floor on the estimated class prior", [](auto& c) -> auto& { return c.hp.prior_floor; }),
      double_key("optim.lr_backbone", "encoder learning rate", [](auto& c) -> auto& { return c.optim.lr_backbone; }),
      double_key("optim.lr_new_layers", "bottleneck and classifier learning rate",
                 [](auto& c) -> auto& { return c.optim.lr_new_layers; }),
      double_key("optim.momentum", "SGD momentum", [](auto& c) -> auto& { return c.optim.momentum; }),
      double_key("optim.weight_decay", "SGD weight decay", [](auto& c) -> auto& { return c.optim.weight_decay; }),
      int_key("optim.batch_size", "mini-batch size", [](auto& c) -> auto& { return c.optim.batch_size; }),
      double_key("aug.weak_noise", "weak view jitter std", [](auto& c) -> auto& { return c.weak_noise; }),
      double_key("aug.strong_multiplier", "strong view jitter as a multiple of the weak one",
                 [](auto& c) -> auto& { return c.strong_multiplier; }),
      double_key("aug.mask_fraction", "fraction of coordinates zeroed in the strong view",
                 [](auto& c) -> auto& { return c.mask_fraction; }),
      KeyDef{"run.seeds", "comma-separated adaptation seeds", true,
             [](C& c, const std::string& v) {
               c.seeds.clear();
               for (const auto& item : split_list(v)) c.seeds.push_back(to_u64("run.seeds", item));
             },
             [](const C& c) {
               std::string out;
               for (std::size_t i = 0; i < c.seeds.size(); ++i) out += (i ? ", " : "") + std::to_string(c.seeds[i]);
               return out;
             }},
      KeyDef{"run.ablations", "comma-separated preset names; custom uses the flags.* keys", true,
             [](C& c, const std::string& v) { c.ablations = split_list(v); },
             [](const C& c) {
               std::string out;
               for (std::size_t i = 0; i < c.ablations.size(); ++i) out += (i ? ", " : "") + c.ablations[i];
               return out;
             }},
      bool_key("flags.skd", "custom row: distillation term", [](auto& c) -> auto& { return c.custom.distill.skd; }),
      bool_key("flags.mix", "custom row: interpolation consistency", [](auto& c) -> auto& { return c.custom.distill.mix; }),
      bool_key("flags.mi_distill", "custom row: MI in stage one", [](auto& c) -> auto& { return c.custom.distill.mi; }),
      bool_key("flags.proto", "custom row: prototype teacher init", [](auto& c) -> auto& { return c.custom.distill.proto; }),
      bool_key("flags.fm", "custom row: plain consistency", [](auto& c) -> auto& { return c.custom.finetune.fm; }),
      bool_key("flags.afm", "custom row: prior-adjusted consistency", [](auto& c) -> auto& { return c.custom.finetune.afm; }),
      bool_key("flags.mi_finetune", "custom row: MI in stage two", [](auto& c) -> auto& { return c.custom.finetune.mi; }),
      string_key("output.dir", "artifact root; relative paths resolve against $PRODDING_OUTPUT_ROOT",
                 [](auto& c) -> auto& { return c.output_dir; }, false),
      bool_key("output.write_banks", "write teacher bank snapshots", [](auto& c) -> auto& { return c.write_banks; }, false),
      bool_key("output.plots", "write SVG plots", [](auto& c) -> auto& { return c.write_plots; }, false),
  };
  return table;
}

}  // namespace

const std::vector<AblationPreset>& ablation_presets() {
  static const std::vector<AblationPreset> presets = {
      preset("no_adapt", false, false, false, false, false, false, false),
      preset("skd", true, false, false, false, false, false, false),
      preset("skd_mix", true, true, false, false, false, false, false),
      preset("skd_mi", true, false, true, false, false, false, false),
      preset("skd_mix_mi", true, true, true, false, false, false, false),
      preset("prod", true, true, true, true, false, false, false),
      preset("prod_fm", true, true, true, true, true, false, false),
      preset("prod_afm", true, true, true, true, false, true, false),
      preset("prod_mi", true, true, true, true, false, false, true),
      preset("prod_fm_mi", true, true, true, true, true, false, true),
      preset("prodding", true, true, true, true, false, true, true),
  };
  return presets;
}

AblationPreset find_preset(std::string_view name) {
  for (const auto& p : ablation_presets()) {
    if (p.name == name) return p;
  }
  std::string known;
  for (const auto& p : ablation_presets()) known += " " + p.name;
  throw ConfigError("unknown ablation '" + std::string(name) + "'; known:" + known + " custom");
}

void ExperimentConfig::validate() const {
  if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("name must be a non-empty path component");
  if (dataset.kind == "synthetic") {
    dataset.synthetic.validate();
  } else if (dataset.kind == "image_list") {
    if (dataset.source_list.empty() || dataset.target_list.empty()) {
      throw ConfigError("image_list datasets need dataset.source_list and dataset.target_list");
    }
    if (dataset.num_classes < 2) throw ConfigError("dataset.num_classes must be at least 2");
  } else {
    throw ConfigError("dataset.kind must be synthetic or image_list, got '" + dataset.kind + "'");
  }
  if (dataset.label_shift != "none" && dataset.label_shift != "rsut" && dataset.label_shift != "partial") {
    throw ConfigError("dataset.label_shift must be none, rsut or partial");
  }
  if (!(dataset.shift_decay > 0.0 && dataset.shift_decay <= 1.0)) throw ConfigError("dataset.shift_decay must be in (0, 1]");
  if (!(dataset.partial_fraction > 0.0 && dataset.partial_fraction <= 1.0)) {
    throw ConfigError("dataset.partial_fraction must be in (0, 1]");
  }
  const int K = dataset.kind == "synthetic" ? dataset.synthetic.num_classes : dataset.num_classes;
  oracle_mode.validate(K);
  if (!(source_epsilon >= 0.0 && source_epsilon < 1.0)) throw ConfigError("source.epsilon must be in [0, 1)");
  if (source_epochs < 1) throw ConfigError("source.epochs must be positive");
  if (encoder_hidden < 1 || bottleneck_dim < 1) throw ConfigError("layer widths must be positive");
  hp.validate();
  optim.validate();
  if (weak_noise < 0.0 || strong_multiplier < 0.0) throw ConfigError("augmentation strengths must be non-negative");
  if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) throw ConfigError("aug.mask_fraction must be in [0, 1)");
  if (seeds.empty()) throw ConfigError("run.seeds needs at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("run.seeds contains duplicates");
  }
  if (ablations.empty()) throw ConfigError("run.ablations needs at least one row");
  std::set<std::string> seen;
  for (const auto& a : ablations) {
    if (!seen.insert(a).second) throw ConfigError("run.ablations lists '" + a + "' twice");
    if (a != "custom") find_preset(a);
  }
  if (seen.contains("custom") && custom.finetune.fm && custom.finetune.afm) {
    throw ConfigError("flags.fm and flags.afm are mutually exclusive");
  }
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& k : key_table()) out += k.key + " = " + k.get(*this) + "\n";
  return out;
}

std::string ExperimentConfig::fingerprint() const {
  Fingerprint fp;
  for (const auto& k : key_table()) {
    if (k.semantic) fp.add(k.key + "=" + k.get(*this) + "\n");
  }
  return fp.hex();
}

nlohmann::json ExperimentConfig::encoder_spec(int input_dim) const {
  nlohmann::json spec{{"type", "mlp"}, {"hidden", encoder_hidden}};
  if (input_dim > 0) spec["input_dim"] = input_dim;
  return spec;
}

AugmentationPolicy ExperimentConfig::weak_policy() const {
  AugmentationPolicy p;
  p.kind = AugmentKind::Weak;
  p.noise_scale = weak_noise;
  p.strong_multiplier = strong_multiplier;
  p.mask_fraction = mask_fraction;
  return p;
}

AugmentationPolicy ExperimentConfig::strong_policy() const {
  auto p = weak_policy();
  p.kind = AugmentKind::Strong;
  return p;
}

std::vector<AblationPreset> ExperimentConfig::rows() const {
  std::vector<AblationPreset> out;
  for (const auto& a : ablations) out.push_back(a == "custom" ? custom : find_preset(a));
  for (auto& r : out) {
    if (r.name == "custom") r.name = name;
  }
  return out;
}

std::filesystem::path ExperimentConfig::output_path() const {
  std::filesystem::path dir(output_dir);
  if (dir.is_relative()) {
    if (const char* root = std::getenv("PRODDING_OUTPUT_ROOT"); root && *root) dir = std::filesystem::path(root) / dir;
  }
  return dir / name;
}

ExperimentConfig parse_config(std::string_view text) {
  std::map<std::string, const KeyDef*> index;
  for (const auto& k : key_table()) index[k.key] = &k;

  ExperimentConfig config;
  std::set<std::string> assigned;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(std::string_view(body).substr(0, eq));
    const auto value = trim(std::string_view(body).substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (!assigned.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    it->second->set(config, value);
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<ConfigKeyDoc> config_keys() {
  std::vector<ConfigKeyDoc> out;
  for (const auto& k : key_table()) out.push_back({k.key, k.doc});
  return out;
}

}  // namespace prodding
