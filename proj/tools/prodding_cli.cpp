#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "prodding/harness.hpp"
#include "prodding/oracle_server.hpp"

using namespace prodding;

namespace {

Oracle provision_oracle(const ExperimentConfig& config, const LoadedData& data, ProvisionReport* report = nullptr) {
  ProvisionOptions p;
  p.epsilon = config.source_epsilon;
  p.epochs = config.source_epochs;
  p.seed = config.source_seed;
  p.encoder = config.encoder_spec();
  p.optim = config.optim;
  std::filesystem::create_directories(config.output_path());
  return Oracle::provision(data.source, p, config.output_path() / "source.ckpt.json", nullptr, report);
}

QueryTable answers_for(const ExperimentConfig& config, const LoadedData& data, const std::string& remote) {
  const auto unlabeled = data.target.without_labels();
  const auto cache = config.output_path() / "cache";
  if (!remote.empty()) {
    const auto colon = remote.rfind(':');
    if (colon == std::string::npos) throw ConfigError("--remote expects host:port");
    RemoteOracle oracle(remote.substr(0, colon), std::stoi(remote.substr(colon + 1)));
    auto table = query_dataset(oracle, unlabeled, config.oracle_mode, cache);
    std::cerr << "queries issued: " << oracle.log().count() << "\n";
    return table;
  }
  const Oracle oracle = provision_oracle(config, data);
  auto table = query_dataset(oracle, unlabeled, config.oracle_mode, cache);
  std::cerr << "queries issued: " << oracle.log().count() << "\n";
  return table;
}

void print_metrics(const Metrics& m) {
  std::cout << "accuracy " << m.accuracy << "\nper_class_accuracy " << m.per_class_accuracy << "\n";
  for (std::size_t k = 0; k < m.class_recall.size(); ++k) {
    std::cout << "class " << k << " recall " << m.class_recall[k] << " (n=" << m.class_counts[k] << ")\n";
  }
}

OracleServer* active_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Black-box domain adaptation: distillation from a query-only source model, then debiased finetuning."};
  app.require_subcommand(1);

  std::string config_path;
  std::string checkpoint;
  std::string mode = "soft:1";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string remote;
  std::optional<std::uint64_t> seed;
  std::string out_path;
  std::string init_checkpoint;
  std::string input;

  auto* train = app.add_subcommand("train-source", "train (or reload) the source model behind the oracle");
  train->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);

  auto* serve = app.add_subcommand("serve-oracle", "answer queries over HTTP");
  serve->add_option("--checkpoint", checkpoint, "source checkpoint")->required()->check(CLI::ExistingFile);
  serve->add_option("--mode", mode, "most informative answer served: hard or soft:<r>");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port");

  auto* query = app.add_subcommand("query", "query the target set once and cache the answers");
  query->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
  query->add_option("--remote", remote, "host:port of a running oracle server");

  auto* distill = app.add_subcommand("distill", "stage one on the first configured row");
  distill->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
  distill->add_option("--seed", seed, "adaptation seed (default: first configured seed)");
  distill->add_option("--out", out_path, "checkpoint to write");
  distill->add_option("--remote", remote, "host:port of a running oracle server");

  auto* finetune = app.add_subcommand("finetune", "stage two from a distilled checkpoint");
  finetune->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
  finetune->add_option("--init-checkpoint", init_checkpoint, "distilled checkpoint")->required()->check(CLI::ExistingFile);
  finetune->add_option("--seed", seed, "adaptation seed (default: first configured seed)");
  finetune->add_option("--out", out_path, "checkpoint to write");

  auto* run = app.add_subcommand("run", "full pipeline over all rows and seeds");
  run->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate a target checkpoint on the target set");
  eval->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint, "target checkpoint")->required()->check(CLI::ExistingFile);

  auto* report = app.add_subcommand("report", "re-emit CSV and plots from a report.json");
  report->add_option("--input", input, "report.json")->required()->check(CLI::ExistingFile);
  report->add_option("--out", out_path, "output directory (default: next to the input)");

  auto* keys = app.add_subcommand("keys", "list config keys");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*keys) {
      for (const auto& k : config_keys()) std::cout << k.key << "\t" << k.doc << "\n";
      return 0;
    }
    if (*serve) {
      const Oracle oracle = Oracle::load(checkpoint);
      OracleServer server(oracle, QueryMode::parse(mode), host, port);
      active_server = &server;
      std::signal(SIGINT, [](int) {
        if (active_server) active_server->stop();
      });
      std::cerr << "serving " << oracle.fingerprint() << " (" << mode << ") on " << host << ":" << port << "\n";
      server.serve_forever();
      return 0;
    }
    if (*report) {
      std::ifstream in(input);
      const auto rep = Report::from_json(nlohmann::json::parse(in));
      const std::filesystem::path dir = out_path.empty() ? std::filesystem::path(input).parent_path() : std::filesystem::path(out_path);
      emit_report(rep, dir.empty() ? std::filesystem::path(".") : dir);
      std::cout << report_csv(rep);
      return 0;
    }

    const auto config = load_config(config_path);
    if (*run) {
      const auto rep = run_experiment(config);
      std::cout << report_csv(rep);
      std::cout << "report fingerprint " << rep.fingerprint() << "\n";
      std::cout << "queries issued " << rep.queries_issued << " (target size " << rep.target_size << ")\n";
      std::cout << "artifacts " << config.output_path().string() << "\n";
      return rep.partial ? 2 : 0;
    }

    const auto data = load_data(config);
    const std::uint64_t s = seed.value_or(config.seeds.front());
    if (*train) {
      ProvisionReport pr;
      const Oracle oracle = provision_oracle(config, data, &pr);
      std::cout << "source checkpoint " << (config.output_path() / "source.ckpt.json").string() << "\n"
                << "best epoch " << pr.best_epoch << " accuracy " << pr.best_accuracy
                << (pr.loaded_from_checkpoint ? " (reloaded)" : "") << "\n"
                << "oracle fingerprint " << oracle.fingerprint() << "\n";
      return 0;
    }
    if (*query) {
      const auto table = answers_for(config, data, remote);
      std::cout << "answers " << table.size() << " in mode " << config.oracle_mode.to_string() << "\n";
      return 0;
    }
    if (*eval) {
      print_metrics(evaluate(load_target_checkpoint(checkpoint), data.target));
      return 0;
    }

    const auto row = config.rows().front();
    const auto dir = config.output_path() / row.name / ("seed-" + std::to_string(s));
    std::filesystem::create_directories(dir);
    if (*distill) {
      const auto table = answers_for(config, data, remote);
      DistillOptions opts;
      opts.flags = row.distill;
      opts.seed = derive_seed(s, "distill");
      std::ofstream log(dir / "distill-metrics.jsonl");
      opts.metrics_log = &log;
      opts.bank_dir = dir / "banks";
      auto model = make_target_model(config.encoder_spec(static_cast<int>(data.target.input_dim())), config.bottleneck_dim, data.target.num_classes(),
                                     derive_seed(s, "target/init"));
      auto result = run_distillation(std::move(model), data.target.without_labels(), table, config.hp, config.optim, opts);
      const std::filesystem::path target = out_path.empty() ? dir / "distilled.ckpt.json" : std::filesystem::path(out_path);
      save_checkpoint(result.model, {s, config.hp.epochs}, target);
      std::cout << "checkpoint " << target.string() << "\n";
      print_metrics(evaluate(result.model, data.target));
      return 0;
    }
    if (*finetune) {
      FinetuneOptions opts;
      opts.flags = row.finetune;
      opts.weak = config.weak_policy();
      opts.strong = config.strong_policy();
      opts.seed = derive_seed(s, "finetune");
      std::ofstream log(dir / "finetune-metrics.jsonl");
      opts.metrics_log = &log;
      auto result = run_finetune(load_target_checkpoint(init_checkpoint), data.target.without_labels(), config.hp,
                                 config.optim, opts);
      const std::filesystem::path target = out_path.empty() ? dir / "final.ckpt.json" : std::filesystem::path(out_path);
      save_checkpoint(result.model, {s, config.hp.epochs}, target);
      std::cout << "checkpoint " << target.string() << "\n";
      print_metrics(evaluate(result.model, data.target));
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
