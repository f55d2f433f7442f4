#include "cli.hpp"

#include "gcnuq/applications.hpp"
#include "gcnuq/oracle.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gcnuq::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  unsigned threads = default_workers();
  bool timing = false;
  bool verbose = false;
};

// A graph file, or an SBM synthesized from these settings. A positive
// n_train re-splits the nodes with the global seed.
struct DatasetOptions {
  std::string graph;
  Index blocks = 3;
  Index per_block = 20;
  double p_in = 0.3;
  double p_out = 0.02;
  Index feature_dim = 8;
  double noise = 1.0;
  Index n_train = 0;
  Index n_val = 0;
  Index n_test = 0;
};

struct ModelOptions {
  int epochs = 100;
  double lr = 0.01;
  std::vector<Index> hidden{16};
  std::string params;  // checkpoint to load instead of training
};

struct InfluenceOptions {
  Index t = 0;  // 0: min(16, |V_train|)
  Index m = 100;
  double lambda = 0.01;
  double scale = 0.0;  // 0: 1 / ⌈‖H + λI‖⌉
  double early_stop = 0.0;
  double alpha = 0.025;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Global seed");
  app->add_option("--out-dir", c.out_dir, "Output directory");
  app->add_option("--threads", c.threads, "Worker threads for the LOO sweeps")->check(CLI::PositiveNumber);
  app->add_flag("--timing", c.timing, "Record wall-clock times in metrics files");
  app->add_flag("--verbose", c.verbose, "Log resolved settings");
}

void add_dataset(CLI::App* app, DatasetOptions& d) {
  app->add_option("--graph", d.graph, "Graph JSON file; omit to synthesize an SBM");
  app->add_option("--blocks", d.blocks, "SBM blocks")->check(CLI::PositiveNumber);
  app->add_option("--per-block", d.per_block, "SBM nodes per block")->check(CLI::PositiveNumber);
  app->add_option("--p-in", d.p_in, "SBM within-block edge probability")->check(CLI::Range(0.0, 1.0));
  app->add_option("--p-out", d.p_out, "SBM between-block edge probability")->check(CLI::Range(0.0, 1.0));
  app->add_option("--feature-dim", d.feature_dim, "SBM feature dimension")->check(CLI::PositiveNumber);
  app->add_option("--noise", d.noise, "SBM feature noise std")->check(CLI::NonNegativeNumber);
  app->add_option("--train", d.n_train, "Re-split: training nodes (0 keeps the file's masks)");
  app->add_option("--val", d.n_val, "Re-split: validation nodes");
  app->add_option("--test", d.n_test, "Re-split: test nodes");
}

void add_model(CLI::App* app, ModelOptions& m, bool with_checkpoint) {
  app->add_option("--epochs", m.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  app->add_option("--lr", m.lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
  app->add_option("--hidden", m.hidden, "Hidden layer widths")->delimiter(',');
  if (with_checkpoint) app->add_option("--params", m.params, "Parameter checkpoint to use instead of training");
}

void add_influence(CLI::App* app, InfluenceOptions& i) {
  app->add_option("--t", i.t, "Nodes sampled per HVP (0: min(16, |train|))");
  app->add_option("--m", i.m, "Inverse-HVP iterations")->check(CLI::PositiveNumber);
  app->add_option("--lambda", i.lambda, "Damping")->check(CLI::NonNegativeNumber);
  app->add_option("--scale", i.scale, "Recursion scale s (0: 1/ceil(spectral norm))");
  app->add_option("--early-stop", i.early_stop, "Relative-change early stop (0: off)");
  app->add_option("--alpha", i.alpha, "Interval coverage parameter");
}

Graph load_dataset(const DatasetOptions& d, std::uint64_t seed) {
  Graph g = [&] {
    if (!d.graph.empty()) return load_graph(d.graph);
    SbmOptions so;
    so.blocks = d.blocks;
    so.per_block = d.per_block;
    so.p_in = d.p_in;
    so.p_out = d.p_out;
    so.feature_dim = d.feature_dim;
    so.noise_std = d.noise;
    so.seed = seed;
    return synth_sbm(so);
  }();
  if (d.n_train > 0) return split_nodes(g, d.n_train, d.n_val, d.n_test, seed);
  if (d.graph.empty()) {
    // Synthesized graphs default to a one-third training split.
    const Index n = g.num_nodes();
    return split_nodes(g, n / 3, 0, n - n / 3, seed);
  }
  return g;
}

TrainConfig train_config(const ModelOptions& m, std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = m.epochs;
  tc.learning_rate = m.lr;
  tc.hidden_dims = m.hidden;
  tc.seed = seed;
  return tc;
}

InfluenceConfig influence_config(const InfluenceOptions& i, const Common& c) {
  InfluenceConfig ic;
  if (i.t > 0) ic.sample_batch = i.t;
  ic.iterations = i.m;
  ic.damping = i.lambda;
  if (i.scale > 0.0) ic.scale = i.scale;
  ic.early_stop = i.early_stop;
  ic.seed = c.seed;
  ic.workers = c.threads;
  return ic;
}

fs::path prepare_out_dir(const Common& c) {
  const fs::path dir(c.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cli", "cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cli", "cannot write " + path.string());
  return out;
}

// The resolved configuration of the selected verb, loadable with --config.
void write_manifest(const CLI::App& verb, const fs::path& dir) {
  std::ostringstream text;
  text << "# gcnuq run manifest; rerun with: gcnuq --config manifest.toml " << verb.get_name() << "\n";
  text << '[' << verb.get_name() << "]\n" << verb.config_to_str(true, false);
  open_output(dir / "manifest.toml") << text.str();
  log_info("resolved configuration:\n" + text.str());
}

std::vector<NodeId> all_nodes(const Graph& g) {
  std::vector<NodeId> v(static_cast<std::size_t>(g.num_nodes()));
  for (Index i = 0; i < g.num_nodes(); ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

GcnParams obtain_params(const Graph& g, const ModelOptions& m, std::uint64_t seed) {
  if (!m.params.empty()) return load_params(m.params);
  return train(g, train_config(m, seed));
}

void print_error(std::ostream& err, const std::string& kind, const std::string& module, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = {{"kind", kind}, {"module", module}, {"message", message}};
  err << j.dump() << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Jackknife uncertainty for graph convolutional networks", "gcnuq"};
  app.set_config("--config", "", "TOML config file (flags take precedence)");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);

  Common common;
  DatasetOptions data;
  ModelOptions model;
  InfluenceOptions infl;

  std::string graph_out = "graph.json";
  auto* synth = app.add_subcommand("synth", "Synthesize a stochastic-block-model graph");
  add_common(synth, common);
  add_dataset(synth, data);
  synth->add_option("--output", graph_out, "Graph file name inside --out-dir");

  auto* train_cmd = app.add_subcommand("train", "Train a GCN and save its parameters");
  add_common(train_cmd, common);
  add_dataset(train_cmd, data);
  add_model(train_cmd, model, false);

  std::vector<NodeId> targets;
  bool flag_field = true;
  auto* quantify_cmd = app.add_subcommand("quantify", "Jackknife uncertainty intervals per node");
  add_common(quantify_cmd, common);
  add_dataset(quantify_cmd, data);
  add_model(quantify_cmd, model, true);
  add_influence(quantify_cmd, infl);
  quantify_cmd->add_option("--targets", targets, "Target nodes (default: all)")->delimiter(',');
  quantify_cmd->add_option("--receptive-field-flag", flag_field, "Add the outside_field column");

  std::string strategy = "jackknife";
  Index step_size = 20, budget = 100, initial = 10;
  auto* al_cmd = app.add_subcommand("active-learn", "Active-learning query loop");
  add_common(al_cmd, common);
  add_dataset(al_cmd, data);
  add_model(al_cmd, model, false);
  add_influence(al_cmd, infl);
  al_cmd->add_option("--strategy", strategy, "jackknife, random or degree")
      ->check(CLI::IsMember({"jackknife", "random", "degree"}));
  al_cmd->add_option("--step-size", step_size, "Nodes queried per step (b)");
  al_cmd->add_option("--budget", budget, "Total query budget (K)");
  al_cmd->add_option("--initial-labels", initial, "Initial labels drawn from the training pool");

  ReweightConfig reweight;
  auto* ssl_cmd = app.add_subcommand("ssl", "Uncertainty-weighted semi-supervised training");
  add_common(ssl_cmd, common);
  add_dataset(ssl_cmd, data);
  add_model(ssl_cmd, model, false);
  add_influence(ssl_cmd, infl);
  ssl_cmd->add_option("--tau", reweight.tau, "Loss-weight exponent")->check(CLI::NonNegativeNumber);
  ssl_cmd->add_option("--recompute-every", reweight.recompute_every, "Epochs between weight updates");
  ssl_cmd->add_option("--unit-mean-weights", reweight.unit_mean_weights, "Rescale loss weights to mean 1");

  auto* verify_cmd = app.add_subcommand("verify", "Check derivatives and solvers against the oracles");
  add_common(verify_cmd, common);

  Index n_train = 500;
  auto* bench_cmd = app.add_subcommand("bench", "Influence sweep vs retraining sweep wall-clock");
  add_common(bench_cmd, common);
  add_dataset(bench_cmd, data);
  add_model(bench_cmd, model, false);
  add_influence(bench_cmd, infl);
  bench_cmd->add_option("--n-train", n_train, "Training nodes in the sweep");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "parse", "cli", e.what());
    return 2;
  }

  try {
    set_log_level(common.verbose ? LogLevel::kInfo : LogLevel::kWarning);
    const CLI::App* verb = app.get_subcommands().front();
    const fs::path dir = prepare_out_dir(common);
    write_manifest(*verb, dir);

    if (verb == synth) {
      const Graph g = load_dataset(data, common.seed);
      write_graph(g, dir / graph_out);
      out << "nodes=" << g.num_nodes() << " edges=" << g.edges().size() << " train=" << g.train_mask().size()
          << " test=" << g.test_mask().size() << '\n';
    } else if (verb == train_cmd) {
      const Graph g = load_dataset(data, common.seed);
      const TrainResult r = train_with_history(g, train_config(model, common.seed));
      save_params(r.params, dir / "params.json");
      auto f = open_output(dir / "train_metrics.jsonl");
      for (std::size_t e = 0; e < r.loss_history.size(); ++e) {
        nlohmann::ordered_json j;
        j["epoch"] = e + 1;
        j["loss"] = r.loss_history[e];
        f << j.dump() << '\n';
      }
      const double f1 = g.test_mask().empty() ? 0.0 : evaluate_micro_f1(g, r.params, g.test_mask());
      out << "final_loss=" << (r.loss_history.empty() ? 0.0 : r.loss_history.back()) << " micro_f1_test=" << f1
          << '\n';
    } else if (verb == quantify_cmd) {
      const Graph g = load_dataset(data, common.seed);
      const GcnParams params = obtain_params(g, model, common.seed);
      if (targets.empty()) targets = all_nodes(g);
      IntervalConfig cc{infl.alpha};
      const QuantifyResult q = quantify(g, params, targets, influence_config(infl, common), cc);
      std::vector<char> flags;
      if (flag_field) {
        for (const auto& row : q.intervals) flags.push_back(outside_receptive_field(g, row.node, params.num_layers()));
      }
      ReportHeader header{cc.alpha, q.epsilon, q.influence, params.num_layers()};
      auto f = open_output(dir / "uncertainty.tsv");
      write_uncertainty_report(f, header, q.intervals, flags);
      out << "nodes=" << q.intervals.size() << " report=" << (dir / "uncertainty.tsv").string() << '\n';
    } else if (verb == al_cmd) {
      const Graph g = load_dataset(data, common.seed);
      AcquisitionConfig acq;
      acq.step_size = step_size;
      acq.budget = budget;
      acq.seed = common.seed;
      acq.initial_labels = draw_initial_labels(g.train_mask(), initial, common.seed);
      const auto metrics = active_learning_run(g, acq, train_config(model, common.seed), influence_config(infl, common),
                                               IntervalConfig{infl.alpha}, parse_strategy(strategy));
      auto f = open_output(dir / "metrics.jsonl");
      write_metrics(f, metrics, common.timing);
      out << "steps=" << metrics.size() << " final_micro_f1_test=" << metrics.back().micro_f1_test << '\n';
    } else if (verb == ssl_cmd) {
      const Graph g = load_dataset(data, common.seed);
      const SslResult r = ssl_train(g, train_config(model, common.seed), reweight, influence_config(infl, common),
                                    IntervalConfig{infl.alpha});
      save_params(r.params, dir / "params.json");
      auto f = open_output(dir / "metrics.jsonl");
      write_metrics(f, r.metrics, common.timing);
      out << "epochs=" << r.metrics.size()
          << " final_micro_f1_test=" << (r.metrics.empty() ? 0.0 : r.metrics.back().micro_f1_test) << '\n';
    } else if (verb == verify_cmd) {
      const auto checks = verify_small_instance(common.seed);
      nlohmann::ordered_json report = nlohmann::ordered_json::array();
      bool all = true;
      out << std::left << std::setw(26) << "check" << std::setw(14) << "max_rel_err" << std::setw(11) << "tolerance"
          << "status\n";
      for (const auto& c : checks) {
        out << std::left << std::setw(26) << c.name << std::setw(14) << c.max_rel_err << std::setw(11) << c.tolerance
            << (c.passed ? "PASS" : "FAIL") << '\n';
        report.push_back({{"check", c.name}, {"max_rel_err", c.max_rel_err}, {"tolerance", c.tolerance},
                          {"passed", c.passed}});
        all = all && c.passed;
      }
      open_output(dir / "verify_report.json") << report.dump(2) << '\n';
      return all ? 0 : 1;
    } else if (verb == bench_cmd) {
      const Graph g = load_dataset(data, common.seed);
      const OracleReport r = speedup_benchmark(g, train_config(model, common.seed), influence_config(infl, common), n_train);
      open_output(dir / "bench_report.json") << r.to_json() << '\n';
      out << r.to_json() << '\n';
    }
    return 0;
  } catch (const Error& e) {
    print_error(err, to_string(e.kind()), e.module(), e.what());
  } catch (const std::exception& e) {
    print_error(err, "internal", "cli", e.what());
  }
  return 2;
}

}  // namespace gcnuq::cli
