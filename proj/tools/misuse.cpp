// Batch driver for every pipeline stage.
//
// Settings are resolved as: command-line flags > MISUSE_* environment
// variables > --config JSON file > built-in defaults.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "misuse/clusterer.hpp"
#include "misuse/corpus.hpp"
#include "misuse/error.hpp"
#include "misuse/evaluation.hpp"
#include "misuse/lda.hpp"
#include "misuse/pipeline.hpp"
#include "misuse/scoring.hpp"
#include "misuse/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace misuse;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

std::string fmt(double v, int digits = 6) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

template <typename T>
void override_with(T& target, const std::optional<T>& flag) {
  if (flag) target = *flag;
}

struct Globals {
  std::optional<std::string> workdir;
  std::optional<std::string> config_file;
};

ServiceConfig resolve_config(const Globals& g) {
  ServiceConfig c;
  if (g.config_file) apply_config_file(c, *g.config_file);
  apply_environment(c);
  if (g.workdir) c.workdir = *g.workdir;
  return c;
}

// Sessions from a JSONL file re-expressed over the trained vocabulary.
// Actions the models have never seen are dropped with a warning.
SessionDataset onto_vocabulary(const SessionDataset& raw, const Vocabulary& vocabulary) {
  std::vector<Session> sessions;
  std::size_t dropped = 0;
  for (const auto& s : raw.sessions()) {
    Session out = s;
    out.actions.clear();
    for (ActionId a : s.actions) {
      if (auto id = vocabulary.find(raw.vocabulary().name(a))) out.actions.push_back(*id);
      else ++dropped;
    }
    if (out.actions.empty()) continue;
    sessions.push_back(std::move(out));
  }
  if (dropped > 0) std::cerr << "warning: ignored " << dropped << " out-of-vocabulary action(s)\n";
  return SessionDataset(vocabulary, std::move(sessions));
}

SessionDataset load_workdir_dataset(const Workdir& w) {
  if (!fs::exists(w.dataset()))
    throw MissingArtifact("no dataset in " + w.root().string() + " (run synth or ingest first)");
  return ingest(w.dataset(), LogFormat::kJsonl);
}

void print_table(const std::vector<ComparisonRow>& rows) {
  std::printf("%-8s %6s %9s %9s %9s %9s\n", "cluster", "size", "own_acc", "other_acc", "global", "matched");
  for (const auto& r : rows)
    std::printf("%-8d %6zu %9.4f %9.4f %9.4f %9.4f\n", r.cluster, r.size, r.own_test_accuracy,
                r.mean_other_test_accuracy, r.global_model_accuracy, r.size_matched_global_accuracy);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Misuse-detection workbench: LDA topic ensembles, per-cluster OC-SVM routing and LSTM "
               "normality scoring.\nSettings precedence: flags > MISUSE_* environment > --config file > defaults."};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--workdir,-w", g.workdir, "Working directory for all artifacts (env MISUSE_WORKDIR)");
  app.add_option("--config,-c", g.config_file, "JSON config file")->check(CLI::ExistingFile);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with ground-truth personas");
  std::string preset = "default";
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_sessions;
  synth->add_option("--preset", preset, "default | planted4 | two-persona | cycle")
      ->check(CLI::IsMember({"default", "planted4", "two-persona", "cycle"}));
  synth->add_option("--seed", synth_seed, "Generator seed (default 1)");
  synth->add_option("--sessions", synth_sessions, "Session count for the two-persona and cycle presets");

  // ingest
  auto* ing = app.add_subcommand("ingest", "Import a session log into the working directory");
  std::string ingest_path, ingest_format = "jsonl";
  bool keep_short = false;
  ing->add_option("--input,-i", ingest_path, "Log file")->required()->check(CLI::ExistingFile);
  ing->add_option("--format", ingest_format, "jsonl | csv")->check(CLI::IsMember({"jsonl", "csv"}));
  ing->add_flag("--keep-short", keep_short, "Keep sessions with fewer than two actions");

  // stats
  auto* stats = app.add_subcommand("stats", "Length statistics and frequent action sets");
  std::vector<double> percentiles{50, 90, 98};
  std::optional<double> min_support;
  stats->add_option("--percentile,-p", percentiles, "Nearest-rank percentiles to report")
      ->check(CLI::Range(0.0, 100.0));
  stats->add_option("--min-support", min_support, "Mine frequent action sets (per cluster once assigned)")
      ->check(CLI::Range(0.0, 1.0));

  // lda
  auto* lda = app.add_subcommand("lda", "Fit the LDA ensemble");
  std::optional<std::vector<std::size_t>> lda_k;
  std::optional<std::size_t> lda_seeds, lda_iters;
  std::optional<std::uint64_t> lda_seed;
  bool emit_selection = false;
  std::size_t selection_run = 0;
  lda->add_option("--k", lda_k, "Topic counts (default 5 10 15 20)");
  lda->add_option("--seeds-per-k", lda_seeds, "Runs per topic count (default 2)");
  lda->add_option("--iterations", lda_iters, "Gibbs sweeps (default 1000)");
  lda->add_option("--seed", lda_seed, "Base seed");
  lda->add_flag("--emit-selection", emit_selection,
                "Write selection.json with one cluster per topic of --selection-run");
  lda->add_option("--selection-run", selection_run, "Run used by --emit-selection");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  std::optional<std::string> serve_host;
  std::optional<int> serve_port;
  serve->add_option("--host", serve_host, "Bind address (env MISUSE_HOST)");
  serve->add_option("--port", serve_port, "Port (env MISUSE_PORT)");

  // assign
  auto* assign = app.add_subcommand("assign", "Turn a topic selection file into session clusters");
  std::optional<std::string> selection_file;
  assign->add_option("--selection,-s", selection_file, "Selection JSON (default <workdir>/selection.json)");

  // train
  auto* trn = app.add_subcommand("train", "Train per-cluster OC-SVMs and LSTMs plus global baselines");
  std::optional<std::size_t> hidden, epochs, patience, batch;
  std::optional<double> lr, nu, gamma;
  std::optional<std::uint64_t> train_seed;
  bool no_baselines = false;
  trn->add_option("--hidden", hidden, "LSTM units (default 256, env MISUSE_HIDDEN)");
  trn->add_option("--epochs", epochs, "Epoch cap (default 100, env MISUSE_EPOCHS)");
  trn->add_option("--patience", patience, "Early-stopping patience (default 5)");
  trn->add_option("--batch-size", batch, "Minibatch size (default 32)");
  trn->add_option("--lr", lr, "Adam learning rate (default 0.001)");
  trn->add_option("--nu", nu, "OC-SVM nu (default 0.05)");
  trn->add_option("--gamma", gamma, "OC-SVM RBF gamma (default 1/d)");
  trn->add_option("--seed", train_seed, "Training seed (env MISUSE_SEED)");
  trn->add_flag("--no-baselines", no_baselines, "Skip the global and size-matched models");

  // score
  auto* scr = app.add_subcommand("score", "Normality report for sessions");
  std::string score_file;
  std::optional<std::string> score_out;
  scr->add_option("--session-file", score_file, "Sessions (JSONL)")->required()->check(CLI::ExistingFile);
  scr->add_option("--out,-o", score_out, "Write the report here instead of stdout");

  // monitor
  auto* mon = app.add_subcommand("monitor", "Replay sessions through the online monitor");
  std::string monitor_file;
  std::optional<std::string> monitor_out;
  std::optional<double> threshold;
  std::optional<std::size_t> alarm_patience, horizon;
  mon->add_option("--session-file", monitor_file, "Sessions (JSONL)")->required()->check(CLI::ExistingFile);
  mon->add_option("--out,-o", monitor_out, "Write JSONL records here instead of stdout");
  mon->add_option("--threshold", threshold, "Absolute alarm threshold (default 0.1 x validation likelihood)");
  mon->add_option("--patience", alarm_patience, "Actions in the alarm window (default 5)");
  mon->add_option("--horizon", horizon, "Routing vote horizon (default 15)");

  // random-baseline
  auto* rnd = app.add_subcommand("random-baseline", "Random sessions and their scores under the trained models");
  std::size_t rnd_count = 1000, rnd_min = 5, rnd_max = 25;
  std::uint64_t rnd_seed = 1;
  std::optional<std::string> rnd_out;
  rnd->add_option("--count", rnd_count, "Sessions to generate");
  rnd->add_option("--min-length", rnd_min, "Shortest session")->check(CLI::PositiveNumber);
  rnd->add_option("--max-length", rnd_max, "Longest session")->check(CLI::PositiveNumber);
  rnd->add_option("--seed", rnd_seed, "Generator seed");
  rnd->add_option("--out,-o", rnd_out, "Sessions file (default <workdir>/random_sessions.jsonl)");

  // eval
  auto* evl = app.add_subcommand("eval", "Write the evaluation tables under <workdir>/eval");
  std::optional<std::string> benchmark;
  std::uint64_t eval_seed = 1;
  evl->add_option("--benchmark", benchmark, "Run a self-contained benchmark (planted4)")
      ->check(CLI::IsMember({"planted4"}));
  evl->add_option("--seed", eval_seed, "Seed for random baselines (and the benchmark corpus)");
  evl->add_option("--hidden", hidden, "Benchmark LSTM units (default 64)");
  evl->add_option("--epochs", epochs, "Benchmark epoch cap (default 100)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    ServiceConfig cfg = resolve_config(g);
    const Workdir w(cfg.workdir);
    w.create();

    if (*synth) {
      const std::uint64_t seed = synth_seed.value_or(1);
      SyntheticConfig sc;
      if (preset == "default") {
        sc = default_synthetic_config(seed);
      } else if (preset == "planted4") {
        BenchmarkOptions b;
        b.seed = seed;
        sc = planted4_config(b);
      } else if (preset == "two-persona") {
        const std::size_t n = synth_sessions.value_or(1000);
        const std::size_t counts[] = {n / 2, n - n / 2};
        sc = make_persona_config(counts, 5, 0.0, LengthModel{}, seed);
      } else {
        sc = cycle_config(3, synth_sessions.value_or(500), LengthModel{}, seed);
      }
      const auto corpus = generate_synthetic(sc);
      emit_jsonl(corpus.dataset, w.dataset());
      write_ground_truth(corpus, w.ground_truth());
      std::cout << "sessions " << corpus.dataset.size() << "\nactions " << corpus.dataset.vocabulary().size()
                << "\npersonas " << sc.personas.size() << "\n";
    } else if (*ing) {
      auto ds = ingest(ingest_path, parse_log_format(ingest_format));
      std::size_t removed = 0;
      if (!keep_short) {
        auto f = filter_short(ds);
        ds = std::move(f.dataset);
        removed = f.removed;
      }
      emit_jsonl(ds, w.dataset());
      std::cout << "sessions " << ds.size() << "\nactions " << ds.vocabulary().size() << "\nremoved_short "
                << removed << "\n";
    } else if (*stats) {
      const auto ds = load_workdir_dataset(w);
      const auto ls = length_stats(ds);
      std::cout << "sessions " << ls.count() << "\nactions " << ds.vocabulary().size() << "\nmean "
                << fmt(ls.mean()) << "\nmin " << ls.min() << "\nmax " << ls.max() << "\n";
      for (double p : percentiles) std::cout << "p" << fmt(p) << " " << ls.percentile(p) << "\n";
      if (min_support) {
        const auto show = [&](const std::string& label, const SessionDataset& part) {
          std::cout << "itemsets " << label << " (" << part.size() << " sessions)\n";
          for (const auto& f : mine_frequent_actionsets(part, *min_support)) {
            std::cout << "  {";
            for (std::size_t i = 0; i < f.actions.size(); ++i) std::cout << (i ? "," : "") << f.actions[i];
            std::cout << "} " << fmt(f.support, 4) << "\n";
          }
        };
        if (fs::exists(w.assignment())) {
          const auto a = assignment_from_json(read_file(w.assignment()));
          const auto labels = a.labels(ds);
          for (const auto& c : a.clusters) {
            std::vector<std::size_t> pos;
            for (std::size_t i = 0; i < labels.size(); ++i)
              if (labels[i] == c.id) pos.push_back(i);
            show("cluster " + std::to_string(c.id), ds.select(pos));
          }
        } else {
          show("corpus", ds);
        }
      }
    } else if (*lda) {
      const auto ds = load_workdir_dataset(w);
      EnsembleParams p = cfg.lda;
      override_with(p.topic_counts, lda_k);
      override_with(p.seeds_per_k, lda_seeds);
      override_with(p.iterations, lda_iters);
      override_with(p.seed, lda_seed);
      const auto ens = fit_ensemble(ds, p);
      save_ensemble(ens, w.ensemble());
      std::cout << "runs " << ens.runs.size() << "\ntopics " << ens.topic_count() << "\n";
      if (emit_selection) {
        if (selection_run >= ens.runs.size()) throw InvalidArgument("--selection-run is out of range");
        json sel = json::array();
        for (std::size_t t = 0; t < ens.runs[selection_run].topics; ++t)
          sel.push_back({{"id", t}, {"name", "topic-" + std::to_string(t)},
                         {"topics", json::array({{{"run", selection_run}, {"topic", t}}})}});
        write_file_atomic(w.selection(), json{{"selections", sel}}.dump(2) + "\n");
        std::cout << "selection " << w.selection().string() << "\n";
      }
    } else if (*serve) {
      override_with(cfg.host, serve_host);
      override_with(cfg.port, serve_port);
      Service service(cfg);
      std::cerr << "serving " << cfg.workdir.string() << " on " << cfg.host << ":" << cfg.port << "\n";
      service.run();
    } else if (*assign) {
      const auto ds = load_workdir_dataset(w);
      const fs::path sel_path = selection_file ? fs::path(*selection_file) : w.selection();
      const auto selections = selections_from_json(read_file(sel_path));
      if (!fs::exists(w.ensemble())) throw MissingArtifact("no ensemble (run lda first)");
      const auto ens = load_ensemble(w.ensemble());
      const auto a = assign_sessions(ens, selections, ds);
      write_file_atomic(w.assignment(), assignment_to_json(a));
      for (const auto& c : a.clusters) {
        const auto m = medoid_topic(c.topics, ens);
        std::cout << "cluster " << c.id << " " << c.name << " sessions " << c.sessions.size() << " medoid " << m.run
                  << ":" << m.topic << "\n";
      }
    } else if (*trn) {
      const auto ds = load_workdir_dataset(w);
      if (!fs::exists(w.assignment())) throw MissingArtifact("no cluster assignment (run assign first)");
      const auto a = assignment_from_json(read_file(w.assignment()));
      TrainOptions opt = cfg.train;
      override_with(opt.hidden, hidden);
      override_with(opt.lm.max_epochs, epochs);
      override_with(opt.lm.patience, patience);
      override_with(opt.lm.batch_size, batch);
      override_with(opt.lm.learning_rate, lr);
      override_with(opt.svm.nu, nu);
      override_with(opt.svm.gamma, gamma);
      override_with(opt.seed, train_seed);
      if (no_baselines) opt.baselines = false;
      std::string last;
      opt.progress = [&](const std::string& stage, double f) {
        if (stage != last) std::cerr << "[" << fmt(100.0 * f, 3) << "%] " << stage << "\n";
        last = stage;
      };
      const auto trained = train_all(ds, a, opt);
      save_trained(trained, w.models());
      for (const auto& c : trained.clusters)
        std::cout << "cluster " << c.id << " epochs " << c.lm.curve.size() << " best_epoch "
                  << c.lm.model.metadata.best_epoch << " validation_likelihood " << fmt(c.validation_likelihood)
                  << "\n";
    } else if (*scr) {
      if (!w.has_models()) throw MissingArtifact("no trained models in " + w.root().string());
      const auto bundle = load_bundle(w.models());
      const auto sessions = onto_vocabulary(ingest(score_file, LogFormat::kJsonl), bundle.vocabulary);
      const auto scorable = filter_short(sessions);
      if (scorable.removed > 0)
        std::cerr << "warning: skipped " << scorable.removed << " session(s) with fewer than two actions\n";
      const auto report = normality_report(bundle, scorable.dataset, cfg.monitor.vote_horizon);
      const auto text = report_to_json(report) + "\n";
      if (score_out) write_file_atomic(*score_out, text);
      else std::cout << text;
    } else if (*mon) {
      if (!w.has_models()) throw MissingArtifact("no trained models in " + w.root().string());
      const auto bundle = load_bundle(w.models());
      MonitorConfig mc = cfg.monitor;
      if (threshold) mc.alarm_threshold = *threshold;
      override_with(mc.alarm_patience, alarm_patience);
      override_with(mc.vote_horizon, horizon);
      const auto raw = ingest(monitor_file, LogFormat::kJsonl);
      std::ostringstream records;
      for (const auto& s : raw.sessions()) {
        std::vector<std::string> names;
        for (ActionId a : s.actions) names.push_back(raw.vocabulary().name(a));
        const auto trace = monitor_session(bundle, names, mc, s.id);
        write_trace_jsonl(trace, records);
        std::cerr << s.id << ": " << trace.records.size() << " records, " << trace.alarms.size() << " alarms";
        if (!trace.alarms.empty()) std::cerr << " (first at t=" << trace.alarms.front().t << ")";
        std::cerr << "\n";
      }
      if (monitor_out) write_file_atomic(*monitor_out, records.str());
      else std::cout << records.str();
    } else if (*rnd) {
      Vocabulary vocabulary;
      std::optional<ModelBundle> bundle;
      if (w.has_models()) {
        bundle = load_bundle(w.models());
        vocabulary = bundle->vocabulary;
      } else {
        vocabulary = load_workdir_dataset(w).vocabulary();
      }
      const auto random = generate_random_sessions(rnd_count, vocabulary, rnd_seed, rnd_min, rnd_max);
      emit_jsonl(random, rnd_out ? fs::path(*rnd_out) : w.root() / "random_sessions.jsonl");
      std::cout << "sessions " << random.size() << "\nuniform_likelihood " << fmt(1.0 / vocabulary.size()) << "\n";
      if (bundle) {
        for (const auto& [id, model] : bundle->models) {
          double lik = 0.0, los = 0.0;
          for (const auto& s : score_sessions(model, random)) {
            lik += s.likelihood;
            los += s.loss;
          }
          std::cout << "cluster " << id << " random_likelihood " << fmt(lik / random.size()) << " random_loss "
                    << fmt(los / random.size()) << "\n";
        }
      }
    } else if (*evl) {
      EvalOptions eo;
      eo.seed = eval_seed;
      eo.vote_horizon = cfg.monitor.vote_horizon;
      if (benchmark) {
        BenchmarkOptions b;
        b.seed = eval_seed;
        b.eval = eo;
        b.train.lm = cfg.train.lm;
        b.train.svm = cfg.train.svm;
        override_with(b.train.hidden, hidden);
        override_with(b.train.lm.max_epochs, epochs);
        std::string last;
        b.train.progress = [&](const std::string& stage, double f) {
          if (stage != last) std::cerr << "[" << fmt(100.0 * f, 3) << "%] " << stage << "\n";
          last = stage;
        };
        const auto r = run_benchmark(b);
        emit_jsonl(r.corpus.dataset, w.dataset());
        write_ground_truth(r.corpus, w.ground_truth());
        write_file_atomic(w.assignment(), assignment_to_json(r.assignment));
        save_trained(r.trained, w.models());
        write_figures(r.trained, r.corpus.dataset, r.evaluation, eo, w.eval());
        print_table(r.evaluation.rows);
        std::cout << "routing_accuracy " << fmt(r.routing_accuracy, 4) << "\n";
      } else {
        const auto ds = load_workdir_dataset(w);
        if (!w.has_models()) throw MissingArtifact("no trained models in " + w.root().string());
        const auto trained = load_trained(w.models(), ds);
        const auto ev = evaluate_cluster_vs_global(trained, eo);
        const auto files = write_figures(trained, ds, ev, eo, w.eval());
        print_table(ev.rows);
        std::cout << "routing_accuracy " << fmt(routing_accuracy(trained), 4) << "\n";
        for (const auto& f : files) std::cout << "wrote " << (w.eval() / f).string() << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
