#include "misuse/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "misuse/error.hpp"
#include "misuse/scoring.hpp"

namespace misuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct TestSet {
  std::vector<TrainingWindow> windows;
  SessionDataset sessions;  // n >= 2 only
};

double mean_session_likelihood(const LstmModel& model, const SessionDataset& sessions) {
  if (sessions.empty()) return kNaN;
  double total = 0.0;
  for (const auto& s : score_sessions(model, sessions)) total += s.likelihood;
  return total / static_cast<double>(sessions.size());
}

double mean_session_loss(const LstmModel& model, const SessionDataset& sessions) {
  if (sessions.empty()) return kNaN;
  double total = 0.0;
  for (const auto& s : score_sessions(model, sessions)) total += s.loss;
  return total / static_cast<double>(sessions.size());
}

// Clusters ordered by ascending size, ties by id.
std::vector<std::size_t> size_order(const TrainedSet& trained) {
  std::vector<std::size_t> order(trained.splits.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return trained.splits[a].size < trained.splits[b].size;
  });
  return order;
}

}  // namespace

Evaluation evaluate_cluster_vs_global(const TrainedSet& trained, const EvalOptions& options) {
  if (trained.clusters.empty()) throw MissingArtifact("no trained models");
  Evaluation ev;
  ev.vocabulary_size = trained.vocabulary.size();
  const auto order = size_order(trained);
  const std::size_t k = order.size();

  std::vector<TestSet> tests(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto& split = trained.splits[order[i]];
    tests[i].sessions = filter_short(split.test).dataset;
    tests[i].windows = windows_of(tests[i].sessions);
    if (tests[i].windows.empty())
      throw InvalidArgument("cluster " + std::to_string(split.id) + " has no scorable test session");
    ev.cross.clusters.push_back(split.id);
  }

  ev.cross.accuracy.assign(k, std::vector<double>(k));
  ev.cross.loss.assign(k, std::vector<double>(k));
  ev.cross.likelihood.assign(k, std::vector<double>(k));
  for (std::size_t r = 0; r < k; ++r) {
    const auto& model = trained.clusters[order[r]].lm.model;
    for (std::size_t c = 0; c < k; ++c) {
      ev.cross.accuracy[r][c] = accuracy(model, tests[c].windows);
      ev.cross.loss[r][c] = mean_loss(model, tests[c].windows);
      ev.cross.likelihood[r][c] = mean_session_likelihood(model, tests[c].sessions);
    }
  }

  for (std::size_t r = 0; r < k; ++r) {
    const auto& split = trained.splits[order[r]];
    ComparisonRow row;
    row.cluster = split.id;
    row.name = split.name;
    row.size = split.size;
    row.own_test_accuracy = ev.cross.accuracy[r][r];
    row.own_test_loss = ev.cross.loss[r][r];
    if (k > 1) {
      double acc = 0.0, los = 0.0;
      for (std::size_t c = 0; c < k; ++c)
        if (c != r) {
          acc += ev.cross.accuracy[r][c];
          los += ev.cross.loss[r][c];
        }
      row.mean_other_test_accuracy = acc / static_cast<double>(k - 1);
      row.mean_other_test_loss = los / static_cast<double>(k - 1);
    } else {
      row.mean_other_test_accuracy = row.mean_other_test_loss = kNaN;
    }
    row.global_model_accuracy = row.global_model_loss = kNaN;
    if (trained.global) {
      row.global_model_accuracy = accuracy(trained.global->model, tests[r].windows);
      row.global_model_loss = mean_loss(trained.global->model, tests[r].windows);
    }
    row.size_matched_global_accuracy = row.size_matched_global_loss = kNaN;
    if (auto it = trained.size_matched.find(split.id); it != trained.size_matched.end()) {
      row.size_matched_global_accuracy = accuracy(it->second.model, tests[r].windows);
      row.size_matched_global_loss = mean_loss(it->second.model, tests[r].windows);
    }
    ev.rows.push_back(row);
  }

  const auto random = generate_random_sessions(options.random_sessions, trained.vocabulary, options.seed,
                                               options.random_min_length, options.random_max_length);
  for (std::size_t r = 0; r < k; ++r) {
    const auto& model = trained.clusters[order[r]].lm.model;
    ev.random.push_back({std::to_string(ev.cross.clusters[r]), mean_session_likelihood(model, tests[r].sessions),
                         mean_session_likelihood(model, random), mean_session_loss(model, tests[r].sessions),
                         mean_session_loss(model, random)});
  }
  if (trained.global) {
    std::vector<Session> all;
    for (const auto& t : tests) all.insert(all.end(), t.sessions.sessions().begin(), t.sessions.sessions().end());
    const SessionDataset pooled(trained.vocabulary, std::move(all));
    const auto& model = trained.global->model;
    ev.random.push_back({"global", mean_session_likelihood(model, pooled), mean_session_likelihood(model, random),
                         mean_session_loss(model, pooled), mean_session_loss(model, random)});
  }
  return ev;
}

double routing_accuracy(const TrainedSet& trained) {
  const auto bundle = trained.bundle();
  const std::size_t d = trained.vocabulary.size();
  std::size_t correct = 0, total = 0;
  for (const auto& split : trained.splits)
    for (const auto& s : split.test.sessions()) {
      ++total;
      if (route(s.actions, d, bundle.routers).cluster == split.id) ++correct;
    }
  if (total == 0) throw InvalidArgument("no test sessions to route");
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "cluster,name,size,own_test_accuracy,mean_other_test_accuracy,global_model_accuracy,"
        "size_matched_global_accuracy,own_test_loss,mean_other_test_loss,global_model_loss,"
        "size_matched_global_loss\n";
  for (const auto& r : rows)
    os << r.cluster << ',' << r.name << ',' << r.size << ',' << num(r.own_test_accuracy) << ','
       << num(r.mean_other_test_accuracy) << ',' << num(r.global_model_accuracy) << ','
       << num(r.size_matched_global_accuracy) << ',' << num(r.own_test_loss) << ','
       << num(r.mean_other_test_loss) << ',' << num(r.global_model_loss) << ','
       << num(r.size_matched_global_loss) << '\n';
  return os.str();
}

std::vector<std::string> write_figures(const TrainedSet& trained, const SessionDataset& corpus,
                                       const Evaluation& ev, const EvalOptions& options,
                                       const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<std::string> written;
  const auto put = [&](const std::string& name, const std::string& text) {
    write_file_atomic(dir / name, text);
    written.push_back(name);
  };

  put("cluster_vs_global.csv", comparison_csv(ev.rows));

  {
    std::ostringstream os;
    os << "model_cluster,test_cluster,accuracy,loss,likelihood\n";
    const auto& x = ev.cross;
    for (std::size_t r = 0; r < x.clusters.size(); ++r)
      for (std::size_t c = 0; c < x.clusters.size(); ++c)
        os << x.clusters[r] << ',' << x.clusters[c] << ',' << num(x.accuracy[r][c]) << ',' << num(x.loss[r][c])
           << ',' << num(x.likelihood[r][c]) << '\n';
    put("normality.csv", os.str());
  }

  {
    std::ostringstream os;
    os << "model,test_likelihood,random_likelihood,test_loss,random_loss,uniform_likelihood\n";
    const double uniform = 1.0 / static_cast<double>(ev.vocabulary_size);
    for (const auto& r : ev.random)
      os << r.model << ',' << num(r.test_likelihood) << ',' << num(r.random_likelihood) << ','
         << num(r.test_loss) << ',' << num(r.random_loss) << ',' << num(uniform) << '\n';
    put("random_baseline.csv", os.str());
  }

  // Online traces of the longest test sessions: per-step routing versus the
  // first-N vote, and the running likelihood under the voted model.
  {
    std::vector<const Session*> pool;
    for (const auto& split : trained.splits)
      for (const auto& s : split.test.sessions()) pool.push_back(&s);
    std::stable_sort(pool.begin(), pool.end(), [](const Session* a, const Session* b) {
      if (a->length() != b->length()) return a->length() > b->length();
      return a->id < b->id;
    });
    pool.resize(std::min(pool.size(), options.trace_sessions));

    const auto bundle = trained.bundle();
    MonitorConfig mc;
    mc.vote_horizon = options.vote_horizon;
    std::ostringstream online, svm;
    online << "session_id,t,instantaneous_cluster,voted_cluster,p,mean_likelihood,alarm\n";
    svm << "session_id,t,cluster,score,instantaneous_cluster,voted_cluster\n";
    for (const Session* s : pool) {
      SessionMonitor monitor(bundle, mc, s->id);
      OnlineRouter router(bundle.routers, trained.vocabulary.size(), options.vote_horizon);
      for (std::size_t t = 0; t < s->length(); ++t) {
        const ActionId a = s->actions[t];
        if (auto rec = monitor.push(trained.vocabulary.name(a)))
          online << s->id << ',' << rec->t << ',' << rec->instantaneous << ',' << rec->voted << ','
                 << num(rec->p) << ',' << num(rec->mean_likelihood) << ',' << (rec->alarm ? 1 : 0) << '\n';
        const auto decision = router.push(a);
        for (std::size_t m = 0; m < bundle.routers.size(); ++m)
          svm << s->id << ',' << t + 1 << ',' << bundle.routers[m].cluster << ',' << num(decision.scores[m])
              << ',' << decision.instantaneous << ',' << decision.voted << '\n';
      }
    }
    put("online_traces.csv", online.str());
    put("ocsvm_traces.csv", svm.str());
  }

  {
    std::map<std::size_t, std::size_t> hist;
    for (const auto& s : corpus.sessions()) ++hist[s.length()];
    std::ostringstream os;
    os << "length,count\n";
    for (const auto& [len, count] : hist) os << len << ',' << count << '\n';
    put("lengths.csv", os.str());
  }

  {
    std::ostringstream os;
    os << "model,epoch,train_loss,val_loss\n";
    const auto curve = [&](const std::string& name, const TrainedModel& m) {
      for (const auto& e : m.curve)
        os << name << ',' << e.epoch << ',' << num(e.train_loss) << ',' << num(e.validation_loss) << '\n';
    };
    for (const auto& c : trained.clusters) curve(std::to_string(c.id), c.lm);
    if (trained.global) curve("global", *trained.global);
    for (const auto& [id, m] : trained.size_matched) curve("subset_" + std::to_string(id), m);
    put("loss_curves.csv", os.str());
  }

  json stamp{{"version", 1},
             {"train_seed", trained.seed},
             {"eval_seed", options.seed},
             {"random_sessions", options.random_sessions},
             {"random_length", {options.random_min_length, options.random_max_length}},
             {"vote_horizon", options.vote_horizon},
             {"files", written}};
  put("run.json", stamp.dump(2) + "\n");
  return written;
}

// ---------------------------------------------------------------------------

BenchmarkOptions::BenchmarkOptions() { train.hidden = 64; }

SyntheticConfig planted4_config(const BenchmarkOptions& options) {
  return make_persona_config(options.sizes, options.actions_per_persona, options.overlap, LengthModel{},
                             options.seed);
}

ClusterAssignment ground_truth_assignment(const SyntheticCorpus& corpus) {
  std::map<int, Cluster> by_persona;
  for (std::size_t i = 0; i < corpus.dataset.size(); ++i) {
    auto& c = by_persona[corpus.persona[i]];
    c.id = corpus.persona[i];
    c.name = "persona-" + std::to_string(c.id);
    c.sessions.push_back(corpus.dataset[i].id);
  }
  ClusterAssignment a;
  a.residual_policy = "ground-truth";
  for (auto& [_, c] : by_persona) a.clusters.push_back(std::move(c));
  a.validate(corpus.dataset);
  return a;
}

BenchmarkResult run_benchmark(const BenchmarkOptions& options) {
  BenchmarkResult r;
  r.corpus = generate_synthetic(planted4_config(options));
  const auto filtered = filter_short(r.corpus.dataset);
  // Keep persona labels aligned with the filtered sessions.
  if (filtered.removed > 0) {
    SyntheticCorpus kept;
    std::vector<Session> sessions;
    for (std::size_t i = 0; i < r.corpus.dataset.size(); ++i)
      if (r.corpus.dataset[i].length() >= 2) {
        sessions.push_back(r.corpus.dataset[i]);
        kept.persona.push_back(r.corpus.persona[i]);
      }
    kept.dataset = SessionDataset(r.corpus.dataset.vocabulary(), std::move(sessions));
    r.corpus = std::move(kept);
  }
  r.assignment = ground_truth_assignment(r.corpus);
  TrainOptions train = options.train;
  train.seed = options.seed;
  r.trained = train_all(r.corpus.dataset, r.assignment, train);
  r.evaluation = evaluate_cluster_vs_global(r.trained, options.eval);
  r.routing_accuracy = routing_accuracy(r.trained);
  return r;
}

}  // namespace misuse
