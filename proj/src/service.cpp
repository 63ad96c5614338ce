#include "misuse/service.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "misuse/clusterer.hpp"
#include "misuse/error.hpp"
#include "misuse/evaluation.hpp"

namespace misuse {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void apply_config_file(ServiceConfig& c, const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError("malformed config file " + path.string() + ": " + e.what());
  }
  // A misspelled key would otherwise be silently ignored.
  const auto known = [&](const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
    if (!obj.is_object()) throw FormatError("config file " + path.string() + ": " + where + " must be an object");
    for (const auto& [k, v] : obj.items())
      if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; }))
        throw FormatError("config file " + path.string() + ": unknown key " + where + "." + k);
  };
  known(j, {"workdir", "host", "port", "chord_threshold", "lda", "train", "monitor"}, "$");
  if (j.contains("lda")) known(j["lda"], {"topic_counts", "seeds_per_k", "iterations", "seed"}, "$.lda");
  if (j.contains("train"))
    known(j["train"],
          {"hidden", "epochs", "patience", "batch_size", "learning_rate", "seed", "nu", "gamma", "baselines"},
          "$.train");
  if (j.contains("monitor")) known(j["monitor"], {"vote_horizon", "alarm_threshold", "alarm_patience"}, "$.monitor");
  try {
    if (j.contains("workdir")) c.workdir = j.at("workdir").get<std::string>();
    take(j, "host", c.host);
    take(j, "port", c.port);
    take(j, "chord_threshold", c.chord_threshold);
    if (j.contains("lda")) {
      const auto& l = j.at("lda");
      take(l, "topic_counts", c.lda.topic_counts);
      take(l, "seeds_per_k", c.lda.seeds_per_k);
      take(l, "iterations", c.lda.iterations);
      take(l, "seed", c.lda.seed);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      take(t, "hidden", c.train.hidden);
      take(t, "epochs", c.train.lm.max_epochs);
      take(t, "patience", c.train.lm.patience);
      take(t, "batch_size", c.train.lm.batch_size);
      take(t, "learning_rate", c.train.lm.learning_rate);
      take(t, "seed", c.train.seed);
      take(t, "nu", c.train.svm.nu);
      take(t, "gamma", c.train.svm.gamma);
      take(t, "baselines", c.train.baselines);
    }
    if (j.contains("monitor")) {
      const auto& m = j.at("monitor");
      take(m, "vote_horizon", c.monitor.vote_horizon);
      take(m, "alarm_patience", c.monitor.alarm_patience);
      if (m.contains("alarm_threshold")) c.monitor.alarm_threshold = m.at("alarm_threshold").get<double>();
    }
  } catch (const json::exception& e) {
    throw FormatError("bad value in config file " + path.string() + ": " + e.what());
  }
}

void apply_environment(ServiceConfig& c) {
  const auto env = [](const char* name) -> const char* {
    const char* v = std::getenv(name);
    return v && *v ? v : nullptr;
  };
  try {
    if (auto v = env("MISUSE_WORKDIR")) c.workdir = v;
    if (auto v = env("MISUSE_HOST")) c.host = v;
    if (auto v = env("MISUSE_PORT")) c.port = std::stoi(v);
    if (auto v = env("MISUSE_SEED")) c.lda.seed = c.train.seed = std::stoull(v);
    if (auto v = env("MISUSE_HIDDEN")) c.train.hidden = std::stoul(v);
    if (auto v = env("MISUSE_EPOCHS")) c.train.lm.max_epochs = std::stoul(v);
  } catch (const std::logic_error&) {
    throw InvalidArgument("malformed numeric MISUSE_* environment variable");
  }
}

std::string to_string(JobKind kind) {
  switch (kind) {
    case JobKind::kLda: return "lda";
    case JobKind::kTrain: return "train";
    case JobKind::kEval: return "eval";
  }
  return "?";
}

std::string to_string(JobState state) {
  switch (state) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    case JobState::kFailed: return "failed";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Request plumbing

namespace {

// 4xx with a JSON body.
struct HttpError {
  int status;
  json body;
};

HttpError error(int status, const std::string& code, const std::string& message) {
  return {status, json{{"error", code}, {"message", message}}};
}

json parse_body(const httplib::Request& req, bool required) {
  if (req.body.empty()) {
    if (required) throw error(400, "empty_body", "request body must be a JSON object");
    return json::object();
  }
  json j = json::parse(req.body, nullptr, false);
  if (j.is_discarded()) throw error(400, "malformed_json", "request body is not valid JSON");
  if (!j.is_object()) throw HttpError{400, json{{"error", "bad_type"}, {"path", "$"}, {"message", "expected an object"}}};
  return j;
}

// Rejects keys outside `allowed`, naming the offending path.
void allow_only(const json& j, std::initializer_list<const char*> allowed, const std::string& path) {
  if (!j.is_object())
    throw HttpError{400, json{{"error", "bad_type"}, {"path", path}, {"message", "expected an object"}}};
  for (const auto& [key, _] : j.items()) {
    const bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!ok)
      throw HttpError{400, json{{"error", "unknown_field"},
                                {"path", path + "." + key},
                                {"message", "unknown field '" + key + "'"}}};
  }
}

template <typename T>
T field(const json& j, const char* key, const std::string& path, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw HttpError{400, json{{"error", "bad_type"}, {"path", path + "." + key}, {"message", "wrong value type"}}};
  }
}

template <typename T>
T required_field(const json& j, const char* key, const std::string& path) {
  if (!j.contains(key))
    throw HttpError{400, json{{"error", "missing_field"}, {"path", path + "." + key}, {"message", "required"}}};
  return field<T>(j, key, path, T{});
}

void reply(httplib::Response& res, int status, json body) {
  if (body.is_object() && !body.contains("version")) body["version"] = 1;
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json topic_json(const TopicRef& t) { return json{{"run", t.run}, {"topic", t.topic}}; }

}  // namespace

// ---------------------------------------------------------------------------

struct Service::Impl {
  ServiceConfig config;
  Workdir workdir;
  httplib::Server server;
  std::thread server_thread;

  std::mutex mu;  // guards the artifact pointers, jobs and channels
  std::shared_ptr<const SessionDataset> dataset;
  std::shared_ptr<const LdaEnsemble> ensemble;
  std::shared_ptr<const std::vector<ProjectedTopic>> projection;
  std::shared_ptr<const ClusterAssignment> assignment;
  std::shared_ptr<const ModelBundle> bundle;

  std::map<std::string, JobStatus> jobs;
  std::size_t next_job = 1;
  bool busy = false;
  std::thread worker;
  std::condition_variable idle;

  struct Channel {
    std::shared_ptr<const ModelBundle> bundle;  // keeps the models alive
    std::unique_ptr<SessionMonitor> monitor;
    std::mutex mu;
  };
  std::map<std::string, std::shared_ptr<Channel>> channels;
  std::size_t next_channel = 1;

  explicit Impl(ServiceConfig c) : config(std::move(c)), workdir(config.workdir) {
    workdir.create();
    reload();
    routes();
  }

  ~Impl() {
    server.stop();
    if (server_thread.joinable()) server_thread.join();
    if (worker.joinable()) worker.join();
  }

  // Restart safety: pick up whatever the working directory already holds.
  void reload() {
    if (fs::exists(workdir.dataset()))
      dataset = std::make_shared<const SessionDataset>(ingest(workdir.dataset(), LogFormat::kJsonl));
    if (fs::exists(workdir.ensemble())) ensemble = std::make_shared<const LdaEnsemble>(load_ensemble(workdir.ensemble()));
    if (fs::exists(workdir.assignment()))
      assignment = std::make_shared<const ClusterAssignment>(assignment_from_json(read_file(workdir.assignment())));
    if (workdir.has_models()) bundle = std::make_shared<const ModelBundle>(load_bundle(workdir.models()));
  }

  template <typename T>
  std::shared_ptr<const T> get(const std::shared_ptr<const T>& p) {
    std::lock_guard lock(mu);
    return p;
  }

  std::shared_ptr<const SessionDataset> need_dataset() {
    auto d = get(dataset);
    if (!d) throw error(409, "no_dataset", "the working directory holds no dataset.jsonl");
    return d;
  }
  std::shared_ptr<const LdaEnsemble> need_ensemble() {
    auto e = get(ensemble);
    if (!e) throw error(409, "no_ensemble", "no LDA ensemble has been fitted");
    return e;
  }
  std::shared_ptr<const ModelBundle> need_bundle() {
    auto b = get(bundle);
    if (!b) throw error(409, "untrained", "no trained models");
    return b;
  }

  // Wraps a handler with the error-to-status mapping.
  template <typename Fn>
  httplib::Server::Handler wrap(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        reply(res, e.status, e.body);
      } catch (const EmptyClusterError& e) {
        reply(res, 422, json{{"error", "empty_cluster"}, {"clusters", e.clusters()}, {"message", e.what()}});
      } catch (const InvalidArgument& e) {
        reply(res, 422, json{{"error", "invalid_argument"}, {"message", e.what()}});
      } catch (const MissingArtifact& e) {
        reply(res, 409, json{{"error", "missing_artifact"}, {"message", e.what()}});
      } catch (const FormatError& e) {
        reply(res, 400, json{{"error", "format_error"}, {"message", e.what()}});
      } catch (const std::exception& e) {
        reply(res, 500, json{{"error", "internal"}, {"message", e.what()}});
      }
    };
  }

  // -------------------------------------------------------------------------
  // Jobs

  std::string launch(JobKind kind, std::function<void(const std::function<void(double, const std::string&)>&)> body) {
    std::unique_lock lock(mu);
    if (busy) throw error(409, "job_running", "another job is still running");
    if (worker.joinable()) worker.join();  // previous job finished; reap it
    const std::string id = "job-" + std::to_string(next_job++);
    jobs[id] = JobStatus{id, kind, JobState::kQueued, 0.0, ""};
    busy = true;
    worker = std::thread([this, id, body = std::move(body)] {
      update(id, [](JobStatus& s) { s.state = JobState::kRunning; });
      try {
        body([this, id](double progress, const std::string& message) {
          update(id, [&](JobStatus& s) {
            s.progress = std::clamp(progress, s.progress, 1.0);
            s.message = message;
          });
        });
        update(id, [](JobStatus& s) {
          s.state = JobState::kDone;
          s.progress = 1.0;
          s.message = "done";
        });
      } catch (const std::exception& e) {
        const std::string what = e.what();
        update(id, [&](JobStatus& s) {
          s.state = JobState::kFailed;
          s.message = what;
        });
      }
      std::lock_guard lk(mu);
      busy = false;
      idle.notify_all();
    });
    return id;
  }

  template <typename Fn>
  void update(const std::string& id, Fn fn) {
    std::lock_guard lock(mu);
    fn(jobs.at(id));
  }

  // -------------------------------------------------------------------------
  // Routes

  void routes() {
    server.Get("/api/status", wrap([this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard lock(mu);
      reply(res, 200,
            json{{"dataset", dataset != nullptr},
                 {"sessions", dataset ? dataset->size() : 0},
                 {"ensemble", ensemble != nullptr},
                 {"assignment", assignment != nullptr},
                 {"trained", bundle != nullptr},
                 {"busy", busy}});
    }));

    server.Get("/api/ensemble", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto ens = need_ensemble();
      const double tau = threshold_param(req);
      const auto d = ens->runs.front().phi.cols;
      std::vector<std::string> names;
      if (auto ds = get(dataset); ds && ds->vocabulary().size() == d) names = ds->vocabulary().names();
      json topics = json::array();
      for (const auto& t : ens->all_topics()) {
        const auto phi = ens->phi(t);
        std::vector<std::size_t> order(phi.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return phi[a] > phi[b]; });
        json top = json::array();
        for (std::size_t i = 0; i < std::min<std::size_t>(10, order.size()); ++i) {
          json entry{{"index", order[i]}, {"probability", phi[order[i]]}};
          if (!names.empty()) entry["action"] = names[order[i]];
          top.push_back(entry);
        }
        topics.push_back({{"run", t.run},
                          {"topic", t.topic},
                          {"top_actions", top},
                          {"fan_size", fan_size(t, *ens, tau)},
                          {"phi", std::vector<double>(phi.begin(), phi.end())}});
      }
      json runs = json::array();
      for (const auto& r : ens->runs) runs.push_back({{"K", r.topics}, {"seed", r.seed}});
      reply(res, 200,
            json{{"threshold", tau},
                 {"actions", names},
                 {"runs", runs},
                 {"topics", topics},
                 {"corpus_fingerprint", ens->corpus_fingerprint}});
    }));

    server.Get("/api/projection", wrap([this](const httplib::Request&, httplib::Response& res) {
      const auto ens = need_ensemble();
      std::shared_ptr<const std::vector<ProjectedTopic>> proj = get(projection);
      if (!proj) {
        ProjectionParams p = config.projection;
        const double n = static_cast<double>(ens->topic_count());
        if (p.perplexity >= n) p.perplexity = std::max(1.0, (n - 1.0) / 2.0);
        auto computed = std::make_shared<const std::vector<ProjectedTopic>>(project_topics(*ens, p));
        std::lock_guard lock(mu);
        if (ensemble == ens) projection = computed;
        proj = computed;
      }
      json points = json::array();
      for (const auto& p : *proj) points.push_back({{"run", p.ref.run}, {"topic", p.ref.topic}, {"x", p.x}, {"y", p.y}});
      reply(res, 200, json{{"points", points}});
    }));

    server.Get("/api/chord", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const auto ens = need_ensemble();
      const double tau = threshold_param(req);
      const auto topics = ens->all_topics();
      json matrix = json::array();
      json fans = json::array();
      json refs = json::array();
      for (const auto& a : topics) {
        json row = json::array();
        for (const auto& b : topics) row.push_back(shared_action_count(a, b, *ens, tau));
        matrix.push_back(row);
        fans.push_back(fan_size(a, *ens, tau));
        refs.push_back(topic_json(a));
      }
      reply(res, 200, json{{"threshold", tau}, {"topics", refs}, {"matrix", matrix}, {"fan_sizes", fans}});
    }));

    server.Post("/api/lda", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req, false);
      allow_only(body, {"version", "topic_counts", "seeds_per_k", "iterations", "seed"}, "$");
      EnsembleParams p = config.lda;
      p.topic_counts = field(body, "topic_counts", "$", p.topic_counts);
      p.seeds_per_k = field(body, "seeds_per_k", "$", p.seeds_per_k);
      p.iterations = field(body, "iterations", "$", p.iterations);
      p.seed = field(body, "seed", "$", p.seed);
      const auto ds = need_dataset();
      const auto id = launch(JobKind::kLda, [this, p, ds](const auto& progress) {
        progress(0.0, "fitting " + std::to_string(p.topic_counts.size() * p.seeds_per_k) + " runs");
        auto fitted = std::make_shared<const LdaEnsemble>(fit_ensemble(*ds, p));
        save_ensemble(*fitted, workdir.ensemble());
        std::lock_guard lock(mu);
        ensemble = std::move(fitted);
        projection.reset();
      });
      reply(res, 202, json{{"job_id", id}});
    }));

    server.Post("/api/clusters", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req, true);
      allow_only(body, {"version", "selections"}, "$");
      const auto list = required_field<json>(body, "selections", "$");
      if (!list.is_array())
        throw HttpError{400, json{{"error", "bad_type"}, {"path", "$.selections"}, {"message", "expected an array"}}};
      std::vector<ClusterSelection> selections;
      for (std::size_t i = 0; i < list.size(); ++i) {
        const std::string path = "$.selections[" + std::to_string(i) + "]";
        allow_only(list[i], {"id", "name", "topics"}, path);
        ClusterSelection s;
        s.id = required_field<ClusterId>(list[i], "id", path);
        s.name = field<std::string>(list[i], "name", path, "cluster-" + std::to_string(s.id));
        const auto topics = required_field<json>(list[i], "topics", path);
        if (!topics.is_array())
          throw HttpError{400, json{{"error", "bad_type"}, {"path", path + ".topics"}, {"message", "expected an array"}}};
        for (std::size_t k = 0; k < topics.size(); ++k) {
          const std::string tp = path + ".topics[" + std::to_string(k) + "]";
          allow_only(topics[k], {"run", "topic"}, tp);
          s.topics.push_back({required_field<std::size_t>(topics[k], "run", tp),
                              required_field<std::size_t>(topics[k], "topic", tp)});
        }
        selections.push_back(std::move(s));
      }
      const auto ens = need_ensemble();
      const auto ds = need_dataset();
      auto assigned = std::make_shared<const ClusterAssignment>(assign_sessions(*ens, selections, *ds));
      write_file_atomic(workdir.assignment(), assignment_to_json(*assigned));
      json clusters = json::array();
      std::size_t total = 0;
      for (const auto& c : assigned->clusters) {
        clusters.push_back({{"id", c.id},
                            {"name", c.name},
                            {"size", c.sessions.size()},
                            {"medoid", topic_json(medoid_topic(c.topics, *ens))}});
        total += c.sessions.size();
      }
      {
        std::lock_guard lock(mu);
        assignment = std::move(assigned);
      }
      reply(res, 200, json{{"clusters", clusters}, {"total", total}});
    }));

    server.Post("/api/train", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req, false);
      allow_only(body, {"version", "hidden", "epochs", "patience", "seed", "baselines", "nu", "gamma"}, "$");
      TrainOptions opt = config.train;
      opt.hidden = field(body, "hidden", "$", opt.hidden);
      opt.lm.max_epochs = field(body, "epochs", "$", opt.lm.max_epochs);
      opt.lm.patience = field(body, "patience", "$", opt.lm.patience);
      opt.seed = field(body, "seed", "$", opt.seed);
      opt.baselines = field(body, "baselines", "$", opt.baselines);
      opt.svm.nu = field(body, "nu", "$", opt.svm.nu);
      opt.svm.gamma = field(body, "gamma", "$", opt.svm.gamma);
      const auto ds = need_dataset();
      const auto assigned = get(assignment);
      if (!assigned) throw error(409, "no_assignment", "no cluster assignment has been submitted");
      const auto id = launch(JobKind::kTrain, [this, opt, ds, assigned](const auto& progress) mutable {
        opt.progress = [&progress](const std::string& stage, double f) { progress(f, stage); };
        const auto trained = train_all(*ds, *assigned, opt);
        save_trained(trained, workdir.models());
        auto fresh = std::make_shared<const ModelBundle>(load_bundle(workdir.models()));
        std::lock_guard lock(mu);
        bundle = std::move(fresh);
      });
      reply(res, 202, json{{"job_id", id}});
    }));

    server.Post("/api/eval", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req, false);
      allow_only(body, {"version", "seed"}, "$");
      EvalOptions opt;
      opt.seed = field(body, "seed", "$", opt.seed);
      opt.vote_horizon = config.monitor.vote_horizon;
      need_bundle();
      const auto ds = need_dataset();
      const auto id = launch(JobKind::kEval, [this, opt, ds](const auto& progress) {
        progress(0.0, "evaluating");
        const auto trained = load_trained(workdir.models(), *ds);
        const auto ev = evaluate_cluster_vs_global(trained, opt);
        write_figures(trained, *ds, ev, opt, workdir.eval());
      });
      reply(res, 202, json{{"job_id", id}});
    }));

    server.Get(R"(/api/jobs/([A-Za-z0-9-]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu);
      const auto it = jobs.find(req.matches[1]);
      if (it == jobs.end()) throw error(404, "no_such_job", "unknown job id");
      const auto& s = it->second;
      reply(res, 200,
            json{{"id", s.id},
                 {"kind", to_string(s.kind)},
                 {"state", to_string(s.state)},
                 {"progress", s.progress},
                 {"message", s.message}});
    }));

    server.Post("/api/score", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req, true);
      allow_only(body, {"version", "session_id", "actions"}, "$");
      const auto names = required_field<std::vector<std::string>>(body, "actions", "$");
      const auto session_id = field<std::string>(body, "session_id", "$", "session");
      const auto b = need_bundle();
      Session s;
      s.id = session_id;
      std::vector<std::string> oov;
      for (const auto& n : names) {
        if (auto id = b->vocabulary.find(n)) s.actions.push_back(*id);
        else oov.push_back(n);
      }
      if (s.actions.size() < 2)
        throw error(422, "too_short", "at least two in-vocabulary actions are needed to score a session");
      const SessionDataset one(b->vocabulary, {s});
      json report = json::parse(report_to_json(normality_report(*b, one, config.monitor.vote_horizon)));
      report["oov"] = oov;
      reply(res, 200, report);
    }));

    server.Post("/api/monitor/open", wrap([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req, false);
      allow_only(body, {"version", "session_id"}, "$");
      const auto b = need_bundle();
      auto ch = std::make_shared<Channel>();
      ch->bundle = b;
      std::string id;
      {
        std::lock_guard lock(mu);
        id = "mon-" + std::to_string(next_channel++);
      }
      ch->monitor = std::make_unique<SessionMonitor>(*b, config.monitor, field<std::string>(body, "session_id", "$", id));
      {
        std::lock_guard lock(mu);
        channels[id] = ch;
      }
      reply(res, 200, json{{"channel", id}, {"framing", "ndjson"}});
    }));

    // Request body: one action per line, either a JSON string or {"action": name}.
    // Response: one NDJSON record per predicted or out-of-vocabulary action, in order.
    server.Post(R"(/api/monitor/([A-Za-z0-9-]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      std::shared_ptr<Channel> ch;
      {
        std::lock_guard lock(mu);
        const auto it = channels.find(req.matches[1]);
        if (it == channels.end()) throw error(404, "no_such_channel", "unknown monitor channel");
        ch = it->second;
      }
      std::vector<std::string> actions;
      std::istringstream in(req.body);
      std::string line;
      for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string path = "$[" + std::to_string(n - 1) + "]";
        json j = json::parse(line, nullptr, false);
        if (j.is_string()) {
          actions.push_back(j.get<std::string>());
        } else if (j.is_object()) {
          allow_only(j, {"action"}, path);
          actions.push_back(required_field<std::string>(j, "action", path));
        } else {
          throw HttpError{400, json{{"error", "malformed_line"}, {"path", path}, {"message", "expected a string or object"}}};
        }
      }
      std::string out;
      std::lock_guard lock(ch->mu);
      for (const auto& a : actions)
        if (auto rec = ch->monitor->push(a)) out += record_to_json(*rec, ch->monitor->trace().session_id) + "\n";
      res.status = 200;
      res.set_content(out, "application/x-ndjson");
    }));

    server.Delete(R"(/api/monitor/([A-Za-z0-9-]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
      std::shared_ptr<Channel> ch;
      {
        std::lock_guard lock(mu);
        const auto it = channels.find(req.matches[1]);
        if (it == channels.end()) throw error(404, "no_such_channel", "unknown monitor channel");
        ch = it->second;
        channels.erase(it);
      }
      std::lock_guard lock(ch->mu);
      const auto& tr = ch->monitor->trace();
      reply(res, 200, json{{"closed", true}, {"records", tr.records.size()}, {"alarms", tr.alarms.size()}});
    }));
  }

  double threshold_param(const httplib::Request& req) const {
    if (!req.has_param("threshold")) return config.chord_threshold;
    double tau = 0.0;
    try {
      tau = std::stod(req.get_param_value("threshold"));
    } catch (const std::logic_error&) {
      throw error(400, "bad_parameter", "threshold must be a number");
    }
    if (!(tau > 0.0 && tau <= 1.0)) throw error(422, "bad_parameter", "threshold must lie in (0, 1]");
    return tau;
  }
};

Service::Service(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

Service::~Service() = default;

int Service::start() {
  auto& s = impl_->server;
  int port = impl_->config.port;
  if (port == 0) {
    port = s.bind_to_any_port(impl_->config.host);
  } else if (!s.bind_to_port(impl_->config.host, port)) {
    port = -1;
  }
  if (port < 0) throw Error("cannot bind " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  impl_->server_thread = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
  return port;
}

void Service::run() {
  if (!impl_->server.listen(impl_->config.host, impl_->config.port))
    throw Error("cannot listen on " + impl_->config.host + ":" + std::to_string(impl_->config.port));
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

void Service::wait_for_jobs() {
  std::unique_lock lock(impl_->mu);
  impl_->idle.wait(lock, [&] { return !impl_->busy; });
}

}  // namespace misuse
