#include "misuse/clusterer.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace misuse {

using nlohmann::json;

namespace {

std::string join_ids(const std::vector<ClusterId>& ids) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? ", " : "") << ids[i];
  return os.str();
}

}  // namespace

EmptyClusterError::EmptyClusterError(std::vector<ClusterId> ids)
    : InvalidArgument("empty cluster(s): " + join_ids(ids) + "; revise the topic selection"),
      ids_(std::move(ids)) {}

const Cluster& ClusterAssignment::cluster(ClusterId id) const {
  for (const auto& c : clusters)
    if (c.id == id) return c;
  throw InvalidArgument("no cluster with id " + std::to_string(id));
}

std::vector<ClusterId> ClusterAssignment::labels(const SessionDataset& dataset) const {
  std::unordered_map<std::string, ClusterId> owner;
  for (const auto& c : clusters) {
    if (c.sessions.empty()) throw EmptyClusterError({c.id});
    for (const auto& s : c.sessions)
      if (!owner.emplace(s, c.id).second)
        throw InvalidArgument("session '" + s + "' belongs to more than one cluster");
  }
  std::vector<ClusterId> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset.sessions()) {
    auto it = owner.find(s.id);
    if (it == owner.end()) throw InvalidArgument("session '" + s.id + "' is in no cluster");
    out.push_back(it->second);
  }
  if (owner.size() != dataset.size())
    throw InvalidArgument("assignment names sessions that are not in the corpus");
  return out;
}

void ClusterAssignment::validate(const SessionDataset& dataset) const { (void)labels(dataset); }

ClusterAssignment assign_sessions(const LdaEnsemble& ensemble,
                                  std::span<const ClusterSelection> selections,
                                  const SessionDataset& dataset) {
  if (selections.empty()) throw InvalidArgument("no cluster selections given");
  if (ensemble.corpus_fingerprint != dataset.fingerprint())
    throw InvalidArgument("ensemble was fit on a different corpus");
  std::vector<ClusterSelection> sel(selections.begin(), selections.end());
  std::sort(sel.begin(), sel.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::set<TopicRef> used;
  std::set<ClusterId> ids;
  for (const auto& c : sel) {
    if (!ids.insert(c.id).second)
      throw InvalidArgument("duplicate cluster id " + std::to_string(c.id));
    if (c.topics.empty())
      throw InvalidArgument("cluster " + std::to_string(c.id) + " selects no topics");
    for (const auto& t : c.topics) {
      ensemble.check(t);
      if (!used.insert(t).second)
        throw InvalidArgument("topic (" + std::to_string(t.run) + ", " + std::to_string(t.topic) +
                              ") is selected by more than one cluster");
    }
  }
  for (const auto& run : ensemble.runs)
    if (run.theta.rows != dataset.size())
      throw InvalidArgument("ensemble theta does not cover the corpus");

  ClusterAssignment out;
  for (const auto& c : sel) out.clusters.push_back({c.id, c.name, c.topics, {}});

  // Per cluster: run -> topics selected from that run.
  std::vector<std::map<std::size_t, std::vector<std::size_t>>> by_run(sel.size());
  for (std::size_t c = 0; c < sel.size(); ++c)
    for (const auto& t : sel[c].topics) by_run[c][t.run].push_back(t.topic);

  for (std::size_t s = 0; s < dataset.size(); ++s) {
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t c = 0; c < sel.size(); ++c) {
      double total = 0.0;
      for (const auto& [run, topics] : by_run[c]) {
        const auto theta = ensemble.runs[run].theta.row(s);
        for (std::size_t t : topics) total += theta[t];
      }
      const double score = total / static_cast<double>(by_run[c].size());
      if (score > best_score) {
        best_score = score;
        best = c;
      }
    }
    out.clusters[best].sessions.push_back(dataset[s].id);
  }

  std::vector<ClusterId> empty;
  for (const auto& c : out.clusters)
    if (c.sessions.empty()) empty.push_back(c.id);
  if (!empty.empty()) throw EmptyClusterError(std::move(empty));
  out.validate(dataset);
  return out;
}

std::string assignment_to_json(const ClusterAssignment& a) {
  json clusters = json::array();
  for (const auto& c : a.clusters) {
    json topics = json::array();
    for (const auto& t : c.topics) topics.push_back({{"run", t.run}, {"topic", t.topic}});
    clusters.push_back({{"id", c.id}, {"name", c.name}, {"topics", topics}, {"sessions", c.sessions}});
  }
  return json{{"clusters", clusters}, {"residual_policy", a.residual_policy}}.dump();
}

namespace {

std::vector<TopicRef> topics_from_json(const json& j) {
  std::vector<TopicRef> out;
  for (const auto& t : j) out.push_back({t.at("run").get<std::size_t>(), t.at("topic").get<std::size_t>()});
  return out;
}

}  // namespace

ClusterAssignment assignment_from_json(const std::string& text) {
  ClusterAssignment a;
  try {
    const json j = json::parse(text);
    for (const auto& c : j.at("clusters")) {
      Cluster cl;
      cl.id = c.at("id").get<ClusterId>();
      cl.name = c.value("name", std::string{});
      cl.topics = topics_from_json(c.value("topics", json::array()));
      cl.sessions = c.at("sessions").get<std::vector<std::string>>();
      a.clusters.push_back(std::move(cl));
    }
    a.residual_policy = j.value("residual_policy", a.residual_policy);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed cluster assignment: ") + e.what());
  }
  std::sort(a.clusters.begin(), a.clusters.end(),
            [](const auto& x, const auto& y) { return x.id < y.id; });
  return a;
}

std::vector<ClusterSelection> selections_from_json(const std::string& text) {
  std::vector<ClusterSelection> out;
  try {
    const json j = json::parse(text);
    const json& list = j.is_object() ? j.at("selections") : j;
    for (const auto& c : list) {
      ClusterSelection s;
      s.id = c.at("id").get<ClusterId>();
      s.name = c.value("name", "cluster-" + std::to_string(s.id));
      s.topics = topics_from_json(c.at("topics"));
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed selection file: ") + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Routing

FeatureVector featurize(std::span<const ActionId> actions, std::size_t d) {
  if (actions.empty()) throw InvalidArgument("cannot featurize an empty session");
  FeatureVector f(d, 0.0);
  for (ActionId a : actions) {
    if (a < 0 || static_cast<std::size_t>(a) >= d) throw InvalidArgument("action outside vocabulary");
    f[static_cast<std::size_t>(a)] += 1.0;
  }
  const double n = static_cast<double>(actions.size());
  for (double& x : f) x /= n;
  return f;
}

Routing route(std::span<const double> features, std::span<const ClusterSvm> models) {
  if (models.empty()) throw InvalidArgument("routing needs at least one model");
  Routing r;
  r.scores.reserve(models.size());
  double best = 0.0;
  bool first = true;
  for (const auto& m : models) {
    const double w = score(m.model, features);
    r.scores.push_back(w);
    if (first || w > best || (w == best && m.cluster < r.cluster)) {
      best = w;
      r.cluster = m.cluster;
      first = false;
    }
  }
  return r;
}

Routing route(std::span<const ActionId> actions, std::size_t d, std::span<const ClusterSvm> models) {
  const auto f = featurize(actions, d);
  return route(f, models);
}

RouteVoter::RouteVoter(std::size_t horizon) : horizon_(horizon) {
  if (horizon_ < 1) throw InvalidArgument("vote horizon must be at least 1");
}

ClusterId RouteVoter::push(ClusterId instantaneous) {
  if (frozen()) {
    ++steps_;
    return vote_;
  }
  ++steps_;
  ++counts_[instantaneous];
  last_win_[instantaneous] = steps_;
  std::size_t best_count = 0, best_recent = 0;
  for (const auto& [id, count] : counts_) {
    const auto recent = last_win_[id];
    if (count > best_count || (count == best_count && recent > best_recent)) {
      best_count = count;
      best_recent = recent;
      vote_ = id;
    }
  }
  return vote_;
}

OnlineRouter::OnlineRouter(std::span<const ClusterSvm> models, std::size_t d, std::size_t horizon)
    : models_(models), counts_(d, 0.0), voter_(horizon) {
  if (models_.empty()) throw InvalidArgument("online routing needs at least one model");
}

OnlineDecision OnlineRouter::push(ActionId action) {
  if (action < 0 || static_cast<std::size_t>(action) >= counts_.size())
    throw InvalidArgument("action outside vocabulary");
  counts_[static_cast<std::size_t>(action)] += 1.0;
  ++length_;
  FeatureVector f(counts_.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = counts_[i] / static_cast<double>(length_);
  auto r = route(f, models_);
  OnlineDecision d;
  d.instantaneous = r.cluster;
  d.scores = std::move(r.scores);
  d.voted = voter_.push(r.cluster);
  return d;
}

}  // namespace misuse
