#include "misuse/scoring.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "misuse/error.hpp"

namespace misuse {

using nlohmann::json;

namespace {

void require_scorable(std::span<const ActionId> session) {
  if (session.size() < 2)
    throw InvalidArgument("a session needs at least two actions to be scored (got " +
                          std::to_string(session.size()) + ")");
}

SessionScore from_probabilities(std::span<const double> probs) {
  SessionScore s;
  s.predictions = probs.size();
  for (double p : probs) {
    s.likelihood += p;
    s.loss -= std::log(p);
  }
  const double n = static_cast<double>(probs.size());
  s.likelihood /= n;
  s.loss /= n;
  s.perplexity = std::exp(s.loss);
  return s;
}

}  // namespace

std::vector<double> action_probabilities(const LstmModel& model, std::span<const ActionId> session) {
  require_scorable(session);
  const auto windows = encode_windows(session);
  const auto probs = predict(model, windows);
  std::vector<double> out(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i)
    out[i] = probs(windows[i].target, static_cast<Eigen::Index>(i));
  return out;
}

SessionScore score_session(const LstmModel& model, std::span<const ActionId> session) {
  return from_probabilities(action_probabilities(model, session));
}

double session_likelihood(const LstmModel& model, std::span<const ActionId> session) {
  return score_session(model, session).likelihood;
}

double session_loss(const LstmModel& model, std::span<const ActionId> session) {
  return score_session(model, session).loss;
}

double perplexity(const LstmModel& model, std::span<const ActionId> session) {
  return score_session(model, session).perplexity;
}

std::vector<SessionScore> score_sessions(const LstmModel& model, const SessionDataset& dataset) {
  if (dataset.vocabulary().size() != model.vocabulary_size())
    throw InvalidArgument("dataset vocabulary size does not match the model");
  std::vector<TrainingWindow> windows;
  std::vector<std::size_t> first;
  for (const auto& s : dataset.sessions()) {
    require_scorable(s.actions);
    first.push_back(windows.size());
    const auto w = encode_windows(s.actions);
    windows.insert(windows.end(), w.begin(), w.end());
  }
  first.push_back(windows.size());
  const auto probs = predict(model, windows);
  std::vector<SessionScore> out;
  out.reserve(dataset.size());
  std::vector<double> p;
  for (std::size_t s = 0; s < dataset.size(); ++s) {
    p.clear();
    for (std::size_t i = first[s]; i < first[s + 1]; ++i)
      p.push_back(probs(windows[i].target, static_cast<Eigen::Index>(i)));
    out.push_back(from_probabilities(p));
  }
  return out;
}

SessionDataset generate_random_sessions(std::size_t count, const Vocabulary& vocabulary,
                                        std::uint64_t seed, std::size_t min_length,
                                        std::size_t max_length) {
  if (min_length < 2 || max_length < min_length)
    throw InvalidArgument("random session lengths need 2 <= min <= max");
  if (vocabulary.size() == 0) throw InvalidArgument("empty vocabulary");
  Rng rng(seed);
  std::vector<Session> sessions;
  sessions.reserve(count);
  char id[32];
  for (std::size_t i = 0; i < count; ++i) {
    Session s;
    std::snprintf(id, sizeof id, "r%06zu", i);
    s.id = id;
    const auto n = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(min_length),
                                                        static_cast<std::int64_t>(max_length)));
    for (std::size_t k = 0; k < n; ++k) s.actions.push_back(static_cast<ActionId>(rng.below(vocabulary.size())));
    sessions.push_back(std::move(s));
  }
  return SessionDataset(vocabulary, std::move(sessions));
}

// ---------------------------------------------------------------------------

const LstmModel& ModelBundle::model(ClusterId id) const {
  auto it = models.find(id);
  if (it == models.end()) throw MissingArtifact("no language model for cluster " + std::to_string(id));
  return it->second;
}

void ModelBundle::validate() const {
  if (routers.empty()) throw MissingArtifact("no trained models");
  for (const auto& r : routers) {
    const auto& m = model(r.cluster);
    if (m.vocabulary_size() != vocabulary.size())
      throw FormatError("model for cluster " + std::to_string(r.cluster) +
                        " does not match the vocabulary");
    if (!validation_likelihood.contains(r.cluster))
      throw MissingArtifact("no validation likelihood for cluster " + std::to_string(r.cluster));
  }
}

SessionMonitor::SessionMonitor(const ModelBundle& bundle, MonitorConfig config, std::string session_id)
    : bundle_(bundle),
      config_(config),
      router_(bundle.routers, bundle.vocabulary.size(), config.vote_horizon) {
  if (config_.alarm_patience < 1) throw InvalidArgument("alarm patience must be at least 1");
  trace_.session_id = std::move(session_id);
}

std::optional<ScoreRecord> SessionMonitor::push(std::string_view action) {
  ++submitted_;
  const auto id = bundle_.vocabulary.find(action);
  if (!id) {
    ScoreRecord r;
    r.t = submitted_;
    r.action = std::string(action);
    r.oov = true;
    r.instantaneous = instantaneous_;
    r.voted = voted_;
    r.p = std::numeric_limits<double>::quiet_NaN();
    r.loss = std::numeric_limits<double>::quiet_NaN();
    r.mean_likelihood = scored_ ? sum_p_ / static_cast<double>(scored_) : r.p;
    r.mean_loss = scored_ ? sum_loss_ / static_cast<double>(scored_) : r.loss;
    r.alarm = true;
    trace_.alarms.push_back({r.t, "oov"});
    trace_.records.push_back(r);
    return r;
  }

  std::optional<ScoreRecord> out;
  if (!history_.empty()) {
    // Same left-padded 99-row window the model saw in training.
    std::array<ActionId, kWindowLength> rows;
    rows.fill(kPadding);
    const std::size_t visible = std::min(history_.size(), kWindowLength);
    std::copy(history_.end() - static_cast<std::ptrdiff_t>(visible), history_.end(),
              rows.end() - static_cast<std::ptrdiff_t>(visible));
    const auto p = forward(bundle_.model(voted_), rows);
    ScoreRecord r;
    r.t = submitted_;
    r.action = std::string(action);
    r.instantaneous = instantaneous_;
    r.voted = voted_;
    r.p = p[static_cast<std::size_t>(*id)];
    r.loss = -std::log(r.p);
    ++scored_;
    sum_p_ += r.p;
    sum_loss_ += r.loss;
    r.mean_likelihood = sum_p_ / static_cast<double>(scored_);
    r.mean_loss = sum_loss_ / static_cast<double>(scored_);
    r.threshold = config_.alarm_threshold
                      ? *config_.alarm_threshold
                      : config_.threshold_factor * bundle_.validation_likelihood.at(voted_);
    recent_.push_back(r.p);
    if (recent_.size() > config_.alarm_patience) recent_.erase(recent_.begin());
    if (recent_.size() == config_.alarm_patience) {
      double mean = 0.0;
      for (double v : recent_) mean += v;
      mean /= static_cast<double>(recent_.size());
      if (mean < r.threshold) {
        r.alarm = true;
        trace_.alarms.push_back({r.t, "low_likelihood"});
      }
    }
    trace_.records.push_back(r);
    out = r;
  }

  history_.push_back(*id);
  const auto d = router_.push(*id);
  voted_ = d.voted;
  instantaneous_ = d.instantaneous;
  return out;
}

ScoreTrace monitor_session(const ModelBundle& bundle, std::span<const std::string> actions,
                           const MonitorConfig& config, std::string session_id) {
  SessionMonitor m(bundle, config, std::move(session_id));
  for (const auto& a : actions) m.push(a);
  return m.trace();
}

std::size_t count_alarms(const ScoreTrace& trace, double threshold, std::size_t patience) {
  if (patience < 1) throw InvalidArgument("alarm patience must be at least 1");
  std::vector<double> recent;
  std::size_t alarms = 0;
  for (const auto& r : trace.records) {
    if (r.oov) continue;
    recent.push_back(r.p);
    if (recent.size() > patience) recent.erase(recent.begin());
    if (recent.size() < patience) continue;
    double mean = 0.0;
    for (double v : recent) mean += v;
    if (mean / static_cast<double>(patience) < threshold) ++alarms;
  }
  return alarms;
}

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

std::string record_to_json(const ScoreRecord& r, std::string_view session_id) {
  json j{{"session_id", session_id},
         {"t", r.t},
         {"action", r.action},
         {"oov", r.oov},
         {"instantaneous_cluster", r.instantaneous},
         {"voted_cluster", r.voted},
         {"p", number_or_null(r.p)},
         {"loss", number_or_null(r.loss)},
         {"mean_likelihood", number_or_null(r.mean_likelihood)},
         {"mean_loss", number_or_null(r.mean_loss)},
         {"threshold", r.threshold},
         {"alarm", r.alarm}};
  return j.dump();
}

void write_trace_jsonl(const ScoreTrace& trace, std::ostream& out) {
  for (const auto& r : trace.records) out << record_to_json(r, trace.session_id) << '\n';
}

// ---------------------------------------------------------------------------

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.variance += (v - s.mean) * (v - s.mean);
  s.variance /= static_cast<double>(values.size());
  return s;
}

NormalityReport normality_report(const ModelBundle& bundle, const SessionDataset& dataset,
                                 std::size_t vote_horizon) {
  bundle.validate();
  if (!(dataset.vocabulary() == bundle.vocabulary))
    throw InvalidArgument("dataset vocabulary differs from the trained vocabulary");
  NormalityReport report;
  report.vote_horizon = vote_horizon;
  const std::size_t d = bundle.vocabulary.size();

  // Route first so each cluster's model scores its sessions in one batch.
  std::map<ClusterId, std::vector<std::size_t>> members;
  report.sessions.resize(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    if (s.length() < 2) throw InvalidArgument("session '" + s.id + "' has fewer than two actions");
    OnlineRouter router(bundle.routers, d, vote_horizon);
    ClusterId voted = 0;
    const std::size_t steps = std::min(s.length(), vote_horizon);
    for (std::size_t t = 0; t < steps; ++t) voted = router.push(s.actions[t]).voted;
    report.sessions[i].session_id = s.id;
    report.sessions[i].cluster = voted;
    members[voted].push_back(i);
  }
  for (const auto& [cluster, positions] : members) {
    const auto scores = score_sessions(bundle.model(cluster), dataset.select(positions));
    for (std::size_t k = 0; k < positions.size(); ++k) report.sessions[positions[k]].score = scores[k];
  }

  std::vector<double> lik, los, ppl;
  for (const auto& s : report.sessions) {
    lik.push_back(s.score.likelihood);
    los.push_back(s.score.loss);
    ppl.push_back(s.score.perplexity);
  }
  report.likelihood = summarize(lik);
  report.loss = summarize(los);
  report.perplexity = summarize(ppl);
  return report;
}

std::string report_to_json(const NormalityReport& report) {
  json sessions = json::array();
  for (const auto& s : report.sessions)
    sessions.push_back({{"session_id", s.session_id},
                        {"cluster", s.cluster},
                        {"likelihood", s.score.likelihood},
                        {"loss", s.score.loss},
                        {"perplexity", s.score.perplexity},
                        {"predictions", s.score.predictions}});
  const auto summary = [](const Summary& s) { return json{{"mean", s.mean}, {"variance", s.variance}}; };
  json j{{"version", 1},
         {"vote_horizon", report.vote_horizon},
         {"sessions", sessions},
         {"likelihood", summary(report.likelihood)},
         {"loss", summary(report.loss)},
         {"perplexity", summary(report.perplexity)}};
  return j.dump(2);
}

}  // namespace misuse
