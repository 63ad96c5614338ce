#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "misuse/clusterer.hpp"
#include "misuse/corpus.hpp"
#include "misuse/lstm.hpp"

namespace misuse {

// Normality of one session under one model. Averages run over actions
// 2..n; the first action has no observed prefix and is never predicted.
struct SessionScore {
  double likelihood = 0.0;  // mean p(a_i | a_1..a_{i-1})
  double loss = 0.0;        // mean -ln p
  double perplexity = 0.0;  // exp(loss)
  std::size_t predictions = 0;
};

// p(a_i | a_1..a_{i-1}) for i = 2..n.
std::vector<double> action_probabilities(const LstmModel& model, std::span<const ActionId> session);

SessionScore score_session(const LstmModel& model, std::span<const ActionId> session);
double session_likelihood(const LstmModel& model, std::span<const ActionId> session);
double session_loss(const LstmModel& model, std::span<const ActionId> session);
double perplexity(const LstmModel& model, std::span<const ActionId> session);

// Batched scoring of every session (all need n >= 2), in dataset order.
std::vector<SessionScore> score_sessions(const LstmModel& model, const SessionDataset& dataset);

// Uniform lengths in [min_length, max_length], i.i.d. uniform actions.
SessionDataset generate_random_sessions(std::size_t count, const Vocabulary& vocabulary,
                                        std::uint64_t seed, std::size_t min_length = 5,
                                        std::size_t max_length = 25);

// ---------------------------------------------------------------------------
// Trained artifacts used for routing and scoring.

struct ModelBundle {
  Vocabulary vocabulary;
  std::vector<ClusterSvm> routers;  // ascending cluster id
  std::map<ClusterId, LstmModel> models;
  std::map<ClusterId, double> validation_likelihood;

  const LstmModel& model(ClusterId id) const;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Online monitoring

struct MonitorConfig {
  std::size_t vote_horizon = 15;
  // Absolute likelihood threshold; unset means 0.1 x the voted cluster's
  // validation mean likelihood.
  std::optional<double> alarm_threshold;
  double threshold_factor = 0.1;
  std::size_t alarm_patience = 5;
};

struct ScoreRecord {
  std::size_t t = 0;  // 1-based position in the submitted stream
  std::string action;
  bool oov = false;
  ClusterId instantaneous = 0;  // routing of the prefix before this action
  ClusterId voted = 0;          // cluster whose model predicted this action
  double p = 0.0;
  double loss = 0.0;
  double mean_likelihood = 0.0;  // running means over scored actions so far
  double mean_loss = 0.0;
  double threshold = 0.0;
  bool alarm = false;
};

struct AlarmEvent {
  std::size_t t = 0;
  std::string reason;  // "oov" or "low_likelihood"
};

struct ScoreTrace {
  std::string session_id;
  std::vector<ScoreRecord> records;
  std::vector<AlarmEvent> alarms;
};

// Scores one live session action by action. Each monitored session owns its
// own monitor; the bundle is shared read-only.
class SessionMonitor {
 public:
  SessionMonitor(const ModelBundle& bundle, MonitorConfig config, std::string session_id = {});

  // Returns the record for this action, or nothing for a first in-vocabulary
  // action (no prediction yet).
  std::optional<ScoreRecord> push(std::string_view action);

  const ScoreTrace& trace() const { return trace_; }

 private:
  const ModelBundle& bundle_;
  MonitorConfig config_;
  OnlineRouter router_;
  ScoreTrace trace_;
  std::vector<ActionId> history_;
  std::vector<double> recent_;  // p of scored actions, for the alarm window
  std::size_t submitted_ = 0;
  double sum_p_ = 0.0, sum_loss_ = 0.0;
  std::size_t scored_ = 0;
  ClusterId voted_ = -1, instantaneous_ = -1;  // -1 until the first action is routed
};

ScoreTrace monitor_session(const ModelBundle& bundle, std::span<const std::string> actions,
                           const MonitorConfig& config, std::string session_id = {});

// Number of records whose alarm flag would be set at `threshold`, given the
// recorded p values; used to check alarm monotonicity on a fixed trace.
std::size_t count_alarms(const ScoreTrace& trace, double threshold, std::size_t patience);

// One JSON object (single line) per record; p and loss are null for OOV actions.
std::string record_to_json(const ScoreRecord& record, std::string_view session_id);
void write_trace_jsonl(const ScoreTrace& trace, std::ostream& out);

// ---------------------------------------------------------------------------
// Batch normality

struct SessionNormality {
  std::string session_id;
  ClusterId cluster = 0;
  SessionScore score;
};

struct Summary {
  double mean = 0.0;
  double variance = 0.0;
};

struct NormalityReport {
  std::vector<SessionNormality> sessions;
  Summary likelihood, loss, perplexity;
  std::size_t vote_horizon = 15;
};

// Routes every session (vote over its first `vote_horizon` prefixes) and
// scores it with the chosen cluster's model.
NormalityReport normality_report(const ModelBundle& bundle, const SessionDataset& dataset,
                                 std::size_t vote_horizon = 15);

Summary summarize(std::span<const double> values);

std::string report_to_json(const NormalityReport& report);

}  // namespace misuse
