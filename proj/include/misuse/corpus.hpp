#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "misuse/random.hpp"

namespace misuse {

using ActionId = std::int32_t;

// Bidirectional action name <-> index map. Indices are dense in [0, size()).
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> names);

  // Returns the index of `name`, appending it if unseen.
  ActionId intern(std::string_view name);

  std::optional<ActionId> find(std::string_view name) const;
  ActionId index(std::string_view name) const;  // throws if absent
  const std::string& name(ActionId id) const;
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const Vocabulary& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, ActionId> index_;
};

struct Session {
  std::string id;
  std::vector<ActionId> actions;
  std::optional<std::string> user;
  std::optional<std::string> started_at;  // RFC 3339, kept verbatim

  std::size_t length() const { return actions.size(); }
  bool operator==(const Session&) const = default;
};

enum class Split : std::uint8_t { kTrain, kValidation, kTest };

std::string_view to_string(Split split);

// Immutable-after-construction collection of sessions over one vocabulary.
class SessionDataset {
 public:
  SessionDataset() = default;
  // Validates that every action index is inside the vocabulary and every
  // session is nonempty.
  SessionDataset(Vocabulary vocabulary, std::vector<Session> sessions);

  const Vocabulary& vocabulary() const { return vocabulary_; }
  const std::vector<Session>& sessions() const { return sessions_; }
  std::size_t size() const { return sessions_.size(); }
  bool empty() const { return sessions_.empty(); }
  const Session& operator[](std::size_t i) const { return sessions_[i]; }

  bool has_splits() const { return !splits_.empty(); }
  const std::vector<Split>& splits() const { return splits_; }
  SessionDataset with_splits(std::vector<Split> labels) const;

  // Sessions carrying the given split label (requires splits).
  SessionDataset subset(Split which) const;
  // Sessions at the given positions, same vocabulary, labels dropped.
  SessionDataset select(std::span<const std::size_t> positions) const;

  // Stable 64-bit content hash (vocabulary, ids, actions) as 16 hex digits.
  std::string fingerprint() const;

  bool operator==(const SessionDataset& other) const {
    return vocabulary_ == other.vocabulary_ && sessions_ == other.sessions_ &&
           splits_ == other.splits_;
  }

 private:
  Vocabulary vocabulary_;
  std::vector<Session> sessions_;
  std::vector<Split> splits_;
};

// Builds datasets from action names; the vocabulary grows in order of first
// appearance.
class DatasetBuilder {
 public:
  void add(std::string id, std::span<const std::string> actions,
           std::optional<std::string> user = std::nullopt,
           std::optional<std::string> started_at = std::nullopt);
  SessionDataset build() &&;

 private:
  Vocabulary vocabulary_;
  std::vector<Session> sessions_;
};

enum class LogFormat { kJsonl, kCsv };

LogFormat parse_log_format(std::string_view name);

SessionDataset ingest(const std::filesystem::path& path, LogFormat format);
SessionDataset ingest_jsonl(std::istream& in);
SessionDataset ingest_csv(std::istream& in);

void emit_jsonl(const SessionDataset& dataset, std::ostream& out);
void emit_jsonl(const SessionDataset& dataset, const std::filesystem::path& path);

struct FilterResult {
  SessionDataset dataset;
  std::size_t removed = 0;
};

// Drops sessions with fewer than two actions (nothing to predict).
FilterResult filter_short(const SessionDataset& dataset);

class LengthStats {
 public:
  explicit LengthStats(const SessionDataset& dataset);

  double mean() const { return mean_; }
  std::size_t max() const { return sorted_.back(); }
  std::size_t min() const { return sorted_.front(); }
  std::size_t count() const { return sorted_.size(); }
  // Nearest-rank percentile: the ceil(p/100 * m)-th smallest length, p in (0, 100].
  std::size_t percentile(double p) const;

 private:
  std::vector<std::size_t> sorted_;
  double mean_ = 0.0;
};

LengthStats length_stats(const SessionDataset& dataset);

struct SplitRatios {
  double train = 0.70;
  double validation = 0.15;
  double test = 0.15;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
};

// Floor of each ratio times m; the remainder goes to train.
SplitCounts split_counts(std::size_t m, const SplitRatios& ratios);

SessionDataset split(const SessionDataset& dataset, const SplitRatios& ratios, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic corpora

// First-order Markov walker over a subset of the global vocabulary.
struct Persona {
  std::vector<ActionId> actions;               // global vocabulary indices
  std::vector<std::vector<double>> transition;  // |actions| x |actions|, row-stochastic
  std::vector<double> start;                    // |actions|, sums to 1
  std::size_t session_count = 0;
};

// Session length law: mixture of two geometric laws on {1, 2, ...}. The long
// component produces the heavy tail seen in real interaction logs.
struct LengthModel {
  double short_mean = 15.0;
  double long_mean = 150.0;
  double long_weight = 0.0;
  std::size_t max_length = 5000;
};

struct SyntheticConfig {
  std::vector<std::string> action_names;  // the full vocabulary
  std::vector<Persona> personas;
  LengthModel lengths;
  std::uint64_t seed = 1;

  std::size_t session_count() const;
  void validate() const;  // throws InvalidArgument
};

struct SyntheticCorpus {
  SessionDataset dataset;
  std::vector<int> persona;  // ground truth, parallel to dataset.sessions()
};

// Walks `length` steps. If `start` is given the walk begins there, otherwise
// the first action is drawn from the persona's start distribution.
std::vector<ActionId> markov_walk(const Persona& persona, std::size_t length, Rng& rng,
                                  std::optional<ActionId> start = std::nullopt);

SyntheticCorpus generate_synthetic(const SyntheticConfig& config);

// Random personas on partially overlapping vocabularies. Each persona owns
// `actions_per_persona` actions; `overlap` of them come from a pool shared by
// every persona.
SyntheticConfig make_persona_config(std::span<const std::size_t> session_counts,
                                    std::size_t actions_per_persona, double overlap,
                                    const LengthModel& lengths, std::uint64_t seed);

// Thirteen personas sized geometrically from 177 to about 3500 sessions, with
// a length law tuned to mean ~15, p98 ~91 and a tail past 800 actions.
SyntheticConfig default_synthetic_config(std::uint64_t seed);

// Deterministic cycle a0 -> a1 -> ... -> a{d-1} -> a0 with uniform start.
SyntheticConfig cycle_config(std::size_t d, std::size_t sessions, const LengthModel& lengths,
                             std::uint64_t seed);

void write_ground_truth(const SyntheticCorpus& corpus, const std::filesystem::path& path);
// Reads the sidecar and returns persona labels aligned with `dataset`.
std::vector<int> read_ground_truth(const SessionDataset& dataset, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Frequent action sets

struct FrequentItemset {
  std::vector<std::string> actions;  // sorted by name
  std::size_t count = 0;
  double support = 0.0;
};

// Apriori over the set-of-actions view of each session. Result is sorted by
// support descending, ties broken by the lexicographic order of the name lists.
std::vector<FrequentItemset> mine_frequent_actionsets(const SessionDataset& dataset,
                                                      double min_support);

}  // namespace misuse
