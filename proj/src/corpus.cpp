#include "misuse/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "misuse/error.hpp"

namespace misuse {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> names) {
  for (auto& n : names) {
    if (index_.contains(n)) throw InvalidArgument("duplicate action name '" + n + "'");
    intern(n);
  }
}

ActionId Vocabulary::intern(std::string_view name) {
  std::string key(name);
  if (auto it = index_.find(key); it != index_.end()) return it->second;
  const auto id = static_cast<ActionId>(names_.size());
  names_.push_back(key);
  index_.emplace(std::move(key), id);
  return id;
}

std::optional<ActionId> Vocabulary::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ActionId Vocabulary::index(std::string_view name) const {
  auto id = find(name);
  if (!id) throw InvalidArgument("unknown action '" + std::string(name) + "'");
  return *id;
}

const std::string& Vocabulary::name(ActionId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= names_.size())
    throw InvalidArgument("action index " + std::to_string(id) + " out of range");
  return names_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------
// SessionDataset

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kValidation:
      return "validation";
    case Split::kTest:
      return "test";
  }
  return "?";
}

SessionDataset::SessionDataset(Vocabulary vocabulary, std::vector<Session> sessions)
    : vocabulary_(std::move(vocabulary)), sessions_(std::move(sessions)) {
  const auto d = static_cast<ActionId>(vocabulary_.size());
  for (const auto& s : sessions_) {
    if (s.actions.empty()) throw InvalidArgument("session '" + s.id + "' is empty");
    for (ActionId a : s.actions)
      if (a < 0 || a >= d)
        throw InvalidArgument("session '" + s.id + "' references action " + std::to_string(a) +
                              " outside vocabulary of size " + std::to_string(d));
  }
}

SessionDataset SessionDataset::with_splits(std::vector<Split> labels) const {
  if (labels.size() != sessions_.size())
    throw InvalidArgument("split labels must cover every session");
  SessionDataset out = *this;
  out.splits_ = std::move(labels);
  return out;
}

SessionDataset SessionDataset::subset(Split which) const {
  if (!has_splits()) throw InvalidArgument("dataset has no split labels");
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < sessions_.size(); ++i)
    if (splits_[i] == which) keep.push_back(i);
  return select(keep);
}

SessionDataset SessionDataset::select(std::span<const std::size_t> positions) const {
  SessionDataset out;
  out.vocabulary_ = vocabulary_;
  out.sessions_.reserve(positions.size());
  for (std::size_t p : positions) out.sessions_.push_back(sessions_.at(p));
  return out;
}

namespace {

struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  }
  void str(std::string_view s) {
    const std::uint64_t n = s.size();
    bytes(&n, sizeof n);
    bytes(s.data(), s.size());
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
};

}  // namespace

std::string SessionDataset::fingerprint() const {
  Fnv1a f;
  f.u64(vocabulary_.size());
  for (const auto& n : vocabulary_.names()) f.str(n);
  f.u64(sessions_.size());
  for (const auto& s : sessions_) {
    f.str(s.id);
    f.u64(s.actions.size());
    for (ActionId a : s.actions) f.u64(static_cast<std::uint64_t>(a));
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << f.h;
  return os.str();
}

void DatasetBuilder::add(std::string id, std::span<const std::string> actions,
                         std::optional<std::string> user, std::optional<std::string> started_at) {
  Session s;
  s.id = std::move(id);
  s.actions.reserve(actions.size());
  for (const auto& a : actions) s.actions.push_back(vocabulary_.intern(a));
  s.user = std::move(user);
  s.started_at = std::move(started_at);
  sessions_.push_back(std::move(s));
}

SessionDataset DatasetBuilder::build() && {
  return SessionDataset(std::move(vocabulary_), std::move(sessions_));
}

// ---------------------------------------------------------------------------
// Ingestion

LogFormat parse_log_format(std::string_view name) {
  if (name == "jsonl") return LogFormat::kJsonl;
  if (name == "csv") return LogFormat::kCsv;
  throw InvalidArgument("unknown log format '" + std::string(name) + "' (expected jsonl or csv)");
}

SessionDataset ingest(const std::filesystem::path& path, LogFormat format) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  return format == LogFormat::kJsonl ? ingest_jsonl(in) : ingest_csv(in);
}

namespace {

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

SessionDataset ingest_jsonl(std::istream& in) {
  DatasetBuilder builder;
  std::string line;
  std::size_t lineno = 0;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    const auto where = "line " + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError("malformed JSON at " + where + ": " + e.what());
    }
    if (!j.is_object()) throw FormatError("expected an object at " + where);
    if (!j.contains("session_id") || !j["session_id"].is_string())
      throw FormatError("missing string session_id at " + where);
    if (!j.contains("actions") || !j["actions"].is_array())
      throw FormatError("missing actions array at " + where);
    std::vector<std::string> actions;
    for (const auto& a : j["actions"]) {
      if (!a.is_string()) throw FormatError("non-string action at " + where);
      actions.push_back(a.get<std::string>());
    }
    if (actions.empty()) throw FormatError("empty session at line " + std::to_string(lineno));
    std::optional<std::string> user, started;
    if (j.contains("user") && !j["user"].is_null()) {
      if (!j["user"].is_string()) throw FormatError("user must be a string at " + where);
      user = j["user"].get<std::string>();
    }
    if (j.contains("started_at") && !j["started_at"].is_null()) {
      if (!j["started_at"].is_string())
        throw FormatError("started_at must be a string at " + where);
      started = j["started_at"].get<std::string>();
    }
    builder.add(j["session_id"].get<std::string>(), actions, std::move(user), std::move(started));
    ++count;
  }
  if (count == 0) throw FormatError("empty session file");
  return std::move(builder).build();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw FormatError("unterminated quote at line " + std::to_string(lineno));
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace

SessionDataset ingest_csv(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!blank(line)) break;
  }
  if (lineno == 0 || blank(line)) throw FormatError("empty session file");
  const auto header = split_csv_line(line, lineno);
  int col_id = -1, col_action = -1, col_ord = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "session_id") col_id = static_cast<int>(i);
    if (header[i] == "action") col_action = static_cast<int>(i);
    if (header[i] == "ordinal") col_ord = static_cast<int>(i);
  }
  if (col_id < 0 || col_action < 0 || col_ord < 0)
    throw FormatError("CSV header must contain session_id, action, ordinal (line " +
                      std::to_string(lineno) + ")");
  const auto width = static_cast<std::size_t>(std::max({col_id, col_action, col_ord})) + 1;

  DatasetBuilder builder;
  std::map<std::string, bool> seen;
  std::string current_id;
  std::vector<std::pair<long, std::string>> rows;
  std::size_t group_line = 0;
  auto flush = [&] {
    if (rows.empty()) return;
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::string> actions;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].first != static_cast<long>(i))
        throw FormatError("session '" + current_id + "' starting at line " +
                          std::to_string(group_line) + " has non-contiguous ordinals");
      actions.push_back(std::move(rows[i].second));
    }
    builder.add(current_id, actions);
    rows.clear();
  };
  std::size_t data_rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    auto f = split_csv_line(line, lineno);
    if (f.size() < width) throw FormatError("too few columns at line " + std::to_string(lineno));
    const auto& id = f[static_cast<std::size_t>(col_id)];
    const auto& action = f[static_cast<std::size_t>(col_action)];
    long ordinal = 0;
    try {
      std::size_t used = 0;
      ordinal = std::stol(f[static_cast<std::size_t>(col_ord)], &used);
      if (used != f[static_cast<std::size_t>(col_ord)].size()) throw std::invalid_argument("x");
    } catch (const std::exception&) {
      throw FormatError("bad ordinal at line " + std::to_string(lineno));
    }
    if (id.empty() || action.empty())
      throw FormatError("empty session_id or action at line " + std::to_string(lineno));
    if (id != current_id) {
      flush();
      if (seen.contains(id))
        throw FormatError("rows of session '" + id + "' are not grouped (line " +
                          std::to_string(lineno) + ")");
      seen[id] = true;
      current_id = id;
      group_line = lineno;
    }
    rows.emplace_back(ordinal, action);
    ++data_rows;
  }
  flush();
  if (data_rows == 0) throw FormatError("empty session file");
  return std::move(builder).build();
}

void emit_jsonl(const SessionDataset& dataset, std::ostream& out) {
  const auto& vocab = dataset.vocabulary();
  for (const auto& s : dataset.sessions()) {
    json j;
    j["session_id"] = s.id;
    json actions = json::array();
    for (ActionId a : s.actions) actions.push_back(vocab.name(a));
    j["actions"] = std::move(actions);
    if (s.user) j["user"] = *s.user;
    if (s.started_at) j["started_at"] = *s.started_at;
    out << j.dump() << '\n';
  }
}

void emit_jsonl(const SessionDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  emit_jsonl(dataset, out);
}

// ---------------------------------------------------------------------------
// Statistics and splitting

FilterResult filter_short(const SessionDataset& dataset) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (dataset[i].length() >= 2) keep.push_back(i);
  FilterResult r;
  r.removed = dataset.size() - keep.size();
  r.dataset = dataset.select(keep);
  if (dataset.has_splits()) {
    std::vector<Split> labels;
    for (std::size_t i : keep) labels.push_back(dataset.splits()[i]);
    r.dataset = r.dataset.with_splits(std::move(labels));
  }
  return r;
}

LengthStats::LengthStats(const SessionDataset& dataset) {
  if (dataset.empty()) throw InvalidArgument("length statistics need at least one session");
  sorted_.reserve(dataset.size());
  double sum = 0.0;
  for (const auto& s : dataset.sessions()) {
    sorted_.push_back(s.length());
    sum += static_cast<double>(s.length());
  }
  std::sort(sorted_.begin(), sorted_.end());
  mean_ = sum / static_cast<double>(sorted_.size());
}

std::size_t LengthStats::percentile(double p) const {
  if (!(p > 0.0 && p <= 100.0)) throw InvalidArgument("percentile must lie in (0, 100]");
  const double m = static_cast<double>(sorted_.size());
  // Guard against 98/100*m landing a hair above an integer.
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * m - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted_.size());
  return sorted_[rank - 1];
}

LengthStats length_stats(const SessionDataset& dataset) { return LengthStats(dataset); }

SplitCounts split_counts(std::size_t m, const SplitRatios& r) {
  if (r.train < 0 || r.validation < 0 || r.test < 0 ||
      std::abs(r.train + r.validation + r.test - 1.0) > 1e-9)
    throw InvalidArgument("split ratios must be nonnegative and sum to 1");
  const auto floor_of = [m](double ratio) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(m) + 1e-9));
  };
  SplitCounts c;
  c.validation = floor_of(r.validation);
  c.test = floor_of(r.test);
  c.train = m - c.validation - c.test;
  return c;
}

SessionDataset split(const SessionDataset& dataset, const SplitRatios& ratios, std::uint64_t seed) {
  const auto counts = split_counts(dataset.size(), ratios);
  if (dataset.size() < 3) throw InvalidArgument("splitting needs at least 3 sessions");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Split> labels(dataset.size(), Split::kTrain);
  for (std::size_t i = 0; i < counts.validation; ++i) labels[order[i]] = Split::kValidation;
  for (std::size_t i = 0; i < counts.test; ++i) labels[order[counts.validation + i]] = Split::kTest;
  return dataset.with_splits(std::move(labels));
}

// ---------------------------------------------------------------------------
// Synthetic generation

std::size_t SyntheticConfig::session_count() const {
  std::size_t n = 0;
  for (const auto& p : personas) n += p.session_count;
  return n;
}

void SyntheticConfig::validate() const {
  const auto d = action_names.size();
  if (d < 2) throw InvalidArgument("synthetic vocabulary needs at least 2 actions");
  if (personas.empty()) throw InvalidArgument("synthetic config has no personas");
  std::vector<bool> covered(d, false);
  for (std::size_t pi = 0; pi < personas.size(); ++pi) {
    const auto& p = personas[pi];
    const auto tag = "persona " + std::to_string(pi);
    const auto k = p.actions.size();
    if (k == 0) throw InvalidArgument(tag + " has no actions");
    for (ActionId a : p.actions) {
      if (a < 0 || static_cast<std::size_t>(a) >= d)
        throw InvalidArgument(tag + " references an action outside the vocabulary");
      covered[static_cast<std::size_t>(a)] = true;
    }
    if (p.transition.size() != k) throw InvalidArgument(tag + " transition matrix has wrong shape");
    auto stochastic = [&](const std::vector<double>& row, const std::string& what) {
      if (row.size() != k) throw InvalidArgument(tag + " " + what + " has wrong length");
      double sum = 0.0;
      for (double x : row) {
        if (!(x >= 0.0)) throw InvalidArgument(tag + " " + what + " has a negative entry");
        sum += x;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw InvalidArgument(tag + " " + what + " is not stochastic (sums to " +
                              std::to_string(sum) + ")");
    };
    for (std::size_t r = 0; r < k; ++r) stochastic(p.transition[r], "row " + std::to_string(r));
    stochastic(p.start, "start distribution");
  }
  for (std::size_t a = 0; a < d; ++a)
    if (!covered[a])
      throw InvalidArgument("action '" + action_names[a] + "' belongs to no persona");
  if (lengths.short_mean < 1.0 || lengths.long_mean < 1.0 || lengths.long_weight < 0.0 ||
      lengths.long_weight > 1.0 || lengths.max_length < 1)
    throw InvalidArgument("invalid length model");
}

std::vector<ActionId> markov_walk(const Persona& persona, std::size_t length, Rng& rng,
                                  std::optional<ActionId> start) {
  std::vector<ActionId> out;
  if (length == 0) return out;
  out.reserve(length);
  std::size_t state = 0;
  if (start) {
    auto it = std::find(persona.actions.begin(), persona.actions.end(), *start);
    if (it == persona.actions.end()) throw InvalidArgument("start action not in persona");
    state = static_cast<std::size_t>(it - persona.actions.begin());
  } else {
    state = rng.categorical(persona.start);
  }
  out.push_back(persona.actions[state]);
  while (out.size() < length) {
    state = rng.categorical(persona.transition[state]);
    out.push_back(persona.actions[state]);
  }
  return out;
}

namespace {

std::size_t draw_length(const LengthModel& m, Rng& rng) {
  const double mean = rng.bernoulli(m.long_weight) ? m.long_mean : m.short_mean;
  return std::min<std::size_t>(static_cast<std::size_t>(rng.geometric(mean)), m.max_length);
}

std::string session_name(std::size_t i) {
  std::ostringstream os;
  os << 's' << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::vector<int> owner;
  for (std::size_t p = 0; p < config.personas.size(); ++p)
    owner.insert(owner.end(), config.personas[p].session_count, static_cast<int>(p));
  rng.shuffle(owner);

  DatasetBuilder builder;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < owner.size(); ++i) {
    const auto& persona = config.personas[static_cast<std::size_t>(owner[i])];
    const auto walk = markov_walk(persona, draw_length(config.lengths, rng), rng);
    names.clear();
    for (ActionId a : walk) names.push_back(config.action_names[static_cast<std::size_t>(a)]);
    builder.add(session_name(i), names, "user" + std::to_string(rng.below(1 + owner.size() / 10)));
  }
  return SyntheticCorpus{std::move(builder).build(), std::move(owner)};
}

namespace {

std::string action_name(std::size_t i) {
  std::ostringstream os;
  os << "Action" << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

// A sparse-ish random row: a few preferred successors plus a small floor.
std::vector<double> random_row(std::size_t k, Rng& rng) {
  std::vector<double> row(k, 0.05 / static_cast<double>(k));
  const double weights[] = {0.6, 0.25, 0.1};
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  double leftover = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    if (j < k)
      row[idx[j]] += weights[j];
    else
      leftover += weights[j];
  }
  row[idx[0]] += leftover;
  double sum = std::accumulate(row.begin(), row.end(), 0.0);
  for (double& x : row) x /= sum;
  return row;
}

}  // namespace

SyntheticConfig make_persona_config(std::span<const std::size_t> session_counts,
                                    std::size_t actions_per_persona, double overlap,
                                    const LengthModel& lengths, std::uint64_t seed) {
  if (session_counts.empty()) throw InvalidArgument("need at least one persona");
  if (actions_per_persona < 2) throw InvalidArgument("personas need at least 2 actions");
  if (overlap < 0.0 || overlap >= 1.0) throw InvalidArgument("overlap must lie in [0, 1)");
  const auto shared = static_cast<std::size_t>(
      std::lround(overlap * static_cast<double>(actions_per_persona)));
  const auto own = actions_per_persona - shared;
  const auto P = session_counts.size();

  SyntheticConfig cfg;
  cfg.seed = seed;
  cfg.lengths = lengths;
  const auto d = P * own + shared;
  for (std::size_t i = 0; i < d; ++i) cfg.action_names.push_back(action_name(i));

  Rng rng(Rng::derive(seed, 0xC0FFEE));
  for (std::size_t p = 0; p < P; ++p) {
    Persona persona;
    for (std::size_t i = 0; i < own; ++i) persona.actions.push_back(static_cast<ActionId>(p * own + i));
    for (std::size_t i = 0; i < shared; ++i)
      persona.actions.push_back(static_cast<ActionId>(P * own + i));
    const auto k = persona.actions.size();
    for (std::size_t r = 0; r < k; ++r) persona.transition.push_back(random_row(k, rng));
    persona.start = random_row(k, rng);
    persona.session_count = session_counts[p];
    cfg.personas.push_back(std::move(persona));
  }
  return cfg;
}

SyntheticConfig default_synthetic_config(std::uint64_t seed) {
  std::vector<std::size_t> sizes;
  const double ratio = std::pow(3500.0 / 177.0, 1.0 / 12.0);
  for (int i = 0; i < 13; ++i)
    sizes.push_back(static_cast<std::size_t>(std::lround(177.0 * std::pow(ratio, i))));
  LengthModel lengths;
  lengths.short_mean = 9.56;
  lengths.long_mean = 165.0;
  lengths.long_weight = 0.035;
  return make_persona_config(sizes, 28, 0.2, lengths, seed);
}

SyntheticConfig cycle_config(std::size_t d, std::size_t sessions, const LengthModel& lengths,
                             std::uint64_t seed) {
  if (d < 2) throw InvalidArgument("cycle needs at least 2 actions");
  SyntheticConfig cfg;
  cfg.seed = seed;
  cfg.lengths = lengths;
  Persona p;
  for (std::size_t i = 0; i < d; ++i) {
    cfg.action_names.push_back(std::string(1, static_cast<char>('A' + i % 26)) +
                               (i >= 26 ? std::to_string(i / 26) : ""));
    p.actions.push_back(static_cast<ActionId>(i));
    std::vector<double> row(d, 0.0);
    row[(i + 1) % d] = 1.0;
    p.transition.push_back(std::move(row));
  }
  p.start.assign(d, 1.0 / static_cast<double>(d));
  p.session_count = sessions;
  cfg.personas.push_back(std::move(p));
  return cfg;
}

void write_ground_truth(const SyntheticCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t i = 0; i < corpus.dataset.size(); ++i) {
    json j{{"session_id", corpus.dataset[i].id}, {"persona", corpus.persona[i]}};
    out << j.dump() << '\n';
  }
}

std::vector<int> read_ground_truth(const SessionDataset& dataset, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::unordered_map<std::string, int> label;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    try {
      auto j = json::parse(line);
      label[j.at("session_id").get<std::string>()] = j.at("persona").get<int>();
    } catch (const json::exception& e) {
      throw FormatError("malformed ground truth at line " + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  std::vector<int> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset.sessions()) {
    auto it = label.find(s.id);
    if (it == label.end()) throw FormatError("no ground truth for session '" + s.id + "'");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace misuse
