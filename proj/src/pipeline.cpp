#include "misuse/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "misuse/error.hpp"
#include "misuse/random.hpp"

namespace misuse {

namespace fs = std::filesystem;
using nlohmann::json;

bool Workdir::has_models() const { return fs::exists(models() / "manifest.json"); }

void Workdir::create() const { fs::create_directories(root_); }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << contents;
    if (!out.flush()) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

// Seed streams; every model draws from its own derived generator.
constexpr std::uint64_t kSplitStream = 100;
constexpr std::uint64_t kInitStream = 1000;
constexpr std::uint64_t kTrainStream = 2000;
constexpr std::uint64_t kGlobalStream = 3000;
constexpr std::uint64_t kSubsetStream = 4000;

SessionDataset concat(const Vocabulary& vocabulary, const std::vector<const SessionDataset*>& parts) {
  std::vector<Session> sessions;
  for (const auto* p : parts) sessions.insert(sessions.end(), p->sessions().begin(), p->sessions().end());
  return SessionDataset(vocabulary, std::move(sessions));
}

SessionDataset take_random(const SessionDataset& pool, std::size_t count, Rng& rng) {
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  return pool.select(order);
}

double mean_likelihood(const LstmModel& model, const SessionDataset& sessions) {
  const auto scorable = filter_short(sessions).dataset;
  if (scorable.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : score_sessions(model, scorable)) total += s.likelihood;
  return total / static_cast<double>(scorable.size());
}

}  // namespace

std::vector<ClusterSplit> split_clusters(const SessionDataset& dataset,
                                         const ClusterAssignment& assignment,
                                         const SplitRatios& ratios, std::uint64_t seed) {
  assignment.validate(dataset);
  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < dataset.size(); ++i) position.emplace(dataset[i].id, i);
  std::vector<ClusterSplit> out;
  for (const auto& c : assignment.clusters) {
    std::vector<std::size_t> members;
    for (const auto& id : c.sessions) members.push_back(position.at(id));
    std::sort(members.begin(), members.end());
    if (members.size() < 3)
      throw InvalidArgument("cluster " + std::to_string(c.id) + " has " + std::to_string(members.size()) +
                            " sessions; at least 3 are needed for train/validation/test splits");
    const auto labelled =
        split(dataset.select(members), ratios, Rng::derive(seed, kSplitStream + static_cast<std::uint64_t>(c.id)));
    ClusterSplit s;
    s.id = c.id;
    s.name = c.name;
    s.size = members.size();
    s.train = labelled.subset(Split::kTrain);
    s.validation = labelled.subset(Split::kValidation);
    s.test = labelled.subset(Split::kTest);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TrainingWindow> windows_of(const SessionDataset& dataset) { return encode_windows(dataset); }

ModelBundle TrainedSet::bundle() const {
  ModelBundle b;
  b.vocabulary = vocabulary;
  for (const auto& c : clusters) {
    b.routers.push_back({c.id, c.svm});
    b.models.emplace(c.id, c.lm.model);
    b.validation_likelihood.emplace(c.id, c.validation_likelihood);
  }
  return b;
}

TrainedSet train_all(const SessionDataset& dataset, const ClusterAssignment& assignment,
                     const TrainOptions& options) {
  if (dataset.vocabulary().size() < 2)
    throw InvalidArgument("a vocabulary of at least two actions is needed to train language models");
  TrainedSet out;
  out.vocabulary = dataset.vocabulary();
  out.seed = options.seed;
  out.splits = split_clusters(dataset, assignment, options.ratios, options.seed);

  const std::size_t k = out.splits.size();
  const double total_steps = static_cast<double>(2 * k + (options.baselines ? k + 1 : 0));
  double done = 0.0;
  const auto report = [&](const std::string& stage, double fraction_of_step) {
    if (options.progress) options.progress(stage, (done + fraction_of_step) / total_steps);
  };
  const LstmShape shape{dataset.vocabulary().size(), options.hidden, options.dropout};
  const auto fit_lm = [&](const SessionDataset& train_set, const SessionDataset& validation_set,
                          std::uint64_t init_seed, std::uint64_t train_seed, const std::string& stage) {
    const auto tw = windows_of(train_set);
    const auto vw = windows_of(validation_set);
    if (tw.empty()) throw InvalidArgument(stage + ": no training session has two or more actions");
    TrainConfig cfg = options.lm;
    cfg.seed = train_seed;
    auto result = train(LstmModel::initialized(shape, init_seed), tw, vw, cfg, [&](const EpochStats& e) {
      report(stage, static_cast<double>(e.epoch) / static_cast<double>(cfg.max_epochs));
    });
    done += 1.0;
    return TrainedModel{std::move(result.model), std::move(result.curve)};
  };

  const std::size_t d = dataset.vocabulary().size();
  for (const auto& s : out.splits) {
    const auto cid = static_cast<std::uint64_t>(s.id);
    TrainedCluster tc;
    tc.id = s.id;
    tc.name = s.name;
    report("ocsvm cluster " + std::to_string(s.id), 0.0);
    std::vector<FeatureVector> features;
    for (const auto& session : s.train.sessions()) features.push_back(featurize(session.actions, d));
    if (features.size() < 2)
      throw InvalidArgument("cluster " + std::to_string(s.id) + " has fewer than two training sessions");
    tc.svm = train_ocsvm(features, options.svm);
    done += 1.0;
    tc.lm = fit_lm(s.train, s.validation, Rng::derive(options.seed, kInitStream + cid),
                   Rng::derive(options.seed, kTrainStream + cid), "lstm cluster " + std::to_string(s.id));
    const auto& held = s.validation.empty() ? s.train : s.validation;
    tc.validation_likelihood = mean_likelihood(tc.lm.model, held);
    out.clusters.push_back(std::move(tc));
  }

  if (options.baselines) {
    std::vector<const SessionDataset*> trains, validations;
    for (const auto& s : out.splits) {
      trains.push_back(&s.train);
      validations.push_back(&s.validation);
    }
    const auto global_train = concat(out.vocabulary, trains);
    const auto global_validation = concat(out.vocabulary, validations);
    out.global = fit_lm(global_train, global_validation, Rng::derive(options.seed, kGlobalStream),
                        Rng::derive(options.seed, kGlobalStream + 1), "lstm global");
    for (const auto& s : out.splits) {
      const auto cid = static_cast<std::uint64_t>(s.id);
      Rng pick(Rng::derive(options.seed, kSubsetStream + 10 * cid));
      const auto sub_train = take_random(global_train, s.train.size(), pick);
      const auto sub_validation = take_random(global_validation, s.validation.size(), pick);
      out.size_matched.emplace(
          s.id, fit_lm(sub_train, sub_validation, Rng::derive(options.seed, kSubsetStream + 10 * cid + 1),
                       Rng::derive(options.seed, kSubsetStream + 10 * cid + 2),
                       "lstm size-matched " + std::to_string(s.id)));
    }
  }
  if (options.progress) options.progress("done", 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::string splits_jsonl(const std::vector<ClusterSplit>& splits) {
  std::ostringstream os;
  for (const auto& s : splits) {
    const std::pair<const SessionDataset*, Split> parts[] = {
        {&s.train, Split::kTrain}, {&s.validation, Split::kValidation}, {&s.test, Split::kTest}};
    for (const auto& [ds, label] : parts)
      for (const auto& session : ds->sessions())
        os << json{{"session_id", session.id}, {"cluster", s.id}, {"split", to_string(label)}}.dump() << '\n';
  }
  return os.str();
}

void write_model(const fs::path& dir, const std::string& stem, const TrainedModel& m) {
  write_file_atomic(dir / ("lstm_" + stem + ".json"), lstm_to_json(m.model));
  write_file_atomic(dir / ("loss_" + stem + ".csv"), loss_curve_csv(m.curve));
}

json read_manifest(const fs::path& models_dir) {
  const auto path = models_dir / "manifest.json";
  if (!fs::exists(path)) throw MissingArtifact("no trained models in " + models_dir.string());
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError("malformed model manifest: " + std::string(e.what()));
  }
}

std::vector<EpochStats> read_curve(const fs::path& path) {
  std::vector<EpochStats> curve;
  if (!fs::exists(path)) return curve;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochStats e;
    std::istringstream row(line);
    std::string field;
    std::getline(row, field, ',');
    e.epoch = std::stoul(field);
    std::getline(row, field, ',');
    e.train_loss = std::stod(field);
    field.clear();
    std::getline(row, field, ',');
    e.validation_loss = field.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(field);
    curve.push_back(e);
  }
  return curve;
}

TrainedModel read_model(const fs::path& dir, const std::string& stem) {
  return {lstm_from_json(read_file(dir / ("lstm_" + stem + ".json"))), read_curve(dir / ("loss_" + stem + ".csv"))};
}

}  // namespace

void save_trained(const TrainedSet& trained, const fs::path& models_dir) {
  const fs::path staging = models_dir.string() + ".new";
  const fs::path retired = models_dir.string() + ".old";
  fs::remove_all(staging);
  fs::create_directories(staging);

  json clusters = json::array();
  for (std::size_t i = 0; i < trained.clusters.size(); ++i) {
    const auto& c = trained.clusters[i];
    const auto& s = trained.splits[i];
    const auto stem = std::to_string(c.id);
    write_file_atomic(staging / ("ocsvm_" + stem + ".json"), ocsvm_to_json(c.svm));
    write_model(staging, stem, c.lm);
    clusters.push_back({{"id", c.id},
                        {"name", c.name},
                        {"sessions", s.size},
                        {"train", s.train.size()},
                        {"validation", s.validation.size()},
                        {"test", s.test.size()},
                        {"validation_likelihood", c.validation_likelihood},
                        {"epochs", c.lm.model.metadata.epochs},
                        {"best_epoch", c.lm.model.metadata.best_epoch}});
  }
  if (trained.global) write_model(staging, "global", *trained.global);
  for (const auto& [id, m] : trained.size_matched) write_model(staging, "subset_" + std::to_string(id), m);
  write_file_atomic(staging / "splits.jsonl", splits_jsonl(trained.splits));

  json manifest{{"version", 1},
                {"seed", trained.seed},
                {"vocabulary", trained.vocabulary.names()},
                {"clusters", clusters},
                {"global", trained.global.has_value()},
                {"size_matched", !trained.size_matched.empty()}};
  write_file_atomic(staging / "manifest.json", manifest.dump(2) + "\n");

  fs::remove_all(retired);
  if (fs::exists(models_dir)) fs::rename(models_dir, retired);
  fs::rename(staging, models_dir);
  fs::remove_all(retired);
}

ModelBundle load_bundle(const fs::path& models_dir) {
  const json manifest = read_manifest(models_dir);
  ModelBundle b;
  try {
    b.vocabulary = Vocabulary(manifest.at("vocabulary").get<std::vector<std::string>>());
    for (const auto& c : manifest.at("clusters")) {
      const auto id = c.at("id").get<ClusterId>();
      const auto stem = std::to_string(id);
      b.routers.push_back({id, ocsvm_from_json(read_file(models_dir / ("ocsvm_" + stem + ".json")))});
      b.models.emplace(id, lstm_from_json(read_file(models_dir / ("lstm_" + stem + ".json"))));
      b.validation_likelihood.emplace(id, c.at("validation_likelihood").get<double>());
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed model manifest: " + std::string(e.what()));
  }
  std::sort(b.routers.begin(), b.routers.end(), [](const auto& x, const auto& y) { return x.cluster < y.cluster; });
  b.validate();
  return b;
}

TrainedSet load_trained(const fs::path& models_dir, const SessionDataset& dataset) {
  const json manifest = read_manifest(models_dir);
  const auto bundle = load_bundle(models_dir);
  if (!(bundle.vocabulary == dataset.vocabulary()))
    throw InvalidArgument("trained models were built on a different vocabulary");

  TrainedSet out;
  out.vocabulary = bundle.vocabulary;
  out.seed = manifest.value("seed", std::uint64_t{0});

  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < dataset.size(); ++i) position.emplace(dataset[i].id, i);
  std::map<ClusterId, std::array<std::vector<std::size_t>, 3>> members;
  {
    std::istringstream in(read_file(models_dir / "splits.jsonl"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      const auto id = j.at("session_id").get<std::string>();
      const auto it = position.find(id);
      if (it == position.end()) throw InvalidArgument("split file names unknown session '" + id + "'");
      const auto label = j.at("split").get<std::string>();
      const int slot = label == "train" ? 0 : label == "validation" ? 1 : label == "test" ? 2 : -1;
      if (slot < 0) throw FormatError("unknown split label '" + label + "'");
      members[j.at("cluster").get<ClusterId>()][static_cast<std::size_t>(slot)].push_back(it->second);
    }
  }

  for (const auto& c : manifest.at("clusters")) {
    const auto id = c.at("id").get<ClusterId>();
    ClusterSplit s;
    s.id = id;
    s.name = c.value("name", std::string{});
    s.size = c.at("sessions").get<std::size_t>();
    auto& m = members[id];
    s.train = dataset.select(m[0]);
    s.validation = dataset.select(m[1]);
    s.test = dataset.select(m[2]);
    out.splits.push_back(std::move(s));
    TrainedCluster tc;
    tc.id = id;
    tc.name = out.splits.back().name;
    for (const auto& r : bundle.routers)
      if (r.cluster == id) tc.svm = r.model;
    tc.lm = read_model(models_dir, std::to_string(id));
    tc.validation_likelihood = bundle.validation_likelihood.at(id);
    out.clusters.push_back(std::move(tc));
  }
  if (manifest.value("global", false))
    out.global = read_model(models_dir, "global");
  if (manifest.value("size_matched", false))
    for (const auto& s : out.splits)
      out.size_matched.emplace(s.id, read_model(models_dir, "subset_" + std::to_string(s.id)));
  return out;
}

}  // namespace misuse
