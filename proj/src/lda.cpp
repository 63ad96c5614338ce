#include "misuse/lda.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "misuse/error.hpp"
#include "misuse/random.hpp"
#include "misuse/tsne.hpp"

namespace misuse {

using nlohmann::json;

TopicModel fit_lda(const SessionDataset& dataset, const LdaParams& params,
                   const GibbsObserver& observer) {
  if (dataset.empty()) throw InvalidArgument("cannot fit LDA on an empty dataset");
  const std::size_t K = params.topics;
  const double alpha = params.effective_alpha();
  const double beta = params.beta;
  if (K < 1) throw InvalidArgument("LDA needs at least one topic");
  if (!(alpha > 0.0) || !(beta > 0.0)) throw InvalidArgument("alpha and beta must be positive");
  if (params.iterations < 1) throw InvalidArgument("LDA needs at least one iteration");

  const std::size_t d = dataset.vocabulary().size();
  const std::size_t m = dataset.size();
  const double dbeta = static_cast<double>(d) * beta;

  std::vector<std::uint32_t> topic_action(K * d, 0);
  std::vector<std::uint32_t> doc_topic(m * K, 0);
  std::vector<std::uint32_t> topic_total(K, 0);
  std::vector<std::vector<std::uint32_t>> assignment(m);

  Rng rng(params.seed);
  std::uint64_t tokens = 0;
  for (std::size_t doc = 0; doc < m; ++doc) {
    const auto& actions = dataset[doc].actions;
    assignment[doc].resize(actions.size());
    for (std::size_t i = 0; i < actions.size(); ++i) {
      const auto z = static_cast<std::uint32_t>(rng.below(K));
      assignment[doc][i] = z;
      ++topic_action[z * d + static_cast<std::size_t>(actions[i])];
      ++doc_topic[doc * K + z];
      ++topic_total[z];
      ++tokens;
    }
  }

  std::vector<double> weights(K);
  for (std::size_t iter = 0; iter < params.iterations; ++iter) {
    for (std::size_t doc = 0; doc < m; ++doc) {
      const auto& actions = dataset[doc].actions;
      auto* dt = &doc_topic[doc * K];
      for (std::size_t i = 0; i < actions.size(); ++i) {
        const auto w = static_cast<std::size_t>(actions[i]);
        std::uint32_t z = assignment[doc][i];
        --topic_action[z * d + w];
        --dt[z];
        --topic_total[z];
        double total = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          total += (dt[k] + alpha) * (topic_action[k * d + w] + beta) / (topic_total[k] + dbeta);
          weights[k] = total;
        }
        const double u = rng.uniform() * total;
        z = static_cast<std::uint32_t>(
            std::upper_bound(weights.begin(), weights.end(), u) - weights.begin());
        if (z >= K) z = static_cast<std::uint32_t>(K - 1);
        assignment[doc][i] = z;
        ++topic_action[z * d + w];
        ++dt[z];
        ++topic_total[z];
      }
    }
    if (observer) {
      GibbsCounts c;
      c.iteration = iter + 1;
      c.tokens = tokens;
      for (auto v : topic_action) c.topic_action_total += v;
      for (auto v : doc_topic) c.doc_topic_total += v;
      for (auto v : topic_total) c.topic_total += v;
      observer(c);
    }
  }

  TopicModel model;
  model.topics = K;
  model.alpha = alpha;
  model.beta = beta;
  model.seed = params.seed;
  model.iterations = params.iterations;
  model.phi = RowMatrix(K, d);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t w = 0; w < d; ++w)
      model.phi(k, w) = (topic_action[k * d + w] + beta) / (topic_total[k] + dbeta);
  model.theta = RowMatrix(m, K);
  const double kalpha = static_cast<double>(K) * alpha;
  for (std::size_t doc = 0; doc < m; ++doc) {
    const double n = static_cast<double>(dataset[doc].length());
    for (std::size_t k = 0; k < K; ++k)
      model.theta(doc, k) = (doc_topic[doc * K + k] + alpha) / (n + kalpha);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Ensemble

std::size_t LdaEnsemble::topic_count() const {
  std::size_t n = 0;
  for (const auto& r : runs) n += r.topics;
  return n;
}

std::vector<TopicRef> LdaEnsemble::all_topics() const {
  std::vector<TopicRef> out;
  for (std::size_t r = 0; r < runs.size(); ++r)
    for (std::size_t t = 0; t < runs[r].topics; ++t) out.push_back({r, t});
  return out;
}

void LdaEnsemble::check(const TopicRef& ref) const {
  if (ref.run >= runs.size() || ref.topic >= runs[ref.run].topics)
    throw InvalidArgument("topic (" + std::to_string(ref.run) + ", " + std::to_string(ref.topic) +
                          ") is not in the ensemble");
}

std::span<const double> LdaEnsemble::phi(const TopicRef& ref) const {
  check(ref);
  return runs[ref.run].phi.row(ref.topic);
}

LdaEnsemble fit_ensemble(const SessionDataset& dataset, const EnsembleParams& params) {
  if (params.topic_counts.empty()) throw InvalidArgument("K list must be nonempty");
  if (params.seeds_per_k < 1) throw InvalidArgument("need at least one seed per K");
  std::vector<LdaParams> jobs;
  for (std::size_t ki = 0; ki < params.topic_counts.size(); ++ki)
    for (std::size_t s = 0; s < params.seeds_per_k; ++s) {
      LdaParams p;
      p.topics = params.topic_counts[ki];
      p.alpha = params.alpha;
      p.beta = params.beta;
      p.iterations = params.iterations;
      p.seed = Rng::derive(params.seed, ki * 1000 + s);
      jobs.push_back(p);
    }

  std::size_t workers = params.workers ? params.workers : std::thread::hardware_concurrency();
  workers = std::max<std::size_t>(1, workers);
  LdaEnsemble ensemble;
  ensemble.corpus_fingerprint = dataset.fingerprint();
  ensemble.runs.resize(jobs.size());
  // Runs are independent; results land in their fixed slots, so the worker
  // count never affects the output.
  for (std::size_t start = 0; start < jobs.size(); start += workers) {
    std::vector<std::future<TopicModel>> batch;
    const std::size_t end = std::min(jobs.size(), start + workers);
    for (std::size_t j = start; j < end; ++j)
      batch.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred,
                                 [&dataset, p = jobs[j]] { return fit_lda(dataset, p); }));
    for (std::size_t j = start; j < end; ++j) ensemble.runs[j] = batch[j - start].get();
  }
  return ensemble;
}

// ---------------------------------------------------------------------------
// Topic geometry

std::size_t shared_action_count(const TopicRef& a, const TopicRef& b, const LdaEnsemble& ensemble,
                                double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw InvalidArgument("membership threshold must lie in (0, 1]");
  const auto pa = ensemble.phi(a);
  const auto pb = ensemble.phi(b);
  std::size_t n = 0;
  for (std::size_t w = 0; w < pa.size(); ++w)
    if (pa[w] >= threshold && pb[w] >= threshold) ++n;
  return n;
}

std::size_t fan_size(const TopicRef& t, const LdaEnsemble& ensemble, double threshold) {
  return shared_action_count(t, t, ensemble, threshold);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("distributions differ in length");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double mid = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) js += 0.5 * p[i] * std::log(p[i] / mid);
    if (q[i] > 0.0) js += 0.5 * q[i] * std::log(q[i] / mid);
  }
  return std::max(js, 0.0);
}

TopicRef medoid_topic(std::span<const TopicRef> selection, const LdaEnsemble& ensemble) {
  if (selection.empty()) throw InvalidArgument("medoid of an empty selection");
  std::vector<TopicRef> order(selection.begin(), selection.end());
  for (const auto& t : order) ensemble.check(t);
  std::sort(order.begin(), order.end());
  TopicRef best = order.front();
  double best_cost = std::numeric_limits<double>::infinity();
  for (const auto& cand : order) {
    double cost = 0.0;
    for (const auto& other : order) cost += js_divergence(ensemble.phi(cand), ensemble.phi(other));
    if (cost < best_cost) {
      best_cost = cost;
      best = cand;
    }
  }
  return best;
}

std::vector<ProjectedTopic> project_topics(const LdaEnsemble& ensemble, const ProjectionParams& params) {
  const auto topics = ensemble.all_topics();
  const std::size_t n = topics.size();
  if (n < 3) throw InvalidArgument("projection needs at least 3 topics");
  if (!(params.perplexity > 0.0) || params.perplexity >= static_cast<double>(n))
    throw InvalidArgument("perplexity " + std::to_string(params.perplexity) +
                          " too large for " + std::to_string(n) + " topics");
  RowMatrix dist(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = js_divergence(ensemble.phi(topics[i]), ensemble.phi(topics[j]));
      dist(i, j) = dist(j, i) = v;
    }
  TsneParams tp;
  tp.perplexity = params.perplexity;
  tp.iterations = params.iterations;
  tp.exaggeration_iterations = std::min<std::size_t>(250, params.iterations / 4);
  tp.seed = params.seed;
  const RowMatrix Y = tsne_embed(dist, tp);

  double scale = 0.0;
  for (double v : Y.data) scale = std::max(scale, std::abs(v));
  std::vector<ProjectedTopic> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = scale > 0.0 ? Y(i, 0) / scale : 0.0;
    const double y = scale > 0.0 ? Y(i, 1) / scale : 0.0;
    out.push_back({topics[i], std::clamp(x, -1.0, 1.0), std::clamp(y, -1.0, 1.0)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json matrix_to_json(const RowMatrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows; ++r) {
    const auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

RowMatrix matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError(what + " must be an array of rows");
  RowMatrix m;
  m.rows = j.size();
  m.cols = m.rows ? j[0].size() : 0;
  m.data.reserve(m.rows * m.cols);
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != m.cols) throw FormatError(what + " is ragged");
    for (const auto& v : row) m.data.push_back(v.get<double>());
  }
  return m;
}

}  // namespace

std::string ensemble_to_json(const LdaEnsemble& ensemble) {
  json j;
  j["version"] = 1;
  json runs = json::array();
  for (const auto& r : ensemble.runs) {
    json run;
    run["K"] = r.topics;
    run["seed"] = r.seed;
    run["alpha"] = r.alpha;
    run["beta"] = r.beta;
    run["iterations"] = r.iterations;
    run["phi"] = matrix_to_json(r.phi);
    run["theta"] = matrix_to_json(r.theta);
    runs.push_back(std::move(run));
  }
  j["runs"] = std::move(runs);
  j["corpus_fingerprint"] = ensemble.corpus_fingerprint;
  return j.dump();
}

LdaEnsemble ensemble_from_json(const std::string& text) {
  LdaEnsemble e;
  try {
    const json j = json::parse(text);
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported ensemble version");
    e.corpus_fingerprint = j.at("corpus_fingerprint").get<std::string>();
    for (const auto& run : j.at("runs")) {
      TopicModel m;
      m.topics = run.at("K").get<std::size_t>();
      m.seed = run.at("seed").get<std::uint64_t>();
      m.alpha = run.at("alpha").get<double>();
      m.beta = run.at("beta").get<double>();
      m.iterations = run.value("iterations", std::size_t{0});
      m.phi = matrix_from_json(run.at("phi"), "phi");
      m.theta = matrix_from_json(run.at("theta"), "theta");
      if (m.phi.rows != m.topics || m.theta.cols != m.topics)
        throw FormatError("run matrices disagree with K");
      e.runs.push_back(std::move(m));
    }
  } catch (const json::exception& ex) {
    throw FormatError(std::string("malformed ensemble: ") + ex.what());
  }
  return e;
}

void save_ensemble(const LdaEnsemble& ensemble, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << ensemble_to_json(ensemble) << '\n';
}

LdaEnsemble load_ensemble(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("no ensemble at " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ensemble_from_json(ss.str());
}

}  // namespace misuse
