#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "misuse/corpus.hpp"

namespace misuse {

// Dense row-major matrix of doubles; the only matrix type the topic code needs.
struct RowMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  RowMatrix() = default;
  RowMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  bool operator==(const RowMatrix&) const = default;
};

struct LdaParams {
  std::size_t topics = 10;  // K
  double alpha = -1.0;      // <= 0 selects 50 / K
  double beta = 0.01;
  std::size_t iterations = 1000;
  std::uint64_t seed = 1;

  double effective_alpha() const { return alpha > 0.0 ? alpha : 50.0 / static_cast<double>(topics); }
};

struct TopicModel {
  std::size_t topics = 0;
  double alpha = 0.0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  RowMatrix phi;    // K x d topic-action probabilities
  RowMatrix theta;  // m x K session-topic probabilities

  bool operator==(const TopicModel&) const = default;
};

// Count totals after each full Gibbs sweep; all three must agree.
struct GibbsCounts {
  std::size_t iteration = 0;
  std::uint64_t topic_action_total = 0;
  std::uint64_t doc_topic_total = 0;
  std::uint64_t topic_total = 0;
  std::uint64_t tokens = 0;
};

using GibbsObserver = std::function<void(const GibbsCounts&)>;

// Collapsed Gibbs sampling with sessions as documents and actions as words.
TopicModel fit_lda(const SessionDataset& dataset, const LdaParams& params,
                   const GibbsObserver& observer = {});

struct TopicRef {
  std::size_t run = 0;
  std::size_t topic = 0;

  auto operator<=>(const TopicRef&) const = default;
};

struct LdaEnsemble {
  std::vector<TopicModel> runs;
  std::string corpus_fingerprint;

  std::size_t topic_count() const;
  std::vector<TopicRef> all_topics() const;
  std::span<const double> phi(const TopicRef& ref) const;  // throws if out of range
  void check(const TopicRef& ref) const;
};

struct EnsembleParams {
  std::vector<std::size_t> topic_counts{5, 10, 15, 20};
  std::size_t seeds_per_k = 2;
  double alpha = -1.0;  // <= 0 selects 50 / K per run
  double beta = 0.01;
  std::size_t iterations = 1000;
  std::uint64_t seed = 1;
  std::size_t workers = 0;  // 0 = hardware concurrency
};

// One run per (K, seed) pair, ordered by K then seed index.
LdaEnsemble fit_ensemble(const SessionDataset& dataset, const EnsembleParams& params);

// Number of actions whose probability reaches `threshold` in both topics.
std::size_t shared_action_count(const TopicRef& a, const TopicRef& b, const LdaEnsemble& ensemble,
                                double threshold);
// Number of actions belonging to a topic at the threshold (its chord fan size).
std::size_t fan_size(const TopicRef& t, const LdaEnsemble& ensemble, double threshold);

// Jensen-Shannon divergence in nats; symmetric and bounded by ln 2.
double js_divergence(std::span<const double> p, std::span<const double> q);

// Member minimizing the summed JS divergence to the rest of the selection.
TopicRef medoid_topic(std::span<const TopicRef> selection, const LdaEnsemble& ensemble);

struct ProjectedTopic {
  TopicRef ref;
  double x = 0.0;
  double y = 0.0;
};

struct ProjectionParams {
  double perplexity = 5.0;
  std::size_t iterations = 1000;
  std::uint64_t seed = 1;
};

std::vector<ProjectedTopic> project_topics(const LdaEnsemble& ensemble, const ProjectionParams& params);

std::string ensemble_to_json(const LdaEnsemble& ensemble);
LdaEnsemble ensemble_from_json(const std::string& text);
void save_ensemble(const LdaEnsemble& ensemble, const std::filesystem::path& path);
LdaEnsemble load_ensemble(const std::filesystem::path& path);

}  // namespace misuse
