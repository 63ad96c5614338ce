#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "misuse/clusterer.hpp"
#include "misuse/corpus.hpp"
#include "misuse/pipeline.hpp"

namespace misuse {

// One row of the cluster-vs-global comparison.
struct ComparisonRow {
  ClusterId cluster = 0;
  std::string name;
  std::size_t size = 0;
  double own_test_accuracy = 0.0;
  double mean_other_test_accuracy = 0.0;
  double global_model_accuracy = 0.0;
  double size_matched_global_accuracy = 0.0;
  double own_test_loss = 0.0;
  double mean_other_test_loss = 0.0;
  double global_model_loss = 0.0;
  double size_matched_global_loss = 0.0;
};

// Model (row) evaluated on a cluster's test set (column).
struct CrossMatrix {
  std::vector<ClusterId> clusters;  // ascending size
  std::vector<std::vector<double>> accuracy, loss, likelihood;
};

struct RandomBaselineRow {
  std::string model;  // cluster id or "global"
  double test_likelihood = 0.0;
  double random_likelihood = 0.0;
  double test_loss = 0.0;
  double random_loss = 0.0;
};

struct Evaluation {
  std::vector<ComparisonRow> rows;  // ascending cluster size
  CrossMatrix cross;
  std::vector<RandomBaselineRow> random;
  std::size_t vocabulary_size = 0;
};

struct EvalOptions {
  std::uint64_t seed = 1;
  std::size_t random_sessions = 1000;
  std::size_t random_min_length = 5;
  std::size_t random_max_length = 25;
  std::size_t trace_sessions = 3;  // longest test sessions traced online
  std::size_t vote_horizon = 15;
};

// Needs the global and size-matched baselines for the corresponding columns;
// missing baselines are reported as NaN.
Evaluation evaluate_cluster_vs_global(const TrainedSet& trained, const EvalOptions& options);

// Fraction of test sessions whose full-session route() picks their own cluster.
double routing_accuracy(const TrainedSet& trained);

// Writes every figure table under `dir`:
//   cluster_vs_global.csv, normality.csv, random_baseline.csv,
//   online_traces.csv, ocsvm_traces.csv, lengths.csv, loss_curves.csv, run.json
// Returns the written file names.
std::vector<std::string> write_figures(const TrainedSet& trained, const SessionDataset& corpus,
                                       const Evaluation& evaluation, const EvalOptions& options,
                                       const std::filesystem::path& dir);

std::string comparison_csv(const std::vector<ComparisonRow>& rows);

// ---------------------------------------------------------------------------
// Planted benchmark: four personas of sizes 150, 400, 1200 and 3000 with 20%
// shared vocabulary. Clusters are the personas themselves.

struct BenchmarkOptions {
  std::uint64_t seed = 7;
  std::vector<std::size_t> sizes{150, 400, 1200, 3000};
  std::size_t actions_per_persona = 10;
  double overlap = 0.2;
  TrainOptions train;  // hidden defaults to 64 here
  EvalOptions eval;
  BenchmarkOptions();
};

struct BenchmarkResult {
  SyntheticCorpus corpus;
  ClusterAssignment assignment;
  TrainedSet trained;
  Evaluation evaluation;
  double routing_accuracy = 0.0;  // held-out test sessions vs persona labels
};

SyntheticConfig planted4_config(const BenchmarkOptions& options);

// Persona labels as a cluster assignment (cluster id = persona index).
ClusterAssignment ground_truth_assignment(const SyntheticCorpus& corpus);

BenchmarkResult run_benchmark(const BenchmarkOptions& options);

}  // namespace misuse
