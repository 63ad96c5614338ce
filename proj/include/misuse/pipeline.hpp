#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "misuse/clusterer.hpp"
#include "misuse/corpus.hpp"
#include "misuse/lstm.hpp"
#include "misuse/ocsvm.hpp"
#include "misuse/scoring.hpp"

namespace misuse {

// Fixed relative artifact names under a working directory.
class Workdir {
 public:
  explicit Workdir(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path dataset() const { return root_ / "dataset.jsonl"; }
  std::filesystem::path ground_truth() const { return root_ / "ground_truth.jsonl"; }
  std::filesystem::path ensemble() const { return root_ / "ensemble.json"; }
  std::filesystem::path selection() const { return root_ / "selection.json"; }
  std::filesystem::path assignment() const { return root_ / "assignment.json"; }
  std::filesystem::path models() const { return root_ / "models"; }
  std::filesystem::path eval() const { return root_ / "eval"; }

  bool has_models() const;
  void create() const;

 private:
  std::filesystem::path root_;
};

// Whole-file helpers; writes go through a temporary file and a rename.
std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

struct TrainOptions {
  std::uint64_t seed = 1;
  SplitRatios ratios;
  OcSvmParams svm;
  std::size_t hidden = 256;
  double dropout = 0.4;
  TrainConfig lm;  // its seed is replaced by one derived from `seed` per model
  bool baselines = true;  // global model plus size-matched global subsets
  // stage name, fraction of the whole job done
  std::function<void(const std::string&, double)> progress;
};

struct ClusterSplit {
  ClusterId id = 0;
  std::string name;
  std::size_t size = 0;  // sessions in the cluster
  SessionDataset train, validation, test;
};

// Per-cluster 70/15/15 splits, each seeded independently.
std::vector<ClusterSplit> split_clusters(const SessionDataset& dataset,
                                         const ClusterAssignment& assignment,
                                         const SplitRatios& ratios, std::uint64_t seed);

struct TrainedModel {
  LstmModel model;
  std::vector<EpochStats> curve;
};

struct TrainedCluster {
  ClusterId id = 0;
  std::string name;
  OcSvmModel svm;
  TrainedModel lm;
  double validation_likelihood = 0.0;
};

struct TrainedSet {
  Vocabulary vocabulary;
  std::uint64_t seed = 0;
  std::vector<ClusterSplit> splits;      // ascending cluster id
  std::vector<TrainedCluster> clusters;  // parallel to splits
  std::optional<TrainedModel> global;
  std::map<ClusterId, TrainedModel> size_matched;

  ModelBundle bundle() const;
};

// Windows of every session with at least two actions.
std::vector<TrainingWindow> windows_of(const SessionDataset& dataset);

TrainedSet train_all(const SessionDataset& dataset, const ClusterAssignment& assignment,
                     const TrainOptions& options);

// Writes the model directory next to the old one and swaps it in with renames.
void save_trained(const TrainedSet& trained, const std::filesystem::path& models_dir);

// Throws MissingArtifact("no trained models") when nothing has been trained.
ModelBundle load_bundle(const std::filesystem::path& models_dir);
TrainedSet load_trained(const std::filesystem::path& models_dir, const SessionDataset& dataset);

}  // namespace misuse
