#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "misuse/lda.hpp"
#include "misuse/pipeline.hpp"
#include "misuse/scoring.hpp"

namespace misuse {

struct ServiceConfig {
  std::filesystem::path workdir = "work";
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 binds any free port
  EnsembleParams lda;
  ProjectionParams projection;
  TrainOptions train;
  MonitorConfig monitor;
  double chord_threshold = 0.01;
};

// Reads a JSON config file (missing keys keep their current values).
// Recognized keys: workdir, host, port, chord_threshold, lda{topic_counts,
// seeds_per_k, iterations, seed}, train{hidden, epochs, patience, batch_size,
// learning_rate, seed, nu, gamma, baselines}, monitor{vote_horizon,
// alarm_threshold, alarm_patience}.
void apply_config_file(ServiceConfig& config, const std::filesystem::path& path);

// MISUSE_WORKDIR, MISUSE_HOST, MISUSE_PORT, MISUSE_SEED, MISUSE_HIDDEN,
// MISUSE_EPOCHS override the corresponding settings.
void apply_environment(ServiceConfig& config);

enum class JobKind { kLda, kTrain, kEval };
enum class JobState { kQueued, kRunning, kDone, kFailed };

struct JobStatus {
  std::string id;
  JobKind kind = JobKind::kTrain;
  JobState state = JobState::kQueued;
  double progress = 0.0;
  std::string message;
};

std::string to_string(JobKind kind);
std::string to_string(JobState state);

// HTTP+JSON facade over a working directory. Artifacts already present in
// the directory are loaded at startup.
class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start();
  // Serves on the calling thread until stop().
  void run();
  void stop();

  // Blocks until no job is queued or running.
  void wait_for_jobs();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace misuse
