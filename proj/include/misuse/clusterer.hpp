#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "misuse/corpus.hpp"
#include "misuse/error.hpp"
#include "misuse/lda.hpp"
#include "misuse/ocsvm.hpp"

namespace misuse {

using ClusterId = int;

struct ClusterSelection {
  ClusterId id = 0;
  std::string name;
  std::vector<TopicRef> topics;
};

struct Cluster {
  ClusterId id = 0;
  std::string name;
  std::vector<TopicRef> topics;
  std::vector<std::string> sessions;  // member session ids, corpus order
};

// Expert-driven partition of the corpus: disjoint, covering, no empty cluster.
struct ClusterAssignment {
  std::vector<Cluster> clusters;  // ascending id
  std::string residual_policy = "max-theta";

  std::size_t k() const { return clusters.size(); }
  const Cluster& cluster(ClusterId id) const;
  // Cluster id per session position of `dataset`; throws if the assignment
  // does not partition it.
  std::vector<ClusterId> labels(const SessionDataset& dataset) const;
  void validate(const SessionDataset& dataset) const;
};

class EmptyClusterError : public InvalidArgument {
 public:
  explicit EmptyClusterError(std::vector<ClusterId> ids);
  const std::vector<ClusterId>& clusters() const { return ids_; }

 private:
  std::vector<ClusterId> ids_;
};

// Each session goes to the cluster with the largest summed theta over its
// selected topics, averaged over the runs those topics come from.
ClusterAssignment assign_sessions(const LdaEnsemble& ensemble,
                                  std::span<const ClusterSelection> selections,
                                  const SessionDataset& dataset);

std::string assignment_to_json(const ClusterAssignment& assignment);
ClusterAssignment assignment_from_json(const std::string& text);
std::vector<ClusterSelection> selections_from_json(const std::string& text);

// Normalized bag of actions.
FeatureVector featurize(std::span<const ActionId> actions, std::size_t vocabulary_size);

struct ClusterSvm {
  ClusterId cluster = 0;
  OcSvmModel model;
};

struct Routing {
  ClusterId cluster = 0;
  std::vector<double> scores;  // parallel to the model list
};

Routing route(std::span<const double> features, std::span<const ClusterSvm> models);
Routing route(std::span<const ActionId> actions, std::size_t vocabulary_size,
              std::span<const ClusterSvm> models);

// Majority vote over the first `horizon` routing decisions, frozen afterwards.
// Ties go to whichever tied cluster won most recently.
class RouteVoter {
 public:
  explicit RouteVoter(std::size_t horizon = 15);

  // Feeds the instantaneous decision for the next prefix; returns the vote.
  ClusterId push(ClusterId instantaneous);
  std::size_t steps() const { return steps_; }
  bool frozen() const { return steps_ >= horizon_; }
  ClusterId current() const { return vote_; }

 private:
  std::size_t horizon_;
  std::size_t steps_ = 0;
  ClusterId vote_ = 0;
  std::map<ClusterId, std::size_t> counts_;
  std::map<ClusterId, std::size_t> last_win_;
};

struct OnlineDecision {
  ClusterId voted = 0;
  ClusterId instantaneous = 0;
  std::vector<double> scores;
};

// Per-session routing state: cumulative action counts plus the voter.
class OnlineRouter {
 public:
  OnlineRouter(std::span<const ClusterSvm> models, std::size_t vocabulary_size,
               std::size_t horizon = 15);

  OnlineDecision push(ActionId action);
  std::size_t length() const { return length_; }

 private:
  std::span<const ClusterSvm> models_;
  std::vector<double> counts_;
  std::size_t length_ = 0;
  RouteVoter voter_;
};

}  // namespace misuse
