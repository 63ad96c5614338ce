#pragma once

#include <vector>

#include "misuse/corpus.hpp"
#include "misuse/evaluation.hpp"
#include "misuse/pipeline.hpp"

namespace fixture {

// Two personas on disjoint five-action vocabularies, clusters = personas,
// small LSTMs. Built once per test binary.
struct Small {
  misuse::SyntheticConfig config;
  misuse::SyntheticCorpus corpus;  // sessions of length >= 2 only
  misuse::ClusterAssignment assignment;
  misuse::TrainedSet trained;
};

inline misuse::TrainOptions small_options(bool baselines) {
  misuse::TrainOptions o;
  o.seed = 5;
  o.hidden = 16;
  o.lm.max_epochs = 15;
  o.baselines = baselines;
  return o;
}

inline Small build_small(bool baselines) {
  using namespace misuse;
  Small s;
  s.config = make_persona_config(std::vector<std::size_t>{150, 150}, 5, 0.0, LengthModel{}, 13);
  const auto raw = generate_synthetic(s.config);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < raw.dataset.size(); ++i)
    if (raw.dataset[i].length() >= 2) keep.push_back(i);
  s.corpus.dataset = raw.dataset.select(keep);
  for (auto i : keep) s.corpus.persona.push_back(raw.persona[i]);
  s.assignment = ground_truth_assignment(s.corpus);
  s.trained = train_all(s.corpus.dataset, s.assignment, small_options(baselines));
  return s;
}

inline const Small& small() {
  static const Small s = build_small(true);
  return s;
}

}  // namespace fixture
