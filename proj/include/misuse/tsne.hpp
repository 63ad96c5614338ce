#pragma once

#include <cstdint>
#include <vector>

#include "misuse/lda.hpp"

namespace misuse {

struct TsneParams {
  double perplexity = 5.0;
  std::size_t iterations = 1000;
  std::size_t exaggeration_iterations = 250;
  double exaggeration = 12.0;
  double learning_rate = 200.0;
  std::uint64_t seed = 1;
};

// Exact t-SNE on a precomputed n x n matrix of squared dissimilarities.
// Returns an n x 2 embedding.
RowMatrix tsne_embed(const RowMatrix& squared_distances, const TsneParams& params);

// Conditional affinities P(j|i) whose row entropy matches log(perplexity),
// found by bisection on the Gaussian precision. Exposed for testing.
RowMatrix conditional_affinities(const RowMatrix& squared_distances, double perplexity);

}  // namespace misuse
