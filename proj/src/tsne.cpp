#include "misuse/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "misuse/error.hpp"
#include "misuse/random.hpp"

namespace misuse {

RowMatrix conditional_affinities(const RowMatrix& dist, double perplexity) {
  const std::size_t n = dist.rows;
  RowMatrix P(n, n);
  const double target = std::log(perplexity);
  for (std::size_t i = 0; i < n; ++i) {
    double beta = 1.0;
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    auto row = P.row(i);
    for (int iter = 0; iter < 200; ++iter) {
      // Shift by the smallest distance so exp() never underflows to all zeros.
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) dmin = std::min(dmin, dist(i, j));
      double sum = 0.0;
      double weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = j == i ? 0.0 : std::exp(-beta * (dist(i, j) - dmin));
        sum += row[j];
        weighted += row[j] * (dist(i, j) - dmin);
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = std::isinf(lo) ? beta / 2.0 : (beta + lo) / 2.0;
      }
    }
  }
  return P;
}

RowMatrix tsne_embed(const RowMatrix& dist, const TsneParams& params) {
  const std::size_t n = dist.rows;
  if (dist.cols != n) throw InvalidArgument("t-SNE needs a square distance matrix");
  if (n < 3) throw InvalidArgument("t-SNE needs at least 3 points");
  if (!(params.perplexity > 0.0) || params.perplexity >= static_cast<double>(n))
    throw InvalidArgument("perplexity must be positive and smaller than the point count (" +
                          std::to_string(n) + ")");

  // Symmetrized joint affinities.
  const RowMatrix cond = conditional_affinities(dist, params.perplexity);
  RowMatrix P(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      P(i, j) = std::max((cond(i, j) + cond(j, i)) / (2.0 * static_cast<double>(n)), 1e-12);

  Rng rng(params.seed);
  RowMatrix Y(n, 2);
  for (double& v : Y.data) v = 1e-4 * rng.normal();
  RowMatrix update(n, 2), gains(n, 2, 1.0), grad(n, 2);
  RowMatrix num(n, n);

  for (std::size_t iter = 0; iter < params.iterations; ++iter) {
    const bool early = iter < params.exaggeration_iterations;
    const double exaggeration = early ? params.exaggeration : 1.0;
    const double momentum = iter < 250 ? 0.5 : 0.8;

    double qsum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) {
          num(i, j) = 0.0;
          continue;
        }
        const double dx = Y(i, 0) - Y(j, 0);
        const double dy = Y(i, 1) - Y(j, 1);
        num(i, j) = 1.0 / (1.0 + dx * dx + dy * dy);
        qsum += num(i, j);
      }

    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = std::max(num(i, j) / qsum, 1e-12);
        const double mult = (exaggeration * P(i, j) - q) * num(i, j);
        gx += mult * (Y(i, 0) - Y(j, 0));
        gy += mult * (Y(i, 1) - Y(j, 1));
      }
      grad(i, 0) = 4.0 * gx;
      grad(i, 1) = 4.0 * gy;
    }

    for (std::size_t k = 0; k < n * 2; ++k) {
      const bool same_sign = (grad.data[k] > 0) == (update.data[k] > 0);
      gains.data[k] = same_sign ? std::max(gains.data[k] * 0.8, 0.01) : gains.data[k] + 0.2;
      update.data[k] = momentum * update.data[k] - params.learning_rate * gains.data[k] * grad.data[k];
      Y.data[k] += update.data[k];
    }

    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += Y(i, 0);
      my += Y(i, 1);
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      Y(i, 0) -= mx;
      Y(i, 1) -= my;
    }
  }
  return Y;
}

}  // namespace misuse
