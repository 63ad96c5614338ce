#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace misuse {

using FeatureVector = std::vector<double>;

struct OcSvmParams {
  double nu = 0.05;
  double gamma = -1.0;  // <= 0 selects 1 / dimension
  double tolerance = 1e-4;
  std::size_t max_iterations = 0;  // 0 selects 100000 * number of points
};

// nu-one-class SVM with an RBF kernel. The dual is scaled so that the
// coefficients sum to one and each lies in [0, 1 / (nu * l)].
struct OcSvmModel {
  double nu = 0.0;
  double gamma = 0.0;
  double rho = 0.0;
  std::vector<FeatureVector> support_vectors;
  std::vector<double> alphas;

  std::size_t dimension() const { return support_vectors.empty() ? 0 : support_vectors[0].size(); }
  bool operator==(const OcSvmModel&) const = default;
};

struct OcSvmTrainInfo {
  std::size_t iterations = 0;
  double kkt_gap = 0.0;
};

double rbf_kernel(std::span<const double> x, std::span<const double> y, double gamma);

// Solves the dual with SMO on maximal-violating pairs.
OcSvmModel train_ocsvm(std::span<const FeatureVector> points, const OcSvmParams& params,
                       OcSvmTrainInfo* info = nullptr);

// Full dual solution (one alpha per training point, zeros included); used by
// tests that compare against an independent QP solver.
std::vector<double> solve_ocsvm_dual(std::span<const FeatureVector> points, double nu, double gamma,
                                     double tolerance, double* rho = nullptr);

// f(x) = sum_i alpha_i K(x_i, x) - rho; nonnegative means inlier.
double score(const OcSvmModel& model, std::span<const double> x);

std::string ocsvm_to_json(const OcSvmModel& model);
OcSvmModel ocsvm_from_json(const std::string& text);

}  // namespace misuse
