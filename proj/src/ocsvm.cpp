#include "misuse/ocsvm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "misuse/error.hpp"

namespace misuse {

using nlohmann::json;

double rbf_kernel(std::span<const double> x, std::span<const double> y, double gamma) {
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - y[i];
    sq += diff * diff;
  }
  return std::exp(-gamma * sq);
}

namespace {

// Kernel matrix access. Small problems keep the whole matrix; larger ones
// recompute the two columns each SMO step needs.
class KernelColumns {
 public:
  KernelColumns(std::span<const FeatureVector> points, double gamma)
      : points_(points), gamma_(gamma), n_(points.size()) {
    if (n_ <= kDenseLimit) {
      dense_.resize(n_ * n_);
      for (std::size_t i = 0; i < n_; ++i)
        for (std::size_t j = i; j < n_; ++j)
          dense_[i * n_ + j] = dense_[j * n_ + i] = rbf_kernel(points_[i], points_[j], gamma_);
    }
  }

  // Column i; the returned span is valid until the next call with a different slot.
  std::span<const double> column(std::size_t i, int slot) {
    if (!dense_.empty()) return {dense_.data() + i * n_, n_};
    auto& buf = scratch_[slot];
    buf.resize(n_);
    for (std::size_t t = 0; t < n_; ++t) buf[t] = rbf_kernel(points_[i], points_[t], gamma_);
    return buf;
  }

 private:
  static constexpr std::size_t kDenseLimit = 4000;
  std::span<const FeatureVector> points_;
  double gamma_;
  std::size_t n_;
  std::vector<double> dense_;
  std::vector<double> scratch_[2];
};

struct DualSolution {
  std::vector<double> alpha;
  double rho = 0.0;
  std::size_t iterations = 0;
  double gap = 0.0;
};

DualSolution solve_dual(std::span<const FeatureVector> points, double nu, double gamma,
                        double tolerance, std::size_t max_iterations) {
  const std::size_t l = points.size();
  const double C = 1.0 / (nu * static_cast<double>(l));

  std::vector<double> alpha(l, 0.0);
  const auto full = static_cast<std::size_t>(std::floor(nu * static_cast<double>(l)));
  for (std::size_t i = 0; i < std::min(full, l); ++i) alpha[i] = C;
  if (full < l) alpha[full] = std::max(0.0, 1.0 - static_cast<double>(full) * C);

  KernelColumns K(points, gamma);
  std::vector<double> grad(l, 0.0);
  for (std::size_t i = 0; i < l; ++i) {
    if (alpha[i] == 0.0) continue;
    const auto col = K.column(i, 0);
    for (std::size_t t = 0; t < l; ++t) grad[t] += alpha[i] * col[t];
  }

  const std::size_t cap = max_iterations ? max_iterations : 100000 * l;
  std::size_t iter = 0;
  double gap = 0.0;
  for (;; ++iter) {
    // i: may increase (alpha < C), smallest gradient; j: may decrease, largest.
    std::size_t up = l, low = l;
    double gmin = std::numeric_limits<double>::infinity();
    double gmax = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < l; ++t) {
      if (alpha[t] < C && grad[t] < gmin) {
        gmin = grad[t];
        up = t;
      }
      if (alpha[t] > 0.0 && grad[t] > gmax) {
        gmax = grad[t];
        low = t;
      }
    }
    gap = (up == l || low == l) ? 0.0 : gmax - gmin;
    if (gap < tolerance) break;
    if (iter >= cap)
      throw NumericalError("OC-SVM solver did not converge after " + std::to_string(iter) +
                           " iterations (KKT gap " + std::to_string(gap) + ")");

    const auto ci = K.column(up, 0);
    const auto cj = K.column(low, 1);
    double curvature = ci[up] + cj[low] - 2.0 * ci[low];
    if (curvature <= 0.0) curvature = 1e-12;
    double delta = (grad[low] - grad[up]) / curvature;
    delta = std::min({delta, C - alpha[up], alpha[low]});
    alpha[up] += delta;
    alpha[low] -= delta;
    // Snap to the box so the bound tests above stay exact.
    if (alpha[low] < 1e-16) alpha[low] = 0.0;
    if (alpha[up] > C - 1e-16) alpha[up] = C;
    for (std::size_t t = 0; t < l; ++t) grad[t] += delta * (ci[t] - cj[t]);
  }

  DualSolution sol;
  {
    double sum = 0.0;
    std::size_t free = 0;
    double ub = std::numeric_limits<double>::infinity();    // min over alpha == 0
    double lb = -std::numeric_limits<double>::infinity();   // max over alpha == C
    for (std::size_t t = 0; t < l; ++t) {
      if (alpha[t] > 0.0 && alpha[t] < C) {
        sum += grad[t];
        ++free;
      } else if (alpha[t] == 0.0) {
        ub = std::min(ub, grad[t]);
      } else {
        lb = std::max(lb, grad[t]);
      }
    }
    if (free > 0)
      sol.rho = sum / static_cast<double>(free);
    else if (std::isinf(ub))
      sol.rho = lb;
    else if (std::isinf(lb))
      sol.rho = ub;
    else
      sol.rho = 0.5 * (ub + lb);
  }
  sol.alpha = std::move(alpha);
  sol.iterations = iter;
  sol.gap = gap;
  return sol;
}

void check_points(std::span<const FeatureVector> points) {
  if (points.size() < 2) throw InvalidArgument("OC-SVM training needs at least 2 points");
  const auto dim = points[0].size();
  if (dim == 0) throw InvalidArgument("OC-SVM features must be nonempty");
  for (const auto& p : points)
    if (p.size() != dim) throw InvalidArgument("OC-SVM training points differ in dimension");
}

}  // namespace

std::vector<double> solve_ocsvm_dual(std::span<const FeatureVector> points, double nu, double gamma,
                                     double tolerance, double* rho) {
  check_points(points);
  auto sol = solve_dual(points, nu, gamma, tolerance, 0);
  if (rho) *rho = sol.rho;
  return std::move(sol.alpha);
}

OcSvmModel train_ocsvm(std::span<const FeatureVector> points, const OcSvmParams& params,
                       OcSvmTrainInfo* info) {
  check_points(points);
  if (!(params.nu > 0.0 && params.nu <= 1.0)) throw InvalidArgument("nu must lie in (0, 1]");
  const double gamma =
      params.gamma > 0.0 ? params.gamma : 1.0 / static_cast<double>(points[0].size());
  auto sol = solve_dual(points, params.nu, gamma, params.tolerance, params.max_iterations);
  OcSvmModel model;
  model.nu = params.nu;
  model.gamma = gamma;
  model.rho = sol.rho;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (sol.alpha[i] <= 0.0) continue;
    model.support_vectors.push_back(points[i]);
    model.alphas.push_back(sol.alpha[i]);
  }
  if (info) {
    info->iterations = sol.iterations;
    info->kkt_gap = sol.gap;
  }
  return model;
}

double score(const OcSvmModel& model, std::span<const double> x) {
  if (x.size() != model.dimension())
    throw InvalidArgument("feature dimension " + std::to_string(x.size()) +
                          " does not match model dimension " + std::to_string(model.dimension()));
  double f = 0.0;
  for (std::size_t i = 0; i < model.alphas.size(); ++i)
    f += model.alphas[i] * rbf_kernel(model.support_vectors[i], x, model.gamma);
  return f - model.rho;
}

std::string ocsvm_to_json(const OcSvmModel& model) {
  json j;
  j["version"] = 1;
  j["nu"] = model.nu;
  j["gamma"] = model.gamma;
  j["rho"] = model.rho;
  j["support_vectors"] = model.support_vectors;
  j["alphas"] = model.alphas;
  return j.dump();
}

OcSvmModel ocsvm_from_json(const std::string& text) {
  OcSvmModel m;
  try {
    const json j = json::parse(text);
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported OC-SVM model version");
    m.nu = j.at("nu").get<double>();
    m.gamma = j.at("gamma").get<double>();
    m.rho = j.at("rho").get<double>();
    m.support_vectors = j.at("support_vectors").get<std::vector<FeatureVector>>();
    m.alphas = j.at("alphas").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed OC-SVM model: ") + e.what());
  }
  if (m.alphas.size() != m.support_vectors.size())
    throw FormatError("OC-SVM model has mismatched alphas and support vectors");
  return m;
}

}  // namespace misuse
