#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "memscore/errors.hpp"
#include "memscore/instance.hpp"
#include "memscore/model.hpp"

namespace memscore {

struct TrainConfig {
  double learning_rate = 0.5;  // upper bound on the step; see minimize()
  std::size_t max_iters = 50000;
  double grad_tol = 1e-8;
  std::uint64_t seed = 0;
  double init_scale = 0.0;  // 0 means zero init
};

struct TrainReport {
  double final_grad_norm = 0.0;
  std::size_t iters_used = 0;
  bool converged = false;
  double final_risk = 0.0;
};

struct TrainResult {
  ModelState model;
  TrainReport report;
};

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0)) throw UsageError("train: learning_rate must be positive");
  if (!(cfg.grad_tol > 0.0)) throw UsageError("train: grad_tol must be positive");
  if (cfg.max_iters == 0) throw UsageError("train: max_iters must be positive");
  if (!(cfg.init_scale >= 0.0)) throw UsageError("train: init_scale must be nonnegative");
}

inline Eigen::VectorXd random_init(std::size_t p, const TrainConfig& cfg) {
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  if (cfg.init_scale == 0.0) return theta;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, cfg.init_scale);
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) = normal(rng);
  return theta;
}

/// Full-batch gradient descent on sum_k c_k L(z_k) + lambda/2 |theta|^2.
///
/// The step is min(learning_rate, 1/Lmax) where Lmax = lambda + sum_{c_k > 0} c_k |phi_k|^2 / 2
/// bounds the Hessian spectrum (softmax curvature is at most 1/2, phi = [xbar; 1]). A fixed
/// step below 1/Lmax makes every iteration a descent step, with no line search whose
/// sufficient-decrease test would drown in rounding near the optimum.
inline TrainResult minimize(std::span<const WeightedTerm> terms, std::size_t num_classes, std::size_t feature_dim,
                            double ridge_lambda, const TrainConfig& cfg,
                            const std::optional<Eigen::VectorXd>& warm_start = std::nullopt) {
  validate(cfg);
  if (!(ridge_lambda > 0.0)) throw UsageError("train: ridge lambda must be positive");
  if (terms.empty()) throw UsageError("train: dataset is empty");

  TrainResult out;
  out.model = ModelState::zeros(num_classes, feature_dim, ridge_lambda);
  if (warm_start) {
    if (static_cast<std::size_t>(warm_start->size()) != out.model.num_params()) {
      throw UsageError("train: warm start has the wrong length");
    }
    out.model.theta = *warm_start;
  } else {
    out.model.theta = random_init(out.model.num_params(), cfg);
  }

  double curvature = ridge_lambda;
  for (const auto& t : terms) {
    detail::check_conforms(out.model, *t.instance);
    if (t.coefficient > 0.0) {
      const double pooled_sq = detail::pool(t.instance->features).squaredNorm();
      curvature += 0.5 * t.coefficient * (pooled_sq + 1.0);
    }
  }
  const double step = std::min(cfg.learning_rate, 1.0 / curvature);

  Eigen::VectorXd grad = weighted_risk_grad(out.model, terms);
  double grad_norm = grad.norm();
  std::size_t iter = 0;
  while (grad_norm > cfg.grad_tol && iter < cfg.max_iters) {
    out.model.theta -= step * grad;
    grad = weighted_risk_grad(out.model, terms);
    grad_norm = grad.norm();
    ++iter;
  }
  out.report.final_grad_norm = grad_norm;
  out.report.iters_used = iter;
  out.report.converged = grad_norm <= cfg.grad_tol;
  out.report.final_risk = weighted_risk(out.model, terms);
  return out;
}

/// theta_hat = argmin R(theta). Deterministic given dataset order and cfg.
inline TrainResult train(std::span<const Instance> data, std::size_t num_classes, double ridge_lambda,
                         const TrainConfig& cfg) {
  if (data.empty()) throw UsageError("train: dataset is empty");
  const auto terms = detail::mean_terms(data);
  return minimize(terms, num_classes, data.front().feature_dim(), ridge_lambda, cfg);
}

/// Exact leave-one-out oracle: the mean runs over the remaining n-1 instances.
inline TrainResult retrain_without(std::span<const Instance> data, std::size_t exclude_index, std::size_t num_classes,
                                   double ridge_lambda, const TrainConfig& cfg,
                                   const std::optional<Eigen::VectorXd>& warm_start = std::nullopt) {
  if (data.size() < 2) throw UsageError("retrain_without: need at least 2 instances");
  if (exclude_index >= data.size()) throw UsageError("retrain_without: index out of range");
  std::vector<WeightedTerm> terms;
  const double inv = 1.0 / static_cast<double>(data.size() - 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (i != exclude_index) terms.push_back({&data[i], data[i].weight * inv});
  }
  return minimize(terms, num_classes, data.front().feature_dim(), ridge_lambda, cfg, warm_start);
}

namespace detail {

inline void check_epsilon(double epsilon, std::size_t n, const char* op) {
  const double bound = 1.0 / static_cast<double>(n);
  if (!std::isfinite(epsilon) || !(std::abs(epsilon) < bound)) {
    throw UsageError(std::string(op) + ": epsilon must lie in (-1/n, 1/n)");
  }
}

}  // namespace detail

/// argmin R(theta) - epsilon * L(z_index, theta).
inline TrainResult retrain_reweighted(std::span<const Instance> data, std::size_t index, double epsilon,
                                      std::size_t num_classes, double ridge_lambda, const TrainConfig& cfg,
                                      const std::optional<Eigen::VectorXd>& warm_start = std::nullopt) {
  if (data.empty()) throw UsageError("retrain_reweighted: dataset is empty");
  if (index >= data.size()) throw UsageError("retrain_reweighted: index out of range");
  detail::check_epsilon(epsilon, data.size(), "retrain_reweighted");
  auto terms = detail::mean_terms(data);
  terms.push_back({&data[index], -epsilon});
  return minimize(terms, num_classes, data.front().feature_dim(), ridge_lambda, cfg, warm_start);
}

/// argmin R(theta) + epsilon * L(z', theta) - epsilon * L(z_index, theta): epsilon mass moved from z to z'.
inline TrainResult retrain_replaced(std::span<const Instance> data, std::size_t index, const Instance& replacement,
                                    double epsilon, std::size_t num_classes, double ridge_lambda,
                                    const TrainConfig& cfg,
                                    const std::optional<Eigen::VectorXd>& warm_start = std::nullopt) {
  if (data.empty()) throw UsageError("retrain_replaced: dataset is empty");
  if (index >= data.size()) throw UsageError("retrain_replaced: index out of range");
  detail::check_epsilon(epsilon, data.size(), "retrain_replaced");
  auto terms = detail::mean_terms(data);
  terms.push_back({&data[index], -epsilon});
  terms.push_back({&replacement, epsilon});
  return minimize(terms, num_classes, data.front().feature_dim(), ridge_lambda, cfg, warm_start);
}

}  // namespace memscore
