#pragma once

// Influence-function memorization scores and their per-token attribution.
//
// With s = H^{-1} grad_theta P(y|x; theta_hat) computed once per training instance:
//   m_remove(z)  = -s^T grad L(z)
//   m_replace(z) = -s^T (grad L(z) - grad L(z'))
//   attribution  = -sum_l r_{t,l} (X_{t,l} - X'_{t,l}),  r = int_0^1 grad_X[s^T grad L(X' + a(X - X'))] da
// H is the Hessian of the ridge-regularized empirical risk at theta_hat.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "memscore/baseline.hpp"
#include "memscore/errors.hpp"
#include "memscore/instance.hpp"
#include "memscore/model.hpp"
#include "memscore/parallel.hpp"

namespace memscore {

inline constexpr std::size_t kDefaultRiemannSteps = 50;

enum class SolverMode { direct, cg };

inline std::string_view to_string(SolverMode m) { return m == SolverMode::direct ? "direct" : "cg"; }

inline SolverMode parse_solver_mode(std::string_view s) {
  if (s == "direct") return SolverMode::direct;
  if (s == "cg") return SolverMode::cg;
  throw UsageError("unknown solver mode '" + std::string(s) + "'");
}

/// The differentiated function F in I(z, z_test) = grad F(z_test)^T H^{-1} grad L(z).
/// Memorization always uses probability, F = -P(y|x).
enum class InfluenceTarget { probability, loss };

struct EngineOptions {
  SolverMode solver_mode = SolverMode::direct;
  double cg_tol = 1e-10;
  std::size_t cg_max_iters = 0;  // 0 means 10 * p
  double damping = 0.0;
  // Gradient-norm threshold for treating the model as an optimum of R.
  double convergence_tol = 1e-6;
  bool allow_unconverged = false;
};

struct MemorizationScore {
  std::size_t instance_index = 0;
  double m_remove = 0.0;
  std::optional<double> m_replace;
};

struct AttributionReport {
  std::size_t instance_index = 0;
  std::vector<double> per_token;
  double total = 0.0;
  double m_replace_reference = 0.0;
  std::size_t riemann_steps = kDefaultRiemannSteps;
  BaselineKind baseline_kind = BaselineKind::zero;

  double relative_gap() const {
    return std::abs(total - m_replace_reference) / std::max(std::abs(m_replace_reference), 1e-12);
  }
};

class InfluenceEngine {
 public:
  InfluenceEngine(ModelState model, Dataset dataset, EngineOptions options = {})
      : model_(std::move(model)), dataset_(std::move(dataset)), options_(options) {
    model_.check();
    if (dataset_.empty()) throw UsageError("influence engine: dataset is empty");
    for (std::size_t i = 0; i < dataset_.size(); ++i) {
      try {
        detail::check_conforms(model_, dataset_[i]);
      } catch (const SchemaError& e) {
        throw SchemaError("influence engine: instance " + std::to_string(i) + ": " + e.what());
      }
    }
    if (!(options_.damping >= 0.0)) throw UsageError("influence engine: damping must be nonnegative");
    if (!(options_.cg_tol > 0.0)) throw UsageError("influence engine: cg_tol must be positive");
    if (!(model_.ridge_lambda > 0.0) && options_.damping == 0.0) {
      throw UsageError("influence engine: ridge_lambda must be positive for a positive definite Hessian");
    }
    const auto p = model_.num_params();
    if (options_.cg_max_iters == 0) options_.cg_max_iters = 10 * p;

    grad_norm_ = empirical_risk_grad(model_, dataset_).norm();
    converged_ = grad_norm_ <= options_.convergence_tol;
    if (!converged_ && !options_.allow_unconverged) {
      throw UsageError("influence engine: model is not at an optimum (|grad R| = " + std::to_string(grad_norm_) +
                       "); retrain or allow unconverged models explicitly");
    }

    if (options_.solver_mode == SolverMode::direct) {
      if (p > kDirectHessianCap) {
        throw UsageError("influence engine: direct mode requires at most " + std::to_string(kDirectHessianCap) +
                         " parameters; use cg");
      }
      Eigen::MatrixXd H = hessian(model_, dataset_);
      H.diagonal().array() += options_.damping;
      factor_ = std::make_shared<Eigen::LLT<Eigen::MatrixXd>>(H);
      if (factor_->info() != Eigen::Success) {
        throw SolverError("influence engine: Hessian is not positive definite", std::nan(""));
      }
    }

    s_flags_ = std::make_unique<std::once_flag[]>(dataset_.size());
    s_cache_.resize(dataset_.size());
  }

  InfluenceEngine(InfluenceEngine&&) noexcept = default;
  InfluenceEngine& operator=(InfluenceEngine&&) noexcept = default;

  const ModelState& model() const { return model_; }
  const Dataset& dataset() const { return dataset_; }
  const EngineOptions& options() const { return options_; }
  std::size_t size() const { return dataset_.size(); }
  /// Whether |grad R(theta)| met the convergence threshold at construction.
  bool converged() const { return converged_; }
  double risk_grad_norm() const { return grad_norm_; }
  bool damped() const { return options_.damping > 0.0; }

  /// x = (H + damping I)^{-1} b.
  Eigen::VectorXd solve_hinv(const Eigen::VectorXd& b) const {
    if (static_cast<std::size_t>(b.size()) != model_.num_params()) throw SchemaError("solve_hinv: length mismatch");
    if (!b.allFinite()) throw UsageError("solve_hinv: right-hand side is not finite");
    if (options_.solver_mode == SolverMode::direct) return factor_->solve(b);
    return conjugate_gradient(b);
  }

  /// grad F(test)^T H^{-1} grad L(train). For the probability target F = -P(y_test|x_test).
  double influence(const Instance& train_z, const Instance& test_z,
                   InfluenceTarget target = InfluenceTarget::probability) const {
    detail::check_conforms(model_, train_z);
    detail::check_conforms(model_, test_z);
    if (target == InfluenceTarget::probability) {
      return apply_s(solve_hinv(prob_grad(model_, test_z)), train_z);
    }
    return solve_hinv(loss(model_, test_z).grad_theta).dot(loss(model_, train_z).grad_theta);
  }

  /// H^{-1} grad P(y|x) for training instance `index`, solved once and cached.
  const Eigen::VectorXd& s_vector(std::size_t index) const {
    check_index(index);
    std::call_once(s_flags_[index], [&] { s_cache_[index] = solve_hinv(prob_grad(model_, dataset_[index])); });
    return s_cache_[index];
  }

  /// Influence of an arbitrary (e.g. perturbed) training input on training instance `index`.
  double influence_on(std::size_t index, const Instance& train_z) const {
    detail::check_conforms(model_, train_z);
    return apply_s(s_vector(index), train_z);
  }

  MemorizationScore mem_remove(std::size_t index) const {
    MemorizationScore out;
    out.instance_index = index;
    out.m_remove = influence_on(index, dataset_[index]);
    return out;
  }

  MemorizationScore mem_replace(std::size_t index, const Instance& baseline) const {
    check_baseline(index, baseline);
    MemorizationScore out = mem_remove(index);
    const Eigen::VectorXd& s = s_vector(index);
    const Eigen::VectorXd diff = loss(model_, dataset_[index]).grad_theta - loss(model_, baseline).grad_theta;
    out.m_replace = -s.dot(diff);
    return out;
  }

  /// Midpoint-Riemann path attribution of m_replace to token rows.
  AttributionReport attribute(std::size_t index, const Instance& baseline, BaselineKind kind,
                              std::size_t steps = kDefaultRiemannSteps) const {
    if (steps < 1) throw UsageError("attribute: riemann steps must be >= 1");
    const auto score = mem_replace(index, baseline);
    const Instance& z = dataset_[index];
    const Eigen::VectorXd& s = s_vector(index);
    const Eigen::MatrixXd delta = z.features - baseline.features;

    Instance point = z;
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(z.features.rows(), z.features.cols());
    for (std::size_t k = 0; k < steps; ++k) {
      const double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
      point.features = baseline.features + alpha * delta;
      r += mixed_grad_input(model_, point, s);
    }
    r /= static_cast<double>(steps);

    AttributionReport report;
    report.instance_index = index;
    report.riemann_steps = steps;
    report.baseline_kind = kind;
    report.m_replace_reference = *score.m_replace;
    report.per_token.resize(z.num_tokens());
    for (std::size_t t = 0; t < z.num_tokens(); ++t) {
      const auto row = static_cast<Eigen::Index>(t);
      report.per_token[t] = -r.row(row).dot(delta.row(row));
    }
    report.total = std::accumulate(report.per_token.begin(), report.per_token.end(), 0.0);
    return report;
  }

  /// All m_remove scores in index order. Solves run in parallel.
  std::vector<MemorizationScore> all_scores(std::size_t threads = default_thread_count()) const {
    std::vector<MemorizationScore> scores(dataset_.size());
    parallel_for(dataset_.size(), [&](std::size_t i) { scores[i] = mem_remove(i); }, threads);
    return scores;
  }

  /// Descending by m_remove; ties by ascending index.
  std::vector<MemorizationScore> rank_by_memorization(std::size_t threads = default_thread_count()) const {
    auto scores = all_scores(threads);
    std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) {
      if (a.m_remove != b.m_remove) return a.m_remove > b.m_remove;
      return a.instance_index < b.instance_index;
    });
    return scores;
  }

 private:
  // F = -P: I = -s^T grad L(train_z).
  double apply_s(const Eigen::VectorXd& s, const Instance& train_z) const {
    return -s.dot(loss(model_, train_z).grad_theta);
  }

  void check_index(std::size_t index) const {
    if (index >= dataset_.size()) throw UsageError("instance index " + std::to_string(index) + " out of range");
  }

  void check_baseline(std::size_t index, const Instance& baseline) const {
    check_index(index);
    const Instance& z = dataset_[index];
    if (baseline.features.rows() != z.features.rows() || baseline.features.cols() != z.features.cols()) {
      throw UsageError("baseline must have the same N x d shape as the instance");
    }
    if (baseline.label != z.label) throw UsageError("baseline must carry the instance's label");
    if (!baseline.features.allFinite()) throw UsageError("baseline features must be finite");
  }

  Eigen::VectorXd apply_system(const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = hvp(model_, dataset_, v);
    if (options_.damping > 0.0) out += options_.damping * v;
    return out;
  }

  Eigen::VectorXd conjugate_gradient(const Eigen::VectorXd& b) const {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(b.size());
    const double b_norm = b.norm();
    if (b_norm == 0.0) return x;
    Eigen::VectorXd r = b;
    Eigen::VectorXd d = r;
    double rr = r.squaredNorm();
    const double target = options_.cg_tol * b_norm;
    for (std::size_t it = 0; it < options_.cg_max_iters; ++it) {
      if (std::sqrt(rr) <= target) return x;
      const Eigen::VectorXd Ad = apply_system(d);
      const double curvature = d.dot(Ad);
      if (!(curvature > 0.0)) throw SolverError("cg: system is not positive definite", std::sqrt(rr) / b_norm);
      const double step = rr / curvature;
      x += step * d;
      r -= step * Ad;
      const double rr_next = r.squaredNorm();
      d = r + (rr_next / rr) * d;
      rr = rr_next;
    }
    // Recompute the true residual before giving up; the recurrence drifts.
    const double true_res = (b - apply_system(x)).norm();
    if (true_res <= target) return x;
    throw SolverError("cg: no convergence within " + std::to_string(options_.cg_max_iters) + " iterations",
                      true_res / b_norm);
  }

  ModelState model_;
  Dataset dataset_;
  EngineOptions options_;
  bool converged_ = false;
  double grad_norm_ = 0.0;
  std::shared_ptr<const Eigen::LLT<Eigen::MatrixXd>> factor_;
  mutable std::unique_ptr<std::once_flag[]> s_flags_;
  mutable std::vector<Eigen::VectorXd> s_cache_;
};

}  // namespace memscore
