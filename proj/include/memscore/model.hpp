#pragma once

// Pooled-linear softmax classifier and its analytic derivatives.
//
// An instance X (N x d) is mean-pooled to xbar (d), scored as logits = W xbar + b and
// normalized with softmax. theta packs W row-major (C x d) followed by b (C). The
// per-instance loss is plain cross entropy; the ridge term lambda/2 |theta|^2 lives
// in the empirical risk only.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "memscore/errors.hpp"
#include "memscore/instance.hpp"

namespace memscore {

/// Largest parameter count for which an explicit Hessian may be formed.
inline constexpr std::size_t kDirectHessianCap = 2000;

struct ModelState {
  Eigen::VectorXd theta;
  double ridge_lambda = 0.0;
  std::size_t num_classes = 2;
  std::size_t feature_dim = 1;

  static ModelState zeros(std::size_t num_classes, std::size_t feature_dim, double ridge_lambda) {
    ModelState m;
    m.num_classes = num_classes;
    m.feature_dim = feature_dim;
    m.ridge_lambda = ridge_lambda;
    m.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_params(num_classes, feature_dim)));
    return m;
  }

  static constexpr std::size_t num_params(std::size_t num_classes, std::size_t feature_dim) {
    return num_classes * feature_dim + num_classes;
  }
  std::size_t num_params() const { return num_params(num_classes, feature_dim); }

  using WeightMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  WeightMap weights() const {
    return WeightMap(theta.data(), static_cast<Eigen::Index>(num_classes),
                     static_cast<Eigen::Index>(feature_dim));
  }
  auto bias() const { return theta.tail(static_cast<Eigen::Index>(num_classes)); }

  /// Throws SchemaError unless theta has exactly C*d + C entries.
  void check() const {
    if (num_classes < 2) throw SchemaError("model: num_classes must be >= 2");
    if (feature_dim < 1) throw SchemaError("model: feature_dim must be >= 1");
    if (static_cast<std::size_t>(theta.size()) != num_params()) {
      throw SchemaError("model: theta has " + std::to_string(theta.size()) + " entries, expected " +
                        std::to_string(num_params()));
    }
    if (!(ridge_lambda >= 0.0)) throw SchemaError("model: ridge_lambda must be nonnegative");
  }
};

struct LossComponents {
  double loss_value = 0.0;
  Eigen::VectorXd grad_theta;
  double prob_true_class = 1.0;
};

/// One summand of a weighted risk: coefficient * L(instance, theta).
struct WeightedTerm {
  const Instance* instance = nullptr;
  double coefficient = 0.0;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_conforms(const ModelState& model, const Instance& z) {
  if (z.features.rows() < 1) throw SchemaError("instance has no token rows");
  if (z.feature_dim() != model.feature_dim) {
    throw SchemaError("instance has " + std::to_string(z.feature_dim()) + " feature columns, model expects " +
                      std::to_string(model.feature_dim));
  }
  if (z.label >= model.num_classes) throw SchemaError("instance label out of range");
}

struct Forward {
  Eigen::VectorXd pooled;  // xbar, length d
  Eigen::VectorXd logits;  // length C
  Eigen::VectorXd probs;   // length C
  double log_normalizer = 0.0;
};

inline Eigen::VectorXd pool(const Eigen::MatrixXd& features) {
  return features.colwise().mean().transpose();
}

inline Forward forward(const ModelState& model, const Eigen::VectorXd& pooled) {
  Forward f;
  f.pooled = pooled;
  f.logits = model.weights() * pooled + model.bias();
  const double top = f.logits.maxCoeff();
  const Eigen::VectorXd shifted = (f.logits.array() - top).exp().matrix();
  const double total = shifted.sum();
  f.probs = shifted / total;
  f.log_normalizer = top + std::log(total);
  return f;
}

inline Forward forward(const ModelState& model, const Instance& z) {
  check_conforms(model, z);
  return forward(model, pool(z.features));
}

/// Packs a logit-space vector g (C) and pooled input xbar (d) into theta-space J^T g.
inline Eigen::VectorXd pack_outer(const Eigen::VectorXd& g, const Eigen::VectorXd& pooled) {
  const auto C = g.size();
  const auto d = pooled.size();
  Eigen::VectorXd out(C * d + C);
  Eigen::Map<RowMatrix>(out.data(), C, d) = g * pooled.transpose();
  out.tail(C) = g;
  return out;
}

/// Directional change of logits J v for theta-space v.
inline Eigen::VectorXd logit_jvp(const Eigen::VectorXd& v, const Eigen::VectorXd& pooled, Eigen::Index C) {
  const auto d = pooled.size();
  Eigen::Map<const RowMatrix> vw(v.data(), C, d);
  return vw * pooled + v.tail(C);
}

/// Softmax Jacobian diag(p) - p p^T applied to u.
inline Eigen::VectorXd softmax_jacobian_apply(const Eigen::VectorXd& probs, const Eigen::VectorXd& u) {
  return (probs.array() * u.array()).matrix() - probs * probs.dot(u);
}

inline Eigen::VectorXd residual(const Forward& f, std::size_t label) {
  Eigen::VectorXd g = f.probs;
  g(static_cast<Eigen::Index>(label)) -= 1.0;
  return g;
}

inline std::vector<WeightedTerm> mean_terms(std::span<const Instance> data) {
  std::vector<WeightedTerm> terms;
  terms.reserve(data.size());
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (const auto& z : data) terms.push_back({&z, z.weight * inv_n});
  return terms;
}

inline void require_nonempty(std::span<const Instance> data, const char* op) {
  if (data.empty()) throw UsageError(std::string(op) + ": dataset is empty");
}

}  // namespace detail

inline Eigen::VectorXd predict_proba(const ModelState& model, const Instance& z) {
  return detail::forward(model, z).probs;
}

/// Cross entropy -ln P(y|x) and its gradient with respect to theta.
inline LossComponents loss(const ModelState& model, const Instance& z) {
  const auto f = detail::forward(model, z);
  LossComponents out;
  out.loss_value = f.log_normalizer - f.logits(static_cast<Eigen::Index>(z.label));
  out.prob_true_class = f.probs(static_cast<Eigen::Index>(z.label));
  out.grad_theta = detail::pack_outer(detail::residual(f, z.label), f.pooled);
  return out;
}

/// Gradient of P(y|x; theta) with respect to theta. Equals -P * grad L.
inline Eigen::VectorXd prob_grad(const ModelState& model, const Instance& z) {
  const auto f = detail::forward(model, z);
  const double py = f.probs(static_cast<Eigen::Index>(z.label));
  return detail::pack_outer(-py * detail::residual(f, z.label), f.pooled);
}

/// sum_k c_k L(z_k, theta) + lambda/2 |theta|^2
inline double weighted_risk(const ModelState& model, std::span<const WeightedTerm> terms) {
  double total = 0.0;
  for (const auto& t : terms) {
    if (t.coefficient == 0.0) continue;
    total += t.coefficient * loss(model, *t.instance).loss_value;
  }
  return total + 0.5 * model.ridge_lambda * model.theta.squaredNorm();
}

inline Eigen::VectorXd weighted_risk_grad(const ModelState& model, std::span<const WeightedTerm> terms) {
  Eigen::VectorXd grad = model.ridge_lambda * model.theta;
  for (const auto& t : terms) {
    if (t.coefficient == 0.0) continue;
    const auto f = detail::forward(model, *t.instance);
    grad += t.coefficient * detail::pack_outer(detail::residual(f, t.instance->label), f.pooled);
  }
  return grad;
}

/// R(theta) = (1/n) sum_i w_i L(z_i, theta) + lambda/2 |theta|^2
inline double empirical_risk(const ModelState& model, std::span<const Instance> data) {
  detail::require_nonempty(data, "empirical_risk");
  const auto terms = detail::mean_terms(data);
  return weighted_risk(model, terms);
}

inline Eigen::VectorXd empirical_risk_grad(const ModelState& model, std::span<const Instance> data) {
  detail::require_nonempty(data, "empirical_risk_grad");
  const auto terms = detail::mean_terms(data);
  return weighted_risk_grad(model, terms);
}

/// Explicit Hessian of R. Only for p <= kDirectHessianCap; larger models must use hvp().
inline Eigen::MatrixXd hessian(const ModelState& model, std::span<const Instance> data) {
  detail::require_nonempty(data, "hessian");
  const auto p = static_cast<Eigen::Index>(model.num_params());
  if (model.num_params() > kDirectHessianCap) {
    throw UsageError("hessian: " + std::to_string(p) + " parameters exceeds the direct cap; use hvp");
  }
  const auto C = static_cast<Eigen::Index>(model.num_classes);
  const auto d = static_cast<Eigen::Index>(model.feature_dim);
  // Accumulate in (d+1) x (d+1) blocks per class pair: H[(c,j),(c',j')] = A[c,c'] phi_j phi_j'.
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(p, p);
  const double inv_n = 1.0 / static_cast<double>(data.size());
  auto index = [C, d](Eigen::Index c, Eigen::Index j) { return j < d ? c * d + j : C * d + c; };
  for (const auto& z : data) {
    const auto f = detail::forward(model, z);
    Eigen::MatrixXd A = -f.probs * f.probs.transpose();
    A.diagonal() += f.probs;
    Eigen::VectorXd phi(d + 1);
    phi.head(d) = f.pooled;
    phi(d) = 1.0;
    const Eigen::MatrixXd outer = (z.weight * inv_n) * (phi * phi.transpose());
    for (Eigen::Index c = 0; c < C; ++c) {
      for (Eigen::Index c2 = 0; c2 < C; ++c2) {
        const double a = A(c, c2);
        for (Eigen::Index j = 0; j <= d; ++j) {
          for (Eigen::Index j2 = 0; j2 <= d; ++j2) H(index(c, j), index(c2, j2)) += a * outer(j, j2);
        }
      }
    }
  }
  H.diagonal().array() += model.ridge_lambda;
  return H;
}

/// H v without materializing H.
inline Eigen::VectorXd hvp(const ModelState& model, std::span<const Instance> data, const Eigen::VectorXd& v) {
  detail::require_nonempty(data, "hvp");
  if (static_cast<std::size_t>(v.size()) != model.num_params()) throw SchemaError("hvp: vector length mismatch");
  const auto C = static_cast<Eigen::Index>(model.num_classes);
  const double inv_n = 1.0 / static_cast<double>(data.size());
  Eigen::VectorXd out = model.ridge_lambda * v;
  for (const auto& z : data) {
    const auto f = detail::forward(model, z);
    const Eigen::VectorXd u = detail::logit_jvp(v, f.pooled, C);
    out += (z.weight * inv_n) * detail::pack_outer(detail::softmax_jacobian_apply(f.probs, u), f.pooled);
  }
  return out;
}

/// Gradient with respect to the input matrix X of s^T grad_theta L((X, y), theta).
///
/// With xbar the mean of the rows of X, g = p - e_y and u = S_W xbar + s_b:
///   d/dxbar = S_W^T g + W^T (diag(p) - p p^T) u, and every row receives d/dxbar / N.
inline Eigen::MatrixXd mixed_grad_input(const ModelState& model, const Instance& z, const Eigen::VectorXd& s) {
  if (static_cast<std::size_t>(s.size()) != model.num_params()) {
    throw SchemaError("mixed_grad_input: vector length mismatch");
  }
  const auto f = detail::forward(model, z);
  const auto C = static_cast<Eigen::Index>(model.num_classes);
  const auto d = static_cast<Eigen::Index>(model.feature_dim);
  Eigen::Map<const detail::RowMatrix> sw(s.data(), C, d);
  const Eigen::VectorXd g = detail::residual(f, z.label);
  const Eigen::VectorXd u = sw * f.pooled + s.tail(C);
  const Eigen::VectorXd d_pooled =
      sw.transpose() * g + model.weights().transpose() * detail::softmax_jacobian_apply(f.probs, u);
  const auto N = z.features.rows();
  return (d_pooled.transpose() / static_cast<double>(N)).replicate(N, 1);
}

/// Top-1 prediction; ties go to the lowest class index.
inline std::size_t predict_label(const ModelState& model, const Instance& z) {
  const auto probs = predict_proba(model, z);
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < probs.size(); ++c) {
    if (probs(c) > probs(best)) best = c;
  }
  return static_cast<std::size_t>(best);
}

inline double accuracy(const ModelState& model, std::span<const Instance> data) {
  if (data.empty()) throw UsageError("accuracy: empty dataset");
  std::size_t hits = 0;
  for (const auto& z : data) hits += predict_label(model, z) == z.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace memscore
