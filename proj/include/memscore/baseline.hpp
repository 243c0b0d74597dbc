#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "memscore/errors.hpp"
#include "memscore/instance.hpp"

namespace memscore {

/// How the uninformative reference input of an attribution path is built.
enum class BaselineKind { zero, mean, custom };

inline std::string_view to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::zero: return "zero";
    case BaselineKind::mean: return "mean";
    case BaselineKind::custom: return "custom";
  }
  return "zero";
}

inline BaselineKind parse_baseline_kind(std::string_view s) {
  if (s == "zero") return BaselineKind::zero;
  if (s == "mean") return BaselineKind::mean;
  if (s == "custom") return BaselineKind::custom;
  throw UsageError("unknown baseline kind '" + std::string(s) + "'");
}

/// A resolved baseline: the kind plus the token row every baseline row is set to.
struct BaselineSpec {
  BaselineKind kind = BaselineKind::zero;
  Eigen::RowVectorXd row;

  static BaselineSpec zero(std::size_t feature_dim) {
    return {BaselineKind::zero, Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(feature_dim))};
  }
  static BaselineSpec mean_of(std::span<const Instance> data) { return {BaselineKind::mean, token_mean(data)}; }
  static BaselineSpec custom(Eigen::RowVectorXd row) {
    if (!row.allFinite()) throw UsageError("custom baseline row must be finite");
    return {BaselineKind::custom, std::move(row)};
  }
};

/// Resolves a kind against a dataset. kind=custom requires custom_row.
inline BaselineSpec resolve_baseline(BaselineKind kind, std::span<const Instance> data, std::size_t feature_dim,
                                     const std::optional<Eigen::RowVectorXd>& custom_row = std::nullopt) {
  switch (kind) {
    case BaselineKind::zero: return BaselineSpec::zero(feature_dim);
    case BaselineKind::mean: return BaselineSpec::mean_of(data);
    case BaselineKind::custom:
      if (!custom_row) throw UsageError("baseline kind 'custom' requires a custom row");
      if (static_cast<std::size_t>(custom_row->size()) != feature_dim) {
        throw UsageError("custom baseline row has the wrong length");
      }
      return BaselineSpec::custom(*custom_row);
  }
  throw UsageError("unknown baseline kind");
}

/// Same shape and label as z; every token row equals the baseline row.
inline Instance make_baseline(const Instance& z, const BaselineSpec& spec) {
  if (spec.row.size() != z.features.cols()) throw SchemaError("baseline row length does not match feature_dim");
  Instance out;
  out.features = spec.row.replicate(z.features.rows(), 1);
  out.label = z.label;
  out.token_names = z.token_names;
  out.weight = z.weight;
  out.subpop_id = z.subpop_id;
  return out;
}

/// z with the listed token rows replaced by the baseline row.
inline Instance replace_tokens(const Instance& z, std::span<const std::size_t> tokens, const BaselineSpec& spec) {
  if (spec.row.size() != z.features.cols()) throw SchemaError("baseline row length does not match feature_dim");
  Instance out = z;
  for (const auto t : tokens) {
    if (t >= z.num_tokens()) throw UsageError("replace_tokens: token index out of range");
    out.features.row(static_cast<Eigen::Index>(t)) = spec.row;
  }
  return out;
}

}  // namespace memscore
