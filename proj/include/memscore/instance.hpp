#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "memscore/errors.hpp"

namespace memscore {

/// One example: a token-feature matrix (N tokens x d dims) and its class label.
struct Instance {
  Eigen::MatrixXd features;
  std::size_t label = 0;
  std::vector<std::string> token_names;  // empty, or one name per token row
  double weight = 1.0;
  std::optional<std::int64_t> subpop_id;

  std::size_t num_tokens() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(features.cols()); }

  friend bool operator==(const Instance& a, const Instance& b) {
    return a.label == b.label && a.weight == b.weight && a.subpop_id == b.subpop_id &&
           a.token_names == b.token_names && a.features.rows() == b.features.rows() &&
           a.features.cols() == b.features.cols() && a.features == b.features;
  }
};

using Dataset = std::vector<Instance>;

struct DatasetSchema {
  std::size_t feature_dim = 1;
  std::size_t num_classes = 2;
  bool has_token_names = false;
  std::string source;
};

inline void validate_schema(const DatasetSchema& schema) {
  if (schema.feature_dim < 1) throw SchemaError("feature_dim must be >= 1");
  if (schema.num_classes < 2) throw SchemaError("num_classes must be >= 2");
}

/// Throws SchemaError naming the first violated field.
inline void validate_instance(const Instance& z, const DatasetSchema& schema) {
  if (z.features.rows() < 1) throw SchemaError("features: instance has no token rows");
  if (z.feature_dim() != schema.feature_dim) {
    throw SchemaError("features: expected " + std::to_string(schema.feature_dim) +
                      " columns, got " + std::to_string(z.feature_dim()));
  }
  if (z.label >= schema.num_classes) {
    throw SchemaError("label: " + std::to_string(z.label) + " is not below num_classes " +
                      std::to_string(schema.num_classes));
  }
  if (!z.features.allFinite()) throw SchemaError("features: non-finite value");
  if (!(z.weight > 0.0) || !std::isfinite(z.weight)) throw SchemaError("weight: must be positive");
  if (!z.token_names.empty() && z.token_names.size() != z.num_tokens()) {
    throw SchemaError("token_names: expected " + std::to_string(z.num_tokens()) + " names");
  }
  if (schema.has_token_names && z.token_names.empty()) {
    throw SchemaError("token_names: schema requires token names");
  }
}

inline void validate_dataset(std::span<const Instance> data, const DatasetSchema& schema) {
  validate_schema(schema);
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      validate_instance(data[i], schema);
    } catch (const SchemaError& e) {
      throw SchemaError("instance " + std::to_string(i) + ": " + e.what());
    }
  }
}

/// Mean over every token row of every instance.
inline Eigen::RowVectorXd token_mean(std::span<const Instance> data) {
  if (data.empty()) throw UsageError("token_mean: empty dataset");
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(data.front().features.cols());
  std::size_t rows = 0;
  for (const auto& z : data) {
    if (z.features.cols() != sum.cols()) throw SchemaError("token_mean: inconsistent feature_dim");
    sum += z.features.colwise().sum();
    rows += z.num_tokens();
  }
  return sum / static_cast<double>(rows);
}

}  // namespace memscore
