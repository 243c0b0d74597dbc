#pragma once

// Dataset generators and the line-delimited file formats.
//
// Dataset file (JSON Lines). Line 1 is the header, every following non-empty line is one
// instance:
//   {"format":"memscore-dataset","version":1,"feature_dim":d,"num_classes":C,
//    "has_token_names":bool,"source":"..."}
//   {"label":y,"weight":w,"subpop_id":k|null,"features":[[...d],...N],"token_names":[...N]}
// Doubles are written in shortest round-trip decimal form, so load(save(x)) is bit-exact.
//
// Score file: one record per instance with the fields, in order,
//   instance_index, m_remove, m_replace, per_token, baseline_kind, riemann_steps
// Fields that were not computed are null (per_token is then []).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "memscore/baseline.hpp"
#include "memscore/errors.hpp"
#include "memscore/influence.hpp"
#include "memscore/instance.hpp"
#include "memscore/model.hpp"
#include "memscore/trainer.hpp"

namespace memscore {

using ordered_json = nlohmann::ordered_json;

inline constexpr const char* kDatasetFormat = "memscore-dataset";
inline constexpr const char* kModelFormat = "memscore-model";
inline constexpr int kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Synthetic data

/// Planted-subpopulation corpus: a few frequent "head" clusters and many rare "tail" clusters.
///
/// Every subpopulation has a fixed label, a signature pattern carried by its last
/// (tokens_per_instance - class_tokens) token rows, and a fixed assignment of class-prototype
/// patterns to its first class_tokens rows. A class row shows the subpop's own class with
/// probability class_token_purity; with atypical_flip_features, tail subpops invert that, so
/// their class rows point at a wrong class and only the signature identifies the label.
struct LongTailSpec {
  std::size_t num_head_subpops = 6;
  std::size_t num_tail_subpops = 20;
  std::size_t head_frequency = 30;
  std::size_t tail_frequency = 1;
  double noise_sigma = 0.3;
  bool atypical_flip_features = true;
  std::uint64_t seed = 0;
  double test_tail_presence = 1.0;

  std::size_t feature_dim = 32;
  std::size_t num_classes = 2;
  std::size_t tokens_per_instance = 6;
  std::size_t class_tokens = 3;
  std::size_t head_test_frequency = 10;
  std::size_t tail_test_frequency = 1;
  double pattern_scale = 3.0;
  double class_token_purity = 0.8;
};

inline void validate(const LongTailSpec& s) {
  if (s.num_head_subpops + s.num_tail_subpops == 0) throw UsageError("longtail: no subpopulations");
  if (s.tail_frequency < 1) throw UsageError("longtail: tail_frequency must be >= 1");
  if (s.num_head_subpops > 0 && !(s.head_frequency > s.tail_frequency)) {
    throw UsageError("longtail: head_frequency must exceed tail_frequency");
  }
  if (!(s.noise_sigma >= 0.0)) throw UsageError("longtail: noise_sigma must be nonnegative");
  if (!(s.test_tail_presence > 0.0 && s.test_tail_presence <= 1.0)) {
    throw UsageError("longtail: test_tail_presence must lie in (0, 1]");
  }
  if (s.feature_dim < 1) throw UsageError("longtail: feature_dim must be >= 1");
  if (s.num_classes < 2) throw UsageError("longtail: num_classes must be >= 2");
  if (s.tokens_per_instance < 1) throw UsageError("longtail: tokens_per_instance must be >= 1");
  if (s.class_tokens > s.tokens_per_instance) throw UsageError("longtail: class_tokens exceeds tokens_per_instance");
  if (!(s.class_token_purity >= 0.0 && s.class_token_purity <= 1.0)) {
    throw UsageError("longtail: class_token_purity must lie in [0, 1]");
  }
  if (!(s.pattern_scale > 0.0)) throw UsageError("longtail: pattern_scale must be positive");
}

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

namespace detail {

inline Eigen::RowVectorXd random_pattern(std::mt19937_64& rng, std::size_t d, double scale) {
  std::normal_distribution<double> normal(0.0, scale / std::sqrt(static_cast<double>(d)));
  Eigen::RowVectorXd v(static_cast<Eigen::Index>(d));
  for (Eigen::Index j = 0; j < v.size(); ++j) v(j) = normal(rng);
  return v;
}

struct Subpop {
  std::int64_t id = 0;
  std::size_t label = 0;
  bool tail = false;
  std::vector<std::size_t> token_classes;  // class shown by each class row
  Eigen::RowVectorXd signature;
};

}  // namespace detail

inline TrainTestSplit generate_longtail(const LongTailSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  const std::size_t C = spec.num_classes;
  const std::size_t d = spec.feature_dim;

  std::vector<Eigen::RowVectorXd> prototypes;
  for (std::size_t c = 0; c < C; ++c) prototypes.push_back(detail::random_pattern(rng, d, spec.pattern_scale));

  std::bernoulli_distribution coin(spec.class_token_purity);
  std::uniform_int_distribution<std::size_t> other_class(1, C - 1);
  std::vector<detail::Subpop> subpops;
  const std::size_t total = spec.num_head_subpops + spec.num_tail_subpops;
  for (std::size_t k = 0; k < total; ++k) {
    detail::Subpop sp;
    sp.id = static_cast<std::int64_t>(k);
    sp.tail = k >= spec.num_head_subpops;
    const std::size_t local = sp.tail ? k - spec.num_head_subpops : k;
    sp.label = local % C;
    const bool flip = sp.tail && spec.atypical_flip_features;
    for (std::size_t t = 0; t < spec.class_tokens; ++t) {
      const bool own = coin(rng) != flip;
      sp.token_classes.push_back(own ? sp.label : (sp.label + other_class(rng)) % C);
    }
    sp.signature = detail::random_pattern(rng, d, spec.pattern_scale);
    subpops.push_back(std::move(sp));
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  auto draw = [&](const detail::Subpop& sp) {
    Instance z;
    z.label = sp.label;
    z.subpop_id = sp.id;
    z.features.resize(static_cast<Eigen::Index>(spec.tokens_per_instance), static_cast<Eigen::Index>(d));
    for (std::size_t t = 0; t < spec.tokens_per_instance; ++t) {
      const auto row = static_cast<Eigen::Index>(t);
      if (t < spec.class_tokens) {
        const std::size_t c = sp.token_classes[t];
        z.features.row(row) = prototypes[c];
        z.token_names.push_back("class:" + std::to_string(c));
      } else {
        z.features.row(row) = sp.signature;
        z.token_names.push_back("sig:" + std::to_string(sp.id));
      }
      if (spec.noise_sigma > 0.0) {
        for (Eigen::Index j = 0; j < z.features.cols(); ++j) z.features(row, j) += spec.noise_sigma * noise(rng);
      }
    }
    return z;
  };

  TrainTestSplit out;
  std::bernoulli_distribution present(spec.test_tail_presence);
  for (const auto& sp : subpops) {
    const std::size_t n_train = sp.tail ? spec.tail_frequency : spec.head_frequency;
    for (std::size_t i = 0; i < n_train; ++i) out.train.push_back(draw(sp));
    if (sp.tail) {
      if (present(rng)) {
        for (std::size_t i = 0; i < spec.tail_test_frequency; ++i) out.test.push_back(draw(sp));
      }
    } else {
      for (std::size_t i = 0; i < spec.head_test_frequency; ++i) out.test.push_back(draw(sp));
    }
  }
  if (out.train.empty()) throw UsageError("longtail: spec produces no training instances");
  std::shuffle(out.train.begin(), out.train.end(), rng);
  std::shuffle(out.test.begin(), out.test.end(), rng);
  return out;
}

/// Unstructured corpus: i.i.d. Gaussian token rows, labels from a planted linear teacher
/// on the pooled features, a fraction of labels resampled uniformly.
struct GaussianSpec {
  std::size_t num_instances = 50;
  std::size_t tokens_per_instance = 4;
  std::size_t feature_dim = 5;
  std::size_t num_classes = 2;
  double teacher_scale = 3.0;
  double label_noise = 0.1;
  std::uint64_t seed = 0;
};

inline Dataset generate_gaussian(const GaussianSpec& spec) {
  if (spec.num_instances == 0 || spec.tokens_per_instance == 0 || spec.feature_dim == 0) {
    throw UsageError("gaussian: sizes must be positive");
  }
  if (spec.num_classes < 2) throw UsageError("gaussian: num_classes must be >= 2");
  if (!(spec.label_noise >= 0.0 && spec.label_noise <= 1.0)) throw UsageError("gaussian: label_noise in [0, 1]");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto C = static_cast<Eigen::Index>(spec.num_classes);
  const auto d = static_cast<Eigen::Index>(spec.feature_dim);
  Eigen::MatrixXd teacher(C, d);
  for (Eigen::Index c = 0; c < C; ++c) {
    for (Eigen::Index j = 0; j < d; ++j) teacher(c, j) = spec.teacher_scale * normal(rng);
  }
  std::bernoulli_distribution flip(spec.label_noise);
  std::uniform_int_distribution<std::size_t> any_class(0, spec.num_classes - 1);
  Dataset data;
  for (std::size_t i = 0; i < spec.num_instances; ++i) {
    Instance z;
    z.features.resize(static_cast<Eigen::Index>(spec.tokens_per_instance), d);
    for (Eigen::Index t = 0; t < z.features.rows(); ++t) {
      for (Eigen::Index j = 0; j < d; ++j) z.features(t, j) = normal(rng);
    }
    Eigen::Index best = 0;
    (teacher * z.features.colwise().mean().transpose()).maxCoeff(&best);
    z.label = static_cast<std::size_t>(best);
    if (flip(rng)) z.label = any_class(rng);
    data.push_back(std::move(z));
  }
  return data;
}

/// (positive, negative) phrase counts from token names "class:<c>": rows of positive_class
/// count as positive, rows of any other class as negative.
inline std::pair<std::size_t, std::size_t> phrase_counts(const Instance& z, std::size_t positive_class = 1) {
  std::size_t pos = 0, neg = 0;
  const std::string prefix = "class:";
  for (const auto& name : z.token_names) {
    if (name.rfind(prefix, 0) != 0) continue;
    const auto c = std::stoul(name.substr(prefix.size()));
    (c == positive_class ? pos : neg) += 1;
  }
  return {pos, neg};
}

// ---------------------------------------------------------------------------
// Dataset files

struct LoadedDataset {
  DatasetSchema schema;
  Dataset instances;
};

inline DatasetSchema infer_schema(std::span<const Instance> data, std::size_t num_classes, std::string source = {}) {
  DatasetSchema schema;
  schema.num_classes = num_classes;
  schema.feature_dim = data.empty() ? 1 : data.front().feature_dim();
  schema.has_token_names =
      !data.empty() && std::all_of(data.begin(), data.end(), [](const auto& z) { return !z.token_names.empty(); });
  schema.source = std::move(source);
  return schema;
}

inline void write_dataset(std::ostream& os, std::span<const Instance> data, const DatasetSchema& schema) {
  validate_dataset(data, schema);
  ordered_json header;
  header["format"] = kDatasetFormat;
  header["version"] = kFormatVersion;
  header["feature_dim"] = schema.feature_dim;
  header["num_classes"] = schema.num_classes;
  header["has_token_names"] = schema.has_token_names;
  header["source"] = schema.source;
  os << header.dump() << '\n';
  for (const auto& z : data) {
    ordered_json row;
    row["label"] = z.label;
    row["weight"] = z.weight;
    row["subpop_id"] = z.subpop_id ? ordered_json(*z.subpop_id) : ordered_json(nullptr);
    ordered_json features = ordered_json::array();
    for (Eigen::Index t = 0; t < z.features.rows(); ++t) {
      ordered_json r = ordered_json::array();
      for (Eigen::Index j = 0; j < z.features.cols(); ++j) r.push_back(z.features(t, j));
      features.push_back(std::move(r));
    }
    row["features"] = std::move(features);
    row["token_names"] = z.token_names;
    os << row.dump() << '\n';
  }
}

namespace detail {

inline ordered_json parse_line(const std::string& line, std::size_t line_no) {
  try {
    return ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
  }
}

template <typename T>
T field(const ordered_json& obj, const char* name, std::size_t line_no) {
  if (!obj.is_object() || !obj.contains(name)) throw ParseError(line_no, std::string("missing field '") + name + "'");
  try {
    return obj.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(line_no, std::string("field '") + name + "' has the wrong type");
  }
}

inline double finite_number(const ordered_json& v, std::size_t line_no, const char* what) {
  if (!v.is_number()) throw ParseError(line_no, std::string(what) + ": expected a finite number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ParseError(line_no, std::string(what) + ": value is not finite");
  return x;
}

inline Instance parse_instance(const ordered_json& row, const DatasetSchema& schema, std::size_t line_no) {
  Instance z;
  const auto label = field<std::int64_t>(row, "label", line_no);
  if (label < 0 || static_cast<std::size_t>(label) >= schema.num_classes) {
    throw ParseError(line_no, "field 'label' out of range");
  }
  z.label = static_cast<std::size_t>(label);
  if (row.contains("weight")) {
    z.weight = finite_number(row.at("weight"), line_no, "field 'weight'");
    if (!(z.weight > 0.0)) throw ParseError(line_no, "field 'weight' must be positive");
  }
  if (row.contains("subpop_id") && !row.at("subpop_id").is_null()) {
    z.subpop_id = field<std::int64_t>(row, "subpop_id", line_no);
  }
  if (!row.contains("features") || !row.at("features").is_array()) {
    throw ParseError(line_no, "field 'features' must be an array of token rows");
  }
  const auto& rows = row.at("features");
  if (rows.empty()) throw ParseError(line_no, "field 'features' has no token rows");
  z.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(schema.feature_dim));
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto& r = rows[t];
    if (!r.is_array() || r.size() != schema.feature_dim) {
      throw ParseError(line_no, "field 'features' row " + std::to_string(t) + " must have " +
                                    std::to_string(schema.feature_dim) + " values");
    }
    for (std::size_t j = 0; j < schema.feature_dim; ++j) {
      z.features(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) =
          finite_number(r[j], line_no, "field 'features'");
    }
  }
  if (row.contains("token_names")) z.token_names = field<std::vector<std::string>>(row, "token_names", line_no);
  try {
    validate_instance(z, schema);
  } catch (const SchemaError& e) {
    throw ParseError(line_no, e.what());
  }
  return z;
}

}  // namespace detail

inline LoadedDataset read_dataset(std::istream& is) {
  LoadedDataset out;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto obj = detail::parse_line(line, line_no);
    if (!have_header) {
      if (detail::field<std::string>(obj, "format", line_no) != kDatasetFormat) {
        throw ParseError(line_no, "not a memscore dataset header");
      }
      if (detail::field<int>(obj, "version", line_no) != kFormatVersion) {
        throw ParseError(line_no, "unsupported dataset version");
      }
      out.schema.feature_dim = detail::field<std::size_t>(obj, "feature_dim", line_no);
      out.schema.num_classes = detail::field<std::size_t>(obj, "num_classes", line_no);
      out.schema.has_token_names = detail::field<bool>(obj, "has_token_names", line_no);
      out.schema.source = obj.contains("source") ? detail::field<std::string>(obj, "source", line_no) : "";
      try {
        validate_schema(out.schema);
      } catch (const SchemaError& e) {
        throw ParseError(line_no, e.what());
      }
      have_header = true;
      continue;
    }
    out.instances.push_back(detail::parse_instance(obj, out.schema, line_no));
  }
  if (!have_header) throw ParseError(line_no == 0 ? 1 : line_no, "missing dataset header");
  return out;
}

inline LoadedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open dataset '" + path.string() + "'");
  return read_dataset(in);
}

/// Loads and checks that the file header agrees with `expected` on feature_dim and num_classes.
inline Dataset load_dataset(const std::filesystem::path& path, const DatasetSchema& expected) {
  auto loaded = load_dataset(path);
  if (loaded.schema.feature_dim != expected.feature_dim || loaded.schema.num_classes != expected.num_classes) {
    throw ParseError(1, "dataset schema does not match the expected feature_dim/num_classes");
  }
  return std::move(loaded.instances);
}

inline void save_dataset(const std::filesystem::path& path, std::span<const Instance> data,
                         const DatasetSchema& schema) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write dataset '" + path.string() + "'");
  write_dataset(out, data, schema);
}

// ---------------------------------------------------------------------------
// Model files

inline ordered_json model_to_json(const ModelState& model, const std::optional<TrainReport>& report = std::nullopt) {
  ordered_json j;
  j["format"] = kModelFormat;
  j["version"] = kFormatVersion;
  j["num_classes"] = model.num_classes;
  j["feature_dim"] = model.feature_dim;
  j["ridge_lambda"] = model.ridge_lambda;
  j["theta"] = std::vector<double>(model.theta.data(), model.theta.data() + model.theta.size());
  if (report) {
    ordered_json r;
    r["final_grad_norm"] = report->final_grad_norm;
    r["iters_used"] = report->iters_used;
    r["converged"] = report->converged;
    r["final_risk"] = report->final_risk;
    j["train_report"] = std::move(r);
  }
  return j;
}

inline void save_model(const std::filesystem::path& path, const ModelState& model,
                       const std::optional<TrainReport>& report = std::nullopt) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write model '" + path.string() + "'");
  out << model_to_json(model, report).dump(2) << '\n';
}

inline ModelState load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open model '" + path.string() + "'");
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("malformed model file: ") + e.what());
  }
  if (detail::field<std::string>(j, "format", 1) != kModelFormat) throw ParseError(1, "not a memscore model file");
  ModelState m;
  m.num_classes = detail::field<std::size_t>(j, "num_classes", 1);
  m.feature_dim = detail::field<std::size_t>(j, "feature_dim", 1);
  m.ridge_lambda = detail::field<double>(j, "ridge_lambda", 1);
  const auto theta = detail::field<std::vector<double>>(j, "theta", 1);
  m.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
  try {
    m.check();
  } catch (const SchemaError& e) {
    throw ParseError(1, e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Score / attribution records

struct ScoreRecord {
  std::size_t instance_index = 0;
  double m_remove = 0.0;
  std::optional<double> m_replace;
  std::vector<double> per_token;
  std::optional<BaselineKind> baseline_kind;
  std::optional<std::size_t> riemann_steps;

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

inline ScoreRecord to_record(const MemorizationScore& s, std::optional<BaselineKind> kind = std::nullopt) {
  ScoreRecord r;
  r.instance_index = s.instance_index;
  r.m_remove = s.m_remove;
  r.m_replace = s.m_replace;
  if (s.m_replace) r.baseline_kind = kind;
  return r;
}

inline ScoreRecord to_record(const MemorizationScore& s, const AttributionReport& a) {
  ScoreRecord r;
  r.instance_index = s.instance_index;
  r.m_remove = s.m_remove;
  r.m_replace = a.m_replace_reference;
  r.per_token = a.per_token;
  r.baseline_kind = a.baseline_kind;
  r.riemann_steps = a.riemann_steps;
  return r;
}

inline void write_scores(std::ostream& os, std::span<const ScoreRecord> records) {
  for (const auto& rec : records) {
    ordered_json j;
    j["instance_index"] = rec.instance_index;
    j["m_remove"] = rec.m_remove;
    j["m_replace"] = rec.m_replace ? ordered_json(*rec.m_replace) : ordered_json(nullptr);
    j["per_token"] = rec.per_token;
    j["baseline_kind"] =
        rec.baseline_kind ? ordered_json(std::string(to_string(*rec.baseline_kind))) : ordered_json(nullptr);
    j["riemann_steps"] = rec.riemann_steps ? ordered_json(*rec.riemann_steps) : ordered_json(nullptr);
    os << j.dump() << '\n';
  }
}

inline std::vector<ScoreRecord> read_scores(std::istream& is) {
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = detail::parse_line(line, line_no);
    ScoreRecord r;
    r.instance_index = detail::field<std::size_t>(j, "instance_index", line_no);
    if (!j.contains("m_remove")) throw ParseError(line_no, "missing field 'm_remove'");
    r.m_remove = detail::finite_number(j.at("m_remove"), line_no, "field 'm_remove'");
    if (j.contains("m_replace") && !j.at("m_replace").is_null()) {
      r.m_replace = detail::finite_number(j.at("m_replace"), line_no, "field 'm_replace'");
    }
    if (j.contains("per_token")) r.per_token = detail::field<std::vector<double>>(j, "per_token", line_no);
    if (j.contains("baseline_kind") && !j.at("baseline_kind").is_null()) {
      try {
        r.baseline_kind = parse_baseline_kind(detail::field<std::string>(j, "baseline_kind", line_no));
      } catch (const UsageError& e) {
        throw ParseError(line_no, e.what());
      }
    }
    if (j.contains("riemann_steps") && !j.at("riemann_steps").is_null()) {
      r.riemann_steps = detail::field<std::size_t>(j, "riemann_steps", line_no);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void save_scores(const std::filesystem::path& path, std::span<const ScoreRecord> records) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write scores '" + path.string() + "'");
  write_scores(out, records);
}

inline std::vector<ScoreRecord> load_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open scores '" + path.string() + "'");
  return read_scores(in);
}

}  // namespace memscore
