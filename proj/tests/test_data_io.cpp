#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "memscore/data_io.hpp"
#include "memscore/influence.hpp"
#include "memscore/trainer.hpp"

namespace memscore {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "memscore_test_data_io";
  fs::create_directories(dir);
  return dir / name;
}

TEST(LongTail, TailSubpopsAreSingletonsInTrain) {
  LongTailSpec spec;
  spec.num_tail_subpops = 10;
  spec.tail_frequency = 1;
  const auto split = generate_longtail(spec);
  std::map<std::int64_t, std::size_t> counts;
  for (const auto& z : split.train) ++counts[*z.subpop_id];
  std::size_t singletons = 0;
  for (const auto& [id, c] : counts) singletons += c == 1 ? 1 : 0;
  EXPECT_EQ(singletons, 10u);
  EXPECT_EQ(split.train.size(), spec.num_head_subpops * spec.head_frequency + 10u);
}

TEST(LongTail, ZeroNoiseMakesSubpopInstancesIdentical) {
  LongTailSpec spec;
  spec.noise_sigma = 0.0;
  spec.tail_frequency = 2;
  const auto split = generate_longtail(spec);
  std::map<std::int64_t, const Instance*> first;
  for (const auto* set : {&split.train, &split.test}) {
    for (const auto& z : *set) {
      auto [it, fresh] = first.emplace(*z.subpop_id, &z);
      if (!fresh) {
        EXPECT_TRUE(z == *it->second) << "subpop " << *z.subpop_id;
      }
    }
  }
}

TEST(LongTail, DeterministicAndSeedSensitive) {
  LongTailSpec spec;
  spec.seed = 11;
  const auto a = generate_longtail(spec);
  const auto b = generate_longtail(spec);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  spec.seed = 12;
  EXPECT_NE(generate_longtail(spec).train, a.train);
}

TEST(LongTail, TestSubpopsAlwaysCoveredByTrain) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    LongTailSpec spec;
    spec.seed = seed;
    spec.test_tail_presence = 0.5;
    spec.num_classes = 2 + seed % 3;
    const auto split = generate_longtail(spec);
    std::set<std::int64_t> train_ids;
    for (const auto& z : split.train) train_ids.insert(*z.subpop_id);
    for (const auto& z : split.test) EXPECT_TRUE(train_ids.count(*z.subpop_id));
    for (const auto& z : split.train) EXPECT_LT(z.label, spec.num_classes);
  }
}

TEST(LongTail, InvalidSpecs) {
  LongTailSpec spec;
  spec.head_frequency = 1;
  EXPECT_THROW(generate_longtail(spec), UsageError);
  spec = {};
  spec.num_head_subpops = 0;
  spec.num_tail_subpops = 0;
  EXPECT_THROW(generate_longtail(spec), UsageError);
  spec = {};
  spec.test_tail_presence = 0.0;
  EXPECT_THROW(generate_longtail(spec), UsageError);
  spec = {};
  spec.noise_sigma = -1.0;
  EXPECT_THROW(generate_longtail(spec), UsageError);
}

TEST(LongTail, PhraseCountsFollowTokenNames) {
  Instance z;
  z.features = Eigen::MatrixXd::Zero(4, 1);
  z.token_names = {"class:1", "class:0", "sig:3", "class:1"};
  EXPECT_EQ(phrase_counts(z), std::make_pair(std::size_t{2}, std::size_t{1}));
  EXPECT_EQ(phrase_counts(z, 0), std::make_pair(std::size_t{1}, std::size_t{2}));
}

TEST(LongTail, TopMemorizedOverRepresentTails) {
  LongTailSpec spec;
  const auto split = generate_longtail(spec);
  const auto fit = train(split.train, 2, 0.01, {});
  const InfluenceEngine engine(fit.model, split.train);
  const auto ranking = engine.rank_by_memorization();
  const std::size_t top = ranking.size() / 10;
  auto is_tail = [&](const Instance& z) { return *z.subpop_id >= static_cast<std::int64_t>(spec.num_head_subpops); };
  std::size_t tails_top = 0, tails_all = 0;
  for (std::size_t i = 0; i < top; ++i) tails_top += is_tail(split.train[ranking[i].instance_index]) ? 1 : 0;
  for (const auto& z : split.train) tails_all += is_tail(z) ? 1 : 0;
  const double rate_top = static_cast<double>(tails_top) / static_cast<double>(top);
  const double rate_all = static_cast<double>(tails_all) / static_cast<double>(split.train.size());
  EXPECT_GE(rate_top, 3.0 * rate_all);
}

TEST(Gaussian, ShapeAndDeterminism) {
  GaussianSpec gs;
  gs.seed = 3;
  const auto a = generate_gaussian(gs);
  EXPECT_EQ(a.size(), 50u);
  EXPECT_EQ(a[0].features.rows(), 4);
  EXPECT_EQ(a[0].features.cols(), 5);
  EXPECT_EQ(a, generate_gaussian(gs));
}

TEST(DatasetFile, BitExactRoundTrip) {
  LongTailSpec spec;
  spec.seed = 5;
  auto data = generate_longtail(spec).train;
  data[0].weight = 0.1 + 0.2;  // not a short decimal
  data[1].features(0, 0) = std::nextafter(1.0, 2.0);
  data[2].features(0, 1) = 4.9e-324;
  data[3].features(1, 2) = -1.7976931348623157e308;
  const auto schema = infer_schema(data, 2, "longtail seed 5");
  const auto path = temp_path("roundtrip.jsonl");
  save_dataset(path, data, schema);
  const auto loaded = load_dataset(path);
  EXPECT_EQ(loaded.instances, data);
  EXPECT_EQ(loaded.schema.feature_dim, 32u);
  EXPECT_TRUE(loaded.schema.has_token_names);
  EXPECT_EQ(loaded.schema.source, "longtail seed 5");
  EXPECT_EQ(load_dataset(path, schema), data);
}

TEST(DatasetFile, HeaderOnlyIsEmptyDataset) {
  std::stringstream ss;
  write_dataset(ss, Dataset{}, DatasetSchema{3, 2, false, ""});
  const auto loaded = read_dataset(ss);
  EXPECT_TRUE(loaded.instances.empty());
  EXPECT_EQ(loaded.schema.feature_dim, 3u);
}

std::string header(std::size_t d = 2) {
  return R"({"format":"memscore-dataset","version":1,"feature_dim":)" + std::to_string(d) +
         R"(,"num_classes":2,"has_token_names":false,"source":""})";
}

std::size_t error_line(const std::string& text) {
  std::istringstream in(text);
  try {
    read_dataset(in);
  } catch (const ParseError& e) {
    return e.line();
  }
  return 0;
}

TEST(DatasetFile, NanFeatureRejectedWithLineNumber) {
  const std::string good = R"({"label":0,"features":[[1.0,2.0]]})";
  const std::string text = header() + "\n" + good + "\n" + good + "\n" + R"({"label":1,"features":[[NaN,2.0]]})" + "\n";
  EXPECT_EQ(error_line(text), 4u);
  std::istringstream in(text);
  try {
    read_dataset(in);
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
  }
}

TEST(DatasetFile, SchemaViolationsNameLineAndField) {
  const auto h = header();
  EXPECT_EQ(error_line(h + "\n" + R"({"label":2,"features":[[1.0,2.0]]})"), 2u);
  EXPECT_EQ(error_line(h + "\n" + R"({"label":0,"features":[[1.0]]})"), 2u);
  EXPECT_EQ(error_line(h + "\n" + R"({"features":[[1.0,2.0]]})"), 2u);
  EXPECT_EQ(error_line(h + "\n\n" + R"({"label":0,"features":[[1.0,2.0]],"weight":-1})"), 3u);
  EXPECT_EQ(error_line(h + "\n" + R"({"label":0,"features":[[1.0,2.0]],"token_names":["a","b"]})"), 2u);
  EXPECT_EQ(error_line(R"({"format":"other"})"), 1u);
  EXPECT_EQ(error_line(""), 1u);
  EXPECT_EQ(error_line(h + "\n{not json"), 2u);
  EXPECT_EQ(error_line(h + "\n" + R"({"label":0,"features":[[1e999,2.0]]})"), 2u);

  std::istringstream in(h + "\n" + R"({"label":0})");
  try {
    read_dataset(in);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("features"), std::string::npos);
  }
}

TEST(DatasetFile, ExpectedSchemaMismatch) {
  const auto path = temp_path("mismatch.jsonl");
  GaussianSpec gs;
  const auto data = generate_gaussian(gs);
  save_dataset(path, data, infer_schema(data, 2));
  EXPECT_THROW(load_dataset(path, DatasetSchema{4, 2, false, ""}), ParseError);
  EXPECT_THROW(load_dataset(temp_path("missing.jsonl")), UsageError);
}

TEST(Baseline, ZeroMeanAndIdempotence) {
  GaussianSpec gs;
  const auto data = generate_gaussian(gs);
  const auto zero = make_baseline(data[0], BaselineSpec::zero(5));
  EXPECT_EQ(zero.features.rows(), data[0].features.rows());
  EXPECT_EQ(zero.label, data[0].label);
  EXPECT_TRUE(zero.features.isZero(0.0));

  const auto spec = BaselineSpec::mean_of(data);
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(5);
  double count = 0;
  for (const auto& z : data) {
    for (Eigen::Index t = 0; t < z.features.rows(); ++t, ++count) mean += z.features.row(t);
  }
  mean /= count;
  const auto m = make_baseline(data[7], spec);
  for (Eigen::Index t = 0; t < m.features.rows(); ++t) EXPECT_LT((m.features.row(t) - mean).norm(), 1e-14);

  EXPECT_EQ(make_baseline(m, spec), m);
  EXPECT_EQ(make_baseline(zero, BaselineSpec::zero(5)), zero);
}

TEST(Baseline, ResolveAndErrors) {
  GaussianSpec gs;
  const auto data = generate_gaussian(gs);
  EXPECT_THROW(resolve_baseline(BaselineKind::custom, data, 5), UsageError);
  EXPECT_THROW(resolve_baseline(BaselineKind::custom, data, 5, Eigen::RowVectorXd::Zero(4)), UsageError);
  const auto custom = resolve_baseline(BaselineKind::custom, data, 5, Eigen::RowVectorXd::Constant(5, 0.5));
  EXPECT_EQ(make_baseline(data[0], custom).features(2, 3), 0.5);
  EXPECT_EQ(parse_baseline_kind("mean"), BaselineKind::mean);
  EXPECT_THROW(parse_baseline_kind("mask"), UsageError);
  const std::vector<std::size_t> tokens{1, 3};
  const auto partial = replace_tokens(data[0], tokens, BaselineSpec::zero(5));
  EXPECT_TRUE(partial.features.row(1).isZero(0.0));
  EXPECT_EQ(partial.features.row(0), data[0].features.row(0));
}

TEST(ScoreFile, RoundTripWithNullFields) {
  std::vector<ScoreRecord> records(3);
  records[0].instance_index = 0;
  records[0].m_remove = 0.1 + 0.2;
  records[1].instance_index = 1;
  records[1].m_remove = -3e-300;
  records[1].m_replace = 1.0 / 3.0;
  records[1].baseline_kind = BaselineKind::zero;
  records[2].instance_index = 2;
  records[2].m_remove = 7.0;
  records[2].m_replace = 2.0;
  records[2].per_token = {0.5, 1.5};
  records[2].baseline_kind = BaselineKind::mean;
  records[2].riemann_steps = 50;
  const auto path = temp_path("scores.jsonl");
  save_scores(path, records);
  EXPECT_EQ(load_scores(path), records);

  std::ostringstream os;
  write_scores(os, std::span<const ScoreRecord>(records.data(), 1));
  EXPECT_EQ(os.str(),
            R"({"instance_index":0,"m_remove":0.30000000000000004,"m_replace":null,"per_token":[],)"
            R"("baseline_kind":null,"riemann_steps":null})"
            "\n");

  std::istringstream bad("{\"instance_index\":0}\n");
  EXPECT_THROW(read_scores(bad), ParseError);
}

TEST(ModelFile, RoundTrip) {
  GaussianSpec gs;
  const auto data = generate_gaussian(gs);
  const auto fit = train(data, 2, 0.1, {});
  const auto path = temp_path("model.json");
  save_model(path, fit.model, fit.report);
  const auto back = load_model(path);
  EXPECT_EQ(back.theta, fit.model.theta);
  EXPECT_EQ(back.ridge_lambda, 0.1);
  EXPECT_EQ(back.num_classes, 2u);
  EXPECT_EQ(back.feature_dim, 5u);
}

}  // namespace
}  // namespace memscore
