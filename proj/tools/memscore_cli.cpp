// memscore: train, score, attribute and run the validation protocols from the command line.
//
// Exit codes: 0 success, 2 usage or input errors, 1 runtime failures (stage named on stderr).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "memscore/memscore.hpp"

#ifndef MEMSCORE_VERSION
#define MEMSCORE_VERSION "0.0.0"
#endif
#ifndef MEMSCORE_GIT_STAMP
#define MEMSCORE_GIT_STAMP "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace memscore;

namespace {

// Errors raised while the stage is "config" or "load" are the caller's fault (exit 2).
std::string g_stage = "config";

struct ModelOpts {
  double lambda = 0.1;
  double lr = 0.5;
  std::size_t max_iters = 50000;
  double grad_tol = 1e-8;
  double init_scale = 0.0;
  std::uint64_t seed = 0;
};

struct EngineOpts {
  std::string solver = "direct";
  double cg_tol = 1e-10;
  std::size_t cg_max_iters = 0;
  double damping = 0.0;
  bool allow_unconverged = false;
};

struct BaselineOpts {
  std::string kind = "zero";
  std::vector<double> row;
};

struct Options {
  std::string out_dir;
  ModelOpts model;
  EngineOpts engine;
  BaselineOpts baseline;

  // synth
  std::string synth_kind = "longtail";
  LongTailSpec longtail;
  GaussianSpec gaussian;
  std::uint64_t synth_seed = 0;

  std::string data;
  std::string test;
  std::string model_path;

  bool with_replace = false;
  std::vector<std::size_t> instances;
  std::size_t steps = kDefaultRiemannSteps;

  std::vector<double> fractions{0.1, 0.2, 0.3};
  std::size_t num_seeds = 5;
  std::uint64_t master_seed = 0;

  double top_instance_fraction = 0.1;
  std::vector<double> token_fractions{0.1, 0.3, 0.5};

  std::vector<std::uint64_t> seeds{0, 1, 2};

  double top_frac = 0.1;
  double bottom_frac = 0.1;
  double smoothing_k = 0.01;
  std::size_t positive_class = 1;
};

void add_out_dir(CLI::App* cmd, Options& o) {
  cmd->add_option("--out-dir,-o", o.out_dir, "Directory receiving all outputs")->required();
}

void add_model_opts(CLI::App* cmd, ModelOpts& m) {
  cmd->add_option("--lambda", m.lambda, "Ridge coefficient")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--lr", m.lr, "Gradient-descent step cap")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--max-iters", m.max_iters, "Training iteration limit")->capture_default_str();
  cmd->add_option("--grad-tol", m.grad_tol, "Stop when the risk gradient norm falls below this")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--init-scale", m.init_scale, "Std of the random initialization (0 starts at zero)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--seed", m.seed, "Initialization seed")->capture_default_str();
}

void add_engine_opts(CLI::App* cmd, EngineOpts& e) {
  cmd->add_option("--solver", e.solver, "Inverse-Hessian solver")
      ->capture_default_str()
      ->check(CLI::IsMember({"direct", "cg"}));
  cmd->add_option("--cg-tol", e.cg_tol, "Relative residual target for cg")->capture_default_str();
  cmd->add_option("--cg-max-iters", e.cg_max_iters, "cg iteration cap (0 = 10 x parameters)")->capture_default_str();
  cmd->add_option("--damping", e.damping, "Added to the Hessian diagonal")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  cmd->add_flag("--allow-unconverged", e.allow_unconverged, "Score a model whose risk gradient is not small");
}

void add_baseline_opts(CLI::App* cmd, BaselineOpts& b) {
  cmd->add_option("--baseline", b.kind, "Baseline token row")
      ->capture_default_str()
      ->check(CLI::IsMember({"zero", "mean", "custom"}));
  cmd->add_option("--baseline-row", b.row, "Comma-separated row for --baseline custom")->delimiter(',');
}

TrainConfig train_config(const ModelOpts& m) {
  TrainConfig cfg;
  cfg.learning_rate = m.lr;
  cfg.max_iters = m.max_iters;
  cfg.grad_tol = m.grad_tol;
  cfg.init_scale = m.init_scale;
  cfg.seed = m.seed;
  validate(cfg);
  return cfg;
}

EngineOptions engine_options(const EngineOpts& e) {
  EngineOptions opts;
  opts.solver_mode = parse_solver_mode(e.solver);
  opts.cg_tol = e.cg_tol;
  opts.cg_max_iters = e.cg_max_iters;
  opts.damping = e.damping;
  opts.allow_unconverged = e.allow_unconverged;
  return opts;
}

BaselineSpec baseline_spec(const BaselineOpts& b, const Dataset& data, std::size_t d) {
  std::optional<Eigen::RowVectorXd> row;
  if (!b.row.empty()) {
    row = Eigen::Map<const Eigen::RowVectorXd>(b.row.data(), static_cast<Eigen::Index>(b.row.size()));
  }
  return resolve_baseline(parse_baseline_kind(b.kind), data, d, row);
}

ordered_json model_json(const ModelOpts& m) {
  return {{"lambda", m.lambda},         {"lr", m.lr},       {"max_iters", m.max_iters},
          {"grad_tol", m.grad_tol},     {"init_scale", m.init_scale}, {"seed", m.seed}};
}

ordered_json engine_json(const EngineOpts& e) {
  return {{"solver", e.solver},
          {"cg_tol", e.cg_tol},
          {"cg_max_iters", e.cg_max_iters},
          {"damping", e.damping},
          {"allow_unconverged", e.allow_unconverged}};
}

ordered_json baseline_json(const BaselineOpts& b) {
  return {{"kind", b.kind}, {"row", b.row}};
}

fs::path prepare_out_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw UsageError("cannot create output directory '" + dir + "'");
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

void write_manifest(const fs::path& dir, const std::string& command, ordered_json config,
                    const std::vector<std::string>& outputs, ordered_json extra = ordered_json::object()) {
  ordered_json m;
  m["tool"] = "memscore";
  m["version"] = MEMSCORE_VERSION;
  m["git"] = MEMSCORE_GIT_STAMP;
  m["command"] = command;
  m["config"] = std::move(config);
  m["outputs"] = outputs;
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

LoadedDataset load(const std::string& path) {
  if (path.empty()) throw UsageError("a dataset path is required");
  return load_dataset(path);
}

ModelState obtain_model(const Options& o, const LoadedDataset& ds, std::optional<TrainReport>& report) {
  if (!o.model_path.empty()) {
    g_stage = "load";
    auto m = load_model(o.model_path);
    if (m.feature_dim != ds.schema.feature_dim || m.num_classes != ds.schema.num_classes) {
      throw UsageError("model shape does not match the dataset schema");
    }
    return m;
  }
  g_stage = "train";
  auto fit = train(ds.instances, ds.schema.num_classes, o.model.lambda, train_config(o.model));
  report = fit.report;
  return fit.model;
}

ordered_json report_json(const std::optional<TrainReport>& r) {
  if (!r) return nullptr;
  return {{"final_grad_norm", r->final_grad_norm},
          {"iters_used", r->iters_used},
          {"converged", r->converged},
          {"final_risk", r->final_risk}};
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
  const auto dir = prepare_out_dir(o.out_dir);
  ordered_json cfg;
  cfg["kind"] = o.synth_kind;
  cfg["seed"] = o.synth_seed;
  g_stage = "synth";
  if (o.synth_kind == "longtail") {
    LongTailSpec spec = o.longtail;
    spec.seed = o.synth_seed;
    validate(spec);
    cfg["longtail"] = {{"num_head_subpops", spec.num_head_subpops},
                       {"num_tail_subpops", spec.num_tail_subpops},
                       {"head_frequency", spec.head_frequency},
                       {"tail_frequency", spec.tail_frequency},
                       {"noise_sigma", spec.noise_sigma},
                       {"atypical_flip_features", spec.atypical_flip_features},
                       {"test_tail_presence", spec.test_tail_presence},
                       {"feature_dim", spec.feature_dim},
                       {"num_classes", spec.num_classes},
                       {"tokens_per_instance", spec.tokens_per_instance},
                       {"class_tokens", spec.class_tokens},
                       {"head_test_frequency", spec.head_test_frequency},
                       {"tail_test_frequency", spec.tail_test_frequency},
                       {"pattern_scale", spec.pattern_scale},
                       {"class_token_purity", spec.class_token_purity}};
    const auto split = generate_longtail(spec);
    g_stage = "write";
    const std::string source = "longtail seed " + std::to_string(spec.seed);
    save_dataset(dir / "train.jsonl", split.train, infer_schema(split.train, spec.num_classes, source + " train"));
    save_dataset(dir / "test.jsonl", split.test, infer_schema(split.test, spec.num_classes, source + " test"));
    write_manifest(dir, "synth", cfg, {"train.jsonl", "test.jsonl"});
  } else {
    GaussianSpec spec = o.gaussian;
    spec.seed = o.synth_seed;
    cfg["gaussian"] = {{"num_instances", spec.num_instances},
                       {"tokens_per_instance", spec.tokens_per_instance},
                       {"feature_dim", spec.feature_dim},
                       {"num_classes", spec.num_classes},
                       {"teacher_scale", spec.teacher_scale},
                       {"label_noise", spec.label_noise}};
    const auto data = generate_gaussian(spec);
    g_stage = "write";
    save_dataset(dir / "data.jsonl", data,
                 infer_schema(data, spec.num_classes, "gaussian seed " + std::to_string(spec.seed)));
    write_manifest(dir, "synth", cfg, {"data.jsonl"});
  }
  return 0;
}

int cmd_train(const Options& o) {
  const auto dir = prepare_out_dir(o.out_dir);
  const auto tc = train_config(o.model);
  g_stage = "load";
  const auto ds = load(o.data);
  g_stage = "train";
  const auto fit = train(ds.instances, ds.schema.num_classes, o.model.lambda, tc);
  g_stage = "write";
  save_model(dir / "model.json", fit.model, fit.report);
  write_manifest(dir, "train", {{"data", o.data}, {"model", model_json(o.model)}}, {"model.json"},
                 {{"train_report", report_json(fit.report)}});
  return 0;
}

int cmd_score(const Options& o) {
  const auto dir = prepare_out_dir(o.out_dir);
  train_config(o.model);
  const auto opts = engine_options(o.engine);
  g_stage = "load";
  const auto ds = load(o.data);
  const auto spec = baseline_spec(o.baseline, ds.instances, ds.schema.feature_dim);
  std::optional<TrainReport> report;
  const auto model = obtain_model(o, ds, report);
  g_stage = "engine";
  const InfluenceEngine engine(model, ds.instances, opts);
  g_stage = "score";
  std::vector<ScoreRecord> records(ds.instances.size());
  parallel_for(records.size(), [&](std::size_t i) {
    const auto score = o.with_replace ? engine.mem_replace(i, make_baseline(ds.instances[i], spec))
                                      : engine.mem_remove(i);
    records[i] = to_record(score, spec.kind);
  });
  const auto ranking = engine.rank_by_memorization();
  g_stage = "write";
  save_scores(dir / "scores.jsonl", records);
  std::ostringstream csv;
  csv.precision(17);
  csv << "rank,instance_index,m_remove\n";
  for (std::size_t r = 0; r < ranking.size(); ++r) {
    csv << r << ',' << ranking[r].instance_index << ',' << ranking[r].m_remove << '\n';
  }
  write_text(dir / "ranking.csv", csv.str());
  ordered_json cfg{{"data", o.data},
                   {"model_path", o.model_path},
                   {"model", model_json(o.model)},
                   {"engine", engine_json(o.engine)},
                   {"with_replace", o.with_replace},
                   {"baseline", baseline_json(o.baseline)}};
  write_manifest(dir, "score", cfg, {"scores.jsonl", "ranking.csv"},
                 {{"train_report", report_json(report)}, {"risk_grad_norm", engine.risk_grad_norm()}});
  return 0;
}

int cmd_attribute(const Options& o) {
  const auto dir = prepare_out_dir(o.out_dir);
  train_config(o.model);
  const auto opts = engine_options(o.engine);
  if (o.steps < 1) throw UsageError("--steps must be >= 1");
  g_stage = "load";
  const auto ds = load(o.data);
  const auto spec = baseline_spec(o.baseline, ds.instances, ds.schema.feature_dim);
  std::vector<std::size_t> indices = o.instances;
  if (indices.empty()) {
    for (std::size_t i = 0; i < ds.instances.size(); ++i) indices.push_back(i);
  }
  for (const auto i : indices) {
    if (i >= ds.instances.size()) throw UsageError("instance index " + std::to_string(i) + " out of range");
  }
  std::optional<TrainReport> report;
  const auto model = obtain_model(o, ds, report);
  g_stage = "engine";
  const InfluenceEngine engine(model, ds.instances, opts);
  g_stage = "attribute";
  std::vector<ScoreRecord> records(indices.size());
  parallel_for(indices.size(), [&](std::size_t k) {
    const std::size_t i = indices[k];
    const auto rep = engine.attribute(i, make_baseline(ds.instances[i], spec), spec.kind, o.steps);
    records[k] = to_record(engine.mem_remove(i), rep);
  });
  g_stage = "write";
  save_scores(dir / "attributions.jsonl", records);
  ordered_json cfg{{"data", o.data},
                   {"model_path", o.model_path},
                   {"model", model_json(o.model)},
                   {"engine", engine_json(o.engine)},
                   {"baseline", baseline_json(o.baseline)},
                   {"riemann_steps", o.steps},
                   {"instances", o.instances}};
  write_manifest(dir, "attribute", cfg, {"attributions.jsonl"}, {{"train_report", report_json(report)}});
  return 0;
}

int cmd_ablate(const Options& o) {
  const auto dir = prepare_out_dir(o.out_dir);
  const auto tc = train_config(o.model);
  AblationConfig cfg;
  cfg.fractions = o.fractions;
  cfg.num_seeds = o.num_seeds;
  cfg.master_seed = o.master_seed;
  cfg.engine = engine_options(o.engine);
  validate(cfg);
  g_stage = "load";
  const auto train_ds = load(o.data);
  const auto test_ds = load(o.test);
  if (test_ds.schema.feature_dim != train_ds.schema.feature_dim ||
      test_ds.schema.num_classes != train_ds.schema.num_classes) {
    throw UsageError("train and test schemas differ");
  }
  g_stage = "ablate";
  const auto results =
      ablation_experiment(train_ds.instances, test_ds.instances, train_ds.schema.num_classes, o.model.lambda, cfg, tc);
  g_stage = "write";
  std::ostringstream csv;
  write_ablation_csv(csv, results);
  write_text(dir / "ablation.csv", csv.str());
  ordered_json c{{"train", o.data},     {"test", o.test},           {"model", model_json(o.model)},
                 {"engine", engine_json(o.engine)}, {"fractions", o.fractions}, {"num_seeds", o.num_seeds},
                 {"master_seed", o.master_seed}};
  write_manifest(dir, "ablate", c, {"ablation.csv"});
  return 0;
}

int cmd_reduction(const Options& o) {
  const auto dir = prepare_out_dir(o.out_dir);
  train_config(o.model);
  const auto opts = engine_options(o.engine);
  ReductionConfig cfg;
  cfg.top_instance_fraction = o.top_instance_fraction;
  cfg.token_fractions = o.token_fractions;
  cfg.riemann_steps = o.steps;
  cfg.seed = o.master_seed;
  if (o.steps < 1) throw UsageError("--steps must be >= 1");
  g_stage = "load";
  const auto ds = load(o.data);
  const auto spec = baseline_spec(o.baseline, ds.instances, ds.schema.feature_dim);
  std::optional<TrainReport> report;
  const auto model = obtain_model(o, ds, report);
  g_stage = "engine";
  const InfluenceEngine engine(model, ds.instances, opts);
  g_stage = "reduction";
  auto results = reduction_rate(engine, cfg, TokenArm::attributed, spec);
  const auto random = reduction_rate(engine, cfg, TokenArm::random, spec);
  results.insert(results.end(), random.begin(), random.end());
  g_stage = "write";
  std::ostringstream csv;
  write_reduction_csv(csv, results);
  write_text(dir / "reduction.csv", csv.str());
  ordered_json c{{"data", o.data},
                 {"model_path", o.model_path},
                 {"model", model_json(o.model)},
                 {"engine", engine_json(o.engine)},
                 {"baseline", baseline_json(o.baseline)},
                 {"riemann_steps", o.steps},
                 {"top_instance_fraction", o.top_instance_fraction},
                 {"token_fractions", o.token_fractions},
                 {"master_seed", o.master_seed}};
  write_manifest(dir, "reduction", c, {"reduction.csv"}, {{"train_report", report_json(report)}});
  return 0;
}

int cmd_stability(const Options& o) {
  const auto dir = prepare_out_dir(o.out_dir);
  const auto tc = train_config(o.model);
  const auto opts = engine_options(o.engine);
  g_stage = "load";
  const auto ds = load(o.data);
  g_stage = "stability";
  const auto rho = seed_stability(ds.instances, ds.schema.num_classes, o.model.lambda, o.seeds, tc, opts);
  g_stage = "write";
  std::ostringstream csv;
  csv.precision(17);
  csv << "seed";
  for (const auto s : o.seeds) csv << ',' << s;
  csv << '\n';
  for (Eigen::Index a = 0; a < rho.rows(); ++a) {
    csv << o.seeds[static_cast<std::size_t>(a)];
    for (Eigen::Index b = 0; b < rho.cols(); ++b) csv << ',' << rho(a, b);
    csv << '\n';
  }
  write_text(dir / "stability.csv", csv.str());
  ordered_json c{{"data", o.data}, {"model", model_json(o.model)}, {"engine", engine_json(o.engine)}, {"seeds", o.seeds}};
  write_manifest(dir, "stability", c, {"stability.csv"});
  return 0;
}

int cmd_fraction_summary(const Options& o) {
  const auto dir = prepare_out_dir(o.out_dir);
  train_config(o.model);
  const auto opts = engine_options(o.engine);
  g_stage = "load";
  const auto ds = load(o.data);
  if (!ds.schema.has_token_names) throw UsageError("fraction-summary needs a dataset with token names");
  if (o.positive_class >= ds.schema.num_classes) throw UsageError("--positive-class out of range");
  std::optional<TrainReport> report;
  const auto model = obtain_model(o, ds, report);
  g_stage = "engine";
  const InfluenceEngine engine(model, ds.instances, opts);
  g_stage = "fraction-summary";
  const auto ranking = engine.rank_by_memorization();
  std::vector<std::pair<std::size_t, std::size_t>> annotations;
  std::vector<std::size_t> labels;
  for (const auto& z : ds.instances) {
    annotations.push_back(phrase_counts(z, o.positive_class));
    labels.push_back(z.label);
  }
  const auto summary = group_fraction_summary(ranking, annotations, labels, ds.schema.num_classes, o.top_frac,
                                              o.bottom_frac, o.smoothing_k);
  for (const auto& w : summary.warnings) std::cerr << "warning: " << w << '\n';
  g_stage = "write";
  std::ostringstream csv;
  write_fraction_csv(csv, summary);
  write_text(dir / "fractions.csv", csv.str());
  ordered_json c{{"data", o.data},
                 {"model_path", o.model_path},
                 {"model", model_json(o.model)},
                 {"engine", engine_json(o.engine)},
                 {"top_frac", o.top_frac},
                 {"bottom_frac", o.bottom_frac},
                 {"k", o.smoothing_k},
                 {"positive_class", o.positive_class}};
  write_manifest(dir, "fraction-summary", c, {"fractions.csv"},
                 {{"train_report", report_json(report)}, {"warnings", summary.warnings}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memorization scores, attributions and validation protocols for pooled linear classifiers"};
  app.set_version_flag("--version", std::string(MEMSCORE_VERSION) + " (" + MEMSCORE_GIT_STAMP + ")");
  app.require_subcommand(1);
  app.footer(std::string("Environment: ") + kThreadsEnvVar + " sets the worker thread count.");

  Options o;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  add_out_dir(synth, o);
  synth->add_option("--kind", o.synth_kind, "Corpus type")
      ->capture_default_str()
      ->check(CLI::IsMember({"longtail", "gaussian"}));
  synth->add_option("--seed", o.synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--num-head", o.longtail.num_head_subpops, "longtail: head subpopulations")->capture_default_str();
  synth->add_option("--num-tail", o.longtail.num_tail_subpops, "longtail: tail subpopulations")->capture_default_str();
  synth->add_option("--head-frequency", o.longtail.head_frequency, "longtail: train instances per head subpop")
      ->capture_default_str();
  synth->add_option("--tail-frequency", o.longtail.tail_frequency, "longtail: train instances per tail subpop")
      ->capture_default_str();
  synth->add_option("--noise", o.longtail.noise_sigma, "longtail: token noise std")->capture_default_str();
  synth->add_option("--flip-features", o.longtail.atypical_flip_features,
                    "longtail: tail class tokens point at a wrong class")
      ->capture_default_str();
  synth->add_option("--test-tail-presence", o.longtail.test_tail_presence,
                    "longtail: probability a tail subpop appears in test")
      ->capture_default_str();
  synth->add_option("--dim", o.longtail.feature_dim, "longtail: feature dimension")->capture_default_str();
  synth->add_option("--classes", o.longtail.num_classes, "longtail: number of classes")->capture_default_str();
  synth->add_option("--n", o.gaussian.num_instances, "gaussian: number of instances")->capture_default_str();
  synth->add_option("--tokens", o.gaussian.tokens_per_instance, "gaussian: tokens per instance")->capture_default_str();
  synth->add_option("--gaussian-dim", o.gaussian.feature_dim, "gaussian: feature dimension")->capture_default_str();
  synth->add_option("--gaussian-classes", o.gaussian.num_classes, "gaussian: number of classes")->capture_default_str();
  synth->add_option("--label-noise", o.gaussian.label_noise, "gaussian: resampled label fraction")
      ->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "Fit the model and write model.json");
  add_out_dir(train_cmd, o);
  train_cmd->add_option("--data", o.data, "Training dataset (JSONL)")->required();
  add_model_opts(train_cmd, o.model);

  auto* score = app.add_subcommand("score", "Write m_remove (and optionally m_replace) for every instance");
  add_out_dir(score, o);
  score->add_option("--data", o.data, "Training dataset (JSONL)")->required();
  score->add_option("--model", o.model_path, "Pre-trained model.json (trained on the fly if absent)");
  score->add_flag("--replace", o.with_replace, "Also compute m_replace against the baseline");
  add_model_opts(score, o.model);
  add_engine_opts(score, o.engine);
  add_baseline_opts(score, o.baseline);

  auto* attribute = app.add_subcommand("attribute", "Per-token attribution of m_replace");
  add_out_dir(attribute, o);
  attribute->add_option("--data", o.data, "Training dataset (JSONL)")->required();
  attribute->add_option("--model", o.model_path, "Pre-trained model.json (trained on the fly if absent)");
  attribute->add_option("--instances", o.instances, "Comma-separated instance indices (default: all)")
      ->delimiter(',');
  attribute->add_option("--steps", o.steps, "Riemann steps along the baseline path")->capture_default_str();
  add_model_opts(attribute, o.model);
  add_engine_opts(attribute, o.engine);
  add_baseline_opts(attribute, o.baseline);

  auto* ablate = app.add_subcommand("ablate", "Remove top-memorized vs random instances and retrain");
  add_out_dir(ablate, o);
  ablate->add_option("--train", o.data, "Training dataset (JSONL)")->required();
  ablate->add_option("--test", o.test, "Test dataset (JSONL)")->required();
  ablate->add_option("--fractions", o.fractions, "Comma-separated removal fractions")
      ->delimiter(',')
      ->capture_default_str();
  ablate->add_option("--num-seeds", o.num_seeds, "Retrains per cell")->capture_default_str();
  ablate->add_option("--master-seed", o.master_seed, "Seed for the random arm")->capture_default_str();
  add_model_opts(ablate, o.model);
  add_engine_opts(ablate, o.engine);

  auto* reduction = app.add_subcommand("reduction", "Reduction Rate for attributed vs random token removal");
  add_out_dir(reduction, o);
  reduction->add_option("--data", o.data, "Training dataset (JSONL)")->required();
  reduction->add_option("--model", o.model_path, "Pre-trained model.json (trained on the fly if absent)");
  reduction->add_option("--top-fraction", o.top_instance_fraction, "Fraction of top memorized instances")
      ->capture_default_str();
  reduction->add_option("--token-fractions", o.token_fractions, "Comma-separated token fractions")
      ->delimiter(',')
      ->capture_default_str();
  reduction->add_option("--steps", o.steps, "Riemann steps along the baseline path")->capture_default_str();
  reduction->add_option("--master-seed", o.master_seed, "Seed for the random arm")->capture_default_str();
  add_model_opts(reduction, o.model);
  add_engine_opts(reduction, o.engine);
  add_baseline_opts(reduction, o.baseline);

  auto* stability = app.add_subcommand("stability", "Pairwise Spearman of rankings across initialization seeds");
  add_out_dir(stability, o);
  stability->add_option("--data", o.data, "Training dataset (JSONL)")->required();
  stability->add_option("--seeds", o.seeds, "Comma-separated initialization seeds")
      ->delimiter(',')
      ->capture_default_str();
  add_model_opts(stability, o.model);
  add_engine_opts(stability, o.engine);

  auto* fraction = app.add_subcommand("fraction-summary", "Positive-phrase fraction of top / all / bottom groups");
  add_out_dir(fraction, o);
  fraction->add_option("--data", o.data, "Dataset with class:<c> token names (JSONL)")->required();
  fraction->add_option("--model", o.model_path, "Pre-trained model.json (trained on the fly if absent)");
  fraction->add_option("--top-frac", o.top_frac, "Top group fraction per class")->capture_default_str();
  fraction->add_option("--bottom-frac", o.bottom_frac, "Bottom group fraction per class")->capture_default_str();
  fraction->add_option("--k", o.smoothing_k, "Add-k smoothing")->capture_default_str();
  fraction->add_option("--positive-class", o.positive_class, "Class whose phrases count as positive")
      ->capture_default_str();
  add_model_opts(fraction, o.model);
  add_engine_opts(fraction, o.engine);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "synth") return cmd_synth(o);
    if (command == "train") return cmd_train(o);
    if (command == "score") return cmd_score(o);
    if (command == "attribute") return cmd_attribute(o);
    if (command == "ablate") return cmd_ablate(o);
    if (command == "reduction") return cmd_reduction(o);
    if (command == "stability") return cmd_stability(o);
    if (command == "fraction-summary") return cmd_fraction_summary(o);
  } catch (const SolverError& e) {
    std::cerr << "memscore " << command << ": stage '" << g_stage << "' failed: " << e.what() << '\n';
    return 1;
  } catch (const memscore::ParseError& e) {
    std::cerr << "memscore " << command << ": error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    // UsageError and SchemaError.
    const bool caller_error = g_stage == "config" || g_stage == "load";
    std::cerr << "memscore " << command << ": " << (caller_error ? "error" : "stage '" + g_stage + "' failed")
              << ": " << e.what() << '\n';
    return caller_error ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "memscore " << command << ": stage '" << g_stage << "' failed: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
