// Acceptance suite: prints one PASS/FAIL line per criterion and exits nonzero if any fail.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "memscore/memscore.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace memscore;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double target_prob(const ModelState& m, const Instance& z) {
  return predict_proba(m, z)(static_cast<Eigen::Index>(z.label));
}

Dataset fixture() { return load_dataset(fs::path(MEMSCORE_TEST_DATA) / "fixture50.jsonl").instances; }

// 1. Spearman(m_remove / n, exact LOO delta) >= 0.97 on each of 10 datasets, <= 2 min.
Outcome loo_fidelity() {
  const auto t0 = Clock::now();
  double worst = 1.0;
  for (std::uint64_t k = 0; k < 10; ++k) {
    GaussianSpec gs;
    gs.seed = 100 + k;
    const auto data = generate_gaussian(gs);
    TrainConfig cfg;
    cfg.grad_tol = 1e-10;
    const auto full = train(data, 2, 0.1, cfg).model;
    const InfluenceEngine engine(full, data);
    const double n = static_cast<double>(data.size());
    std::vector<double> scores(data.size()), deltas(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
      scores[i] = engine.mem_remove(i).m_remove / n;
      const auto loo = retrain_without(data, i, 2, 0.1, cfg, full.theta).model;
      deltas[i] = target_prob(full, data[i]) - target_prob(loo, data[i]);
    });
    worst = std::min(worst, spearman(scores, deltas));
  }
  const double secs = seconds_since(t0);
  return {worst >= 0.97 && secs <= 120.0, fmt("min Spearman %.4f over 10 datasets, %.1f s", worst, secs)};
}

// 2. Two-sided difference quotients at eps = 1e-4 match -m_remove and -m_replace within 1e-3.
Outcome epsilon_derivative() {
  const auto data = fixture();
  TrainConfig cfg;
  cfg.grad_tol = 1e-12;
  const auto full = train(data, 2, 0.1, cfg).model;
  const InfluenceEngine engine(full, data);
  const auto spec = BaselineSpec::zero(data.front().feature_dim());
  const double eps = 1e-4;
  std::vector<int> ok(data.size(), 0);
  std::vector<double> err_remove(data.size()), err_replace(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const Instance base = make_baseline(data[i], spec);
    const auto up = retrain_reweighted(data, i, eps, 2, 0.1, cfg, full.theta).model;
    const auto down = retrain_reweighted(data, i, -eps, 2, 0.1, cfg, full.theta).model;
    const double d_remove = (target_prob(up, data[i]) - target_prob(down, data[i])) / (2 * eps);
    const auto rup = retrain_replaced(data, i, base, eps, 2, 0.1, cfg, full.theta).model;
    const auto rdown = retrain_replaced(data, i, base, -eps, 2, 0.1, cfg, full.theta).model;
    const double d_replace = (target_prob(rup, data[i]) - target_prob(rdown, data[i])) / (2 * eps);
    const auto score = engine.mem_replace(i, base);
    err_remove[i] = testing::rel_err(d_remove, -score.m_remove);
    err_replace[i] = testing::rel_err(d_replace, -*score.m_replace);
    ok[i] = err_remove[i] <= 1e-3 && err_replace[i] <= 1e-3 ? 1 : 0;
  });
  std::size_t passed = 0;
  for (const int v : ok) passed += static_cast<std::size_t>(v);
  const double frac = static_cast<double>(passed) / static_cast<double>(data.size());
  std::vector<double> er = err_remove, ep = err_replace;
  std::sort(er.begin(), er.end());
  std::sort(ep.begin(), ep.end());
  return {frac >= 0.95, fmt("%zu/%zu instances within 1e-3 (median rel err remove %.1e, replace %.1e)", passed,
                            data.size(), er[er.size() / 2], ep[ep.size() / 2])};
}

// 3. Riemann completeness at 2000 steps on every instance; error shrinks from 50 to 1600 steps.
Outcome attribution_completeness() {
  const auto data = fixture();
  TrainConfig cfg;
  cfg.grad_tol = 1e-10;
  const auto full = train(data, 2, 0.1, cfg).model;
  const InfluenceEngine engine(full, data);
  const auto spec = BaselineSpec::zero(data.front().feature_dim());
  std::vector<double> gaps(data.size());
  std::vector<int> monotone(data.size(), 1);
  parallel_for(data.size(), [&](std::size_t i) {
    const Instance base = make_baseline(data[i], spec);
    gaps[i] = engine.attribute(i, base, spec.kind, 2000).relative_gap();
    double previous = INFINITY;
    for (std::size_t steps = 50; steps <= 1600; steps *= 2) {
      const double gap = engine.attribute(i, base, spec.kind, steps).relative_gap();
      if (!(gap < previous)) monotone[i] = 0;
      previous = gap;
    }
  });
  const double worst = *std::max_element(gaps.begin(), gaps.end());
  const bool all_monotone = std::all_of(monotone.begin(), monotone.end(), [](int v) { return v == 1; });
  return {worst <= 1e-3 && all_monotone,
          fmt("max relative gap %.2e at 2000 steps; monotone decrease 50..1600: %s", worst,
              all_monotone ? "yes" : "no")};
}

// 4. Analytic derivatives against central finite differences on >= 100 random cases.
Outcome derivative_oracles() {
  using testing::fd_gradient;
  using testing::fd_jacobian;
  using testing::rel_err;
  const int cases = 120;
  double worst_grad = 0, worst_hess = 0, worst_hvp = 0, worst_mixed = 0, worst_sym = 0, worst_eig = INFINITY;
  for (int s = 0; s < cases; ++s) {
    const auto rc = testing::random_case(50000 + static_cast<std::uint64_t>(s), 0.3);
    const auto C = rc.model.num_classes, d = rc.model.feature_dim;
    const Instance& z = rc.data.front();
    auto probe = rc.model;

    const auto fd_g =
        fd_gradient([&](const Eigen::VectorXd& th) { return testing::naive_loss(th, C, d, z.features, z.label); },
                    rc.model.theta);
    const auto fd_r = fd_gradient(
        [&](const Eigen::VectorXd& th) { return testing::naive_risk(th, C, d, 0.3, rc.data); }, rc.model.theta);
    worst_grad = std::max({worst_grad, rel_err(loss(rc.model, z).grad_theta, fd_g),
                           rel_err(empirical_risk_grad(rc.model, rc.data), fd_r)});

    const auto H = hessian(rc.model, rc.data);
    const auto fd_h = fd_jacobian(
        [&](const Eigen::VectorXd& th) {
          probe.theta = th;
          return empirical_risk_grad(probe, rc.data);
        },
        rc.model.theta);
    worst_hess = std::max(worst_hess, rel_err(H, fd_h));
    worst_sym = std::max(worst_sym, (H - H.transpose()).cwiseAbs().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(H);
    worst_eig = std::min(worst_eig, eig.eigenvalues().minCoeff() - 0.3);

    std::mt19937_64 rng(static_cast<std::uint64_t>(s));
    const Eigen::VectorXd u = testing::random_vector(rng, rc.model.theta.size());
    const double h = testing::kFdStep;
    probe.theta = rc.model.theta + h * u;
    const Eigen::VectorXd up = empirical_risk_grad(probe, rc.data);
    probe.theta = rc.model.theta - h * u;
    const Eigen::VectorXd down = empirical_risk_grad(probe, rc.data);
    worst_hvp = std::max(worst_hvp, rel_err(hvp(rc.model, rc.data, u), Eigen::VectorXd((up - down) / (2 * h))));

    const Eigen::Index N = z.features.rows(), D = z.features.cols();
    Instance zp = z;
    const Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(z.features.data(), N * D);
    const auto fd_m = fd_gradient(
        [&](const Eigen::VectorXd& x) {
          zp.features = Eigen::Map<const Eigen::MatrixXd>(x.data(), N, D);
          return u.dot(loss(rc.model, zp).grad_theta);
        },
        flat);
    const Eigen::MatrixXd G = mixed_grad_input(rc.model, z, u);
    worst_mixed = std::max(worst_mixed, rel_err(Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(G.data(), N * D)), fd_m));
  }
  const bool pass = worst_grad <= 1e-5 && worst_hess <= 1e-5 && worst_hvp <= 1e-5 && worst_mixed <= 1e-5 &&
                    worst_sym <= 1e-12 && worst_eig >= -1e-9;
  return {pass, fmt("%d cases; max rel err grad %.1e hess %.1e hvp %.1e mixed %.1e; asym %.1e; min eig - lambda %.2e",
                    cases, worst_grad, worst_hess, worst_hvp, worst_mixed, worst_sym, worst_eig)};
}

constexpr double kLongTailLambda = 0.01;

TrainTestSplit longtail_corpus() {
  LongTailSpec spec;  // 6 head, 20 tail subpops, tail_frequency 1
  spec.seed = 0;
  return generate_longtail(spec);
}

// 5. Removing the top-20% memorized hurts test accuracy >= 2 points more than random removal.
Outcome marginal_utility(const TrainTestSplit& split) {
  const auto t0 = Clock::now();
  AblationConfig cfg;
  cfg.fractions = {0.0, 0.2};
  cfg.num_seeds = 5;
  cfg.master_seed = 2024;
  TrainConfig tc;
  tc.init_scale = 0.1;
  const auto results = ablation_experiment(split.train, split.test, 2, kLongTailLambda, cfg, tc);
  double reference = NAN;
  for (const auto& r : results) {
    if (r.arm == AblationArm::top_memorized && r.fraction == 0.0) reference = r.mean_test_accuracy;
  }
  const double top = accuracy_drop(results, AblationArm::top_memorized, 0.2, reference);
  const double random = accuracy_drop(results, AblationArm::uniform_random, 0.2, reference);
  const double secs = seconds_since(t0);
  return {top - random >= 0.02 && secs <= 300.0,
          fmt("reference acc %.4f; drop top-20%% %.2f pts vs random %.2f pts; %.1f s", reference, 100 * top,
              100 * random, secs)};
}

// 6. Attributed token removal reduces self-influence more than random removal.
Outcome reduction_rates(const InfluenceEngine& engine) {
  ReductionConfig cfg;
  cfg.seed = 7;
  const auto spec = BaselineSpec::zero(engine.model().feature_dim);
  const auto attributed = reduction_rate(engine, cfg, TokenArm::attributed, spec);
  const auto random = reduction_rate(engine, cfg, TokenArm::random, spec);
  bool pass = true;
  std::string detail;
  for (std::size_t f = 0; f < attributed.size(); ++f) {
    pass = pass && attributed[f].mean_reduction_rate > random[f].mean_reduction_rate;
    detail += fmt("%s%.0f%%: %.3f vs %.3f", f ? "; " : "", 100 * attributed[f].token_fraction_removed,
                  attributed[f].mean_reduction_rate, random[f].mean_reduction_rate);
  }
  return {pass, detail + fmt(" (%zu instances)", attributed.front().num_instances)};
}

// 7. Rankings from 3 random initializations agree pairwise at Spearman >= 0.9.
Outcome seed_stability_check(const TrainTestSplit& split) {
  TrainConfig tc;
  tc.init_scale = 0.1;
  const std::vector<std::uint64_t> seeds{11, 22, 33};
  const auto rho = seed_stability(split.train, 2, kLongTailLambda, seeds, tc);
  const double worst = rho.minCoeff();
  return {worst >= 0.9, fmt("min pairwise Spearman %.6f", worst)};
}

// 8. Top-10% memorized lean toward the opposing class's phrases, bottom-10% toward their own.
Outcome atypicality(const InfluenceEngine& engine) {
  const auto& data = engine.dataset();
  std::vector<std::pair<std::size_t, std::size_t>> annotations;
  std::vector<std::size_t> labels;
  for (const auto& z : data) {
    annotations.push_back(phrase_counts(z, 1));
    labels.push_back(z.label);
  }
  const auto summary = group_fraction_summary(engine.rank_by_memorization(), annotations, labels, 2, 0.1, 0.1);
  bool pass = summary.warnings.empty();
  std::string detail;
  for (std::size_t c = 0; c < 2; ++c) {
    const double top = summary.mean("top", c).value_or(NAN);
    const double all = summary.mean("all", c).value_or(NAN);
    const double bottom = summary.mean("bottom", c).value_or(NAN);
    // positive_fraction counts class-1 phrases: class 0's opposing direction is up, class 1's is down.
    const double sign = c == 0 ? 1.0 : -1.0;
    pass = pass && sign * (top - all) > 0 && sign * (bottom - all) < 0;
    detail += fmt("%sclass %zu top %.3f all %.3f bottom %.3f", c ? "; " : "", c, top, all, bottom);
  }
  return {pass, detail};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + MEMSCORE_CLI + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 9. Repeated CLI runs with identical seeds write byte-identical files (thread count varied too).
Outcome cli_determinism() {
  const auto root = fs::temp_directory_path() / "memscore_acceptance_cli";
  fs::remove_all(root);
  const auto data = (fs::path(MEMSCORE_TEST_DATA) / "fixture50.jsonl").string();
  const std::vector<std::string> commands{
      "score --data " + data + " --replace --baseline mean",
      "attribute --data " + data + " --instances 0,7,19",
      "reduction --data " + data + " --top-fraction 0.2 --master-seed 5",
      "ablate --train " + data + " --test " + data + " --fractions 0.1,0.2 --num-seeds 2 --master-seed 3",
  };
  std::size_t files = 0;
  for (std::size_t c = 0; c < commands.size(); ++c) {
    const auto a = root / ("a" + std::to_string(c));
    const auto b = root / ("b" + std::to_string(c));
    if (run_cli(commands[c] + " --out-dir " + a.string()) != 0) return {false, "run failed: " + commands[c]};
    if (run_cli(commands[c] + " --out-dir " + b.string()) != 0) return {false, "rerun failed: " + commands[c]};
    for (const auto& entry : fs::directory_iterator(a)) {
      ++files;
      const auto other = b / entry.path().filename();
      if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) {
        return {false, "differs: " + entry.path().filename().string() + " from " + commands[c]};
      }
    }
  }
  return {true, fmt("%zu output files byte-identical across %zu repeated commands", files, commands.size())};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](const char* id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << "  " << name << ": " << o.detail << std::endl;
    failures += o.pass ? 0 : 1;
  };

  report("C1", "LOO oracle fidelity", loo_fidelity);
  report("C2", "epsilon-derivative fidelity", epsilon_derivative);
  report("C3", "attribution completeness", attribution_completeness);
  report("C4", "derivative oracles", derivative_oracles);

  const auto split = longtail_corpus();
  TrainConfig tc;
  tc.grad_tol = 1e-10;
  const auto fit = train(split.train, 2, kLongTailLambda, tc);
  const InfluenceEngine engine(fit.model, split.train);
  report("C5", "marginal utility of memorized instances", [&] { return marginal_utility(split); });
  report("C6", "reduction rate, attributed vs random", [&] { return reduction_rates(engine); });
  report("C7", "seed stability", [&] { return seed_stability_check(split); });
  report("C8", "atypicality stratification", [&] { return atypicality(engine); });
  report("C9", "CLI determinism", cli_determinism);

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
