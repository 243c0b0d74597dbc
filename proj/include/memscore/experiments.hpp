#pragma once

// Validation protocols: removal ablation, Reduction Rate, seed stability, and the
// positive-phrase-fraction atypicality table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "memscore/baseline.hpp"
#include "memscore/errors.hpp"
#include "memscore/influence.hpp"
#include "memscore/instance.hpp"
#include "memscore/model.hpp"
#include "memscore/parallel.hpp"
#include "memscore/stats.hpp"
#include "memscore/trainer.hpp"

namespace memscore {

namespace detail {

/// Independent stream per (master seed, job coordinates).
inline std::mt19937_64 seeded_rng(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(a),      static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(c),      0x6d656d73u};
  return std::mt19937_64(seq);
}

inline std::size_t count_of(double fraction, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Removal ablation

enum class AblationArm { top_memorized, uniform_random };

inline std::string_view to_string(AblationArm a) {
  return a == AblationArm::top_memorized ? "top_memorized" : "uniform_random";
}

struct AblationConfig {
  std::vector<double> fractions{0.1, 0.2, 0.3};
  std::size_t num_seeds = 5;
  std::uint64_t master_seed = 0;
  std::vector<AblationArm> arms{AblationArm::top_memorized, AblationArm::uniform_random};
  EngineOptions engine;
};

struct ExperimentResult {
  AblationArm arm = AblationArm::top_memorized;
  double fraction = 0.0;
  std::size_t num_removed = 0;
  std::vector<double> seed_accuracies;
  double mean_test_accuracy = 0.0;
  double std_test_accuracy = 0.0;
  // Lowest m_remove among removed instances (mean over seeds for the random arm); NaN if none removed.
  double threshold_score = std::numeric_limits<double>::quiet_NaN();
  double abs_threshold_score = std::numeric_limits<double>::quiet_NaN();
  std::string warning;
};

inline void validate(const AblationConfig& cfg) {
  if (cfg.num_seeds < 2) throw UsageError("ablation: num_seeds must be >= 2");
  for (std::size_t i = 0; i < cfg.fractions.size(); ++i) {
    const double f = cfg.fractions[i];
    if (!(f >= 0.0 && f < 1.0)) throw UsageError("ablation: fractions must lie in [0, 1)");
    if (i > 0 && !(f > cfg.fractions[i - 1])) throw UsageError("ablation: fractions must be strictly increasing");
  }
}

/// Scores the full training set once, then for every fraction x arm removes instances,
/// retrains num_seeds times and measures test accuracy. Seed k sets the initialization
/// seed (train_cfg.seed + k) and, in the random arm, draws its own removal subset.
inline std::vector<ExperimentResult> ablation_experiment(std::span<const Instance> train_set,
                                                         std::span<const Instance> test_set, std::size_t num_classes,
                                                         double ridge_lambda, const AblationConfig& cfg,
                                                         const TrainConfig& train_cfg) {
  validate(cfg);
  if (cfg.fractions.empty()) return {};
  if (train_set.empty() || test_set.empty()) throw UsageError("ablation: train and test sets must be nonempty");

  const auto full = train(train_set, num_classes, ridge_lambda, train_cfg);
  const InfluenceEngine engine(full.model, Dataset(train_set.begin(), train_set.end()), cfg.engine);
  const auto ranking = engine.rank_by_memorization();
  std::vector<double> m_remove(train_set.size());
  for (const auto& s : ranking) m_remove[s.instance_index] = s.m_remove;

  struct Job {
    std::size_t cell;
    std::size_t seed;
  };
  struct Cell {
    AblationArm arm;
    double fraction;
    std::size_t fraction_index;
    std::size_t removed;
  };
  std::vector<Cell> cells;
  for (std::size_t fi = 0; fi < cfg.fractions.size(); ++fi) {
    for (const auto arm : cfg.arms) {
      cells.push_back({arm, cfg.fractions[fi], fi, detail::count_of(cfg.fractions[fi], train_set.size())});
    }
  }
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t k = 0; k < cfg.num_seeds; ++k) jobs.push_back({c, k});
  }

  struct JobOut {
    double accuracy = 0.0;
    double min_score = 0.0;
    double min_abs_score = 0.0;
    bool class_missing = false;
  };
  std::vector<JobOut> outputs(jobs.size());

  parallel_for(jobs.size(), [&](std::size_t j) {
    const Cell& cell = cells[jobs[j].cell];
    const std::size_t k = jobs[j].seed;
    std::vector<std::size_t> removed;
    if (cell.arm == AblationArm::top_memorized) {
      for (std::size_t i = 0; i < cell.removed; ++i) removed.push_back(ranking[i].instance_index);
    } else {
      std::vector<std::size_t> all(train_set.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      auto rng = detail::seeded_rng(cfg.master_seed, cell.fraction_index, k, 1);
      std::sample(all.begin(), all.end(), std::back_inserter(removed), cell.removed, rng);
    }
    std::vector<bool> drop(train_set.size(), false);
    for (const auto i : removed) drop[i] = true;
    Dataset kept;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      if (!drop[i]) kept.push_back(train_set[i]);
    }

    JobOut out;
    std::vector<bool> seen(num_classes, false);
    for (const auto& z : kept) seen[z.label] = true;
    out.class_missing = std::find(seen.begin(), seen.end(), false) != seen.end();
    if (kept.empty()) {
      out.accuracy = 0.0;
    } else {
      TrainConfig seeded = train_cfg;
      seeded.seed = train_cfg.seed + k;
      out.accuracy = accuracy(train(kept, num_classes, ridge_lambda, seeded).model, test_set);
    }
    out.min_score = std::numeric_limits<double>::quiet_NaN();
    out.min_abs_score = std::numeric_limits<double>::quiet_NaN();
    for (const auto i : removed) {
      if (!(m_remove[i] >= out.min_score)) out.min_score = m_remove[i];
      if (!(std::abs(m_remove[i]) >= out.min_abs_score)) out.min_abs_score = std::abs(m_remove[i]);
    }
    outputs[j] = out;
  });

  std::vector<ExperimentResult> results;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    ExperimentResult r;
    r.arm = cells[c].arm;
    r.fraction = cells[c].fraction;
    r.num_removed = cells[c].removed;
    std::vector<double> mins, abs_mins;
    bool class_missing = false;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      if (jobs[j].cell != c) continue;
      r.seed_accuracies.push_back(outputs[j].accuracy);
      mins.push_back(outputs[j].min_score);
      abs_mins.push_back(outputs[j].min_abs_score);
      class_missing = class_missing || outputs[j].class_missing;
    }
    r.mean_test_accuracy = mean_of(r.seed_accuracies);
    r.std_test_accuracy = stddev_of(r.seed_accuracies);
    if (r.num_removed > 0) {
      r.threshold_score = mean_of(mins);
      r.abs_threshold_score = mean_of(abs_mins);
    }
    if (class_missing) r.warning = "removal eliminated every training instance of some class";
    results.push_back(std::move(r));
  }
  return results;
}

/// Mean accuracy of the 0-removal reference minus the arm's accuracy, per fraction.
inline double accuracy_drop(std::span<const ExperimentResult> results, AblationArm arm, double fraction,
                            double reference_accuracy) {
  for (const auto& r : results) {
    if (r.arm == arm && r.fraction == fraction) return reference_accuracy - r.mean_test_accuracy;
  }
  throw UsageError("accuracy_drop: no result for the requested arm and fraction");
}

/// One row per arm x fraction x seed followed by one aggregate row (seed column "mean").
inline void write_ablation_csv(std::ostream& os, std::span<const ExperimentResult> results) {
  os << "arm,fraction,seed,num_removed,test_accuracy,std_test_accuracy,threshold_score,abs_threshold_score,warning\n";
  auto num = [](double x) {
    std::ostringstream s;
    s.precision(17);
    s << x;
    return s.str();
  };
  for (const auto& r : results) {
    for (std::size_t k = 0; k < r.seed_accuracies.size(); ++k) {
      os << to_string(r.arm) << ',' << num(r.fraction) << ',' << k << ',' << r.num_removed << ','
         << num(r.seed_accuracies[k]) << ",,,,\n";
    }
    os << to_string(r.arm) << ',' << num(r.fraction) << ",mean," << r.num_removed << ',' << num(r.mean_test_accuracy)
       << ',' << num(r.std_test_accuracy) << ',' << num(r.threshold_score) << ',' << num(r.abs_threshold_score) << ','
       << r.warning << '\n';
  }
}

// ---------------------------------------------------------------------------
// Reduction Rate

enum class TokenArm { attributed, random };

inline std::string_view to_string(TokenArm a) { return a == TokenArm::attributed ? "attributed" : "random"; }

struct ReductionConfig {
  double top_instance_fraction = 0.10;
  std::vector<double> token_fractions{0.1, 0.3, 0.5};
  std::size_t riemann_steps = kDefaultRiemannSteps;
  std::uint64_t seed = 0;
  // |I(z, z)| at or below this is excluded from the averaged set.
  double zero_guard = 1e-12;
};

struct ReductionRateResult {
  double token_fraction_removed = 0.0;
  double mean_reduction_rate = 0.0;
  TokenArm arm = TokenArm::attributed;
  std::size_t num_instances = 0;
};

/// Token indices ordered by descending attribution; ties by ascending index.
inline std::vector<std::size_t> tokens_by_attribution(std::span<const double> per_token) {
  std::vector<std::size_t> order(per_token.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return per_token[a] > per_token[b]; });
  return order;
}

/// Mean over the top memorized instances of (I(z,z) - I(z_masked, z)) / I(z,z), where
/// z_masked replaces a token fraction by baseline rows. The model and Hessian stay fixed.
inline std::vector<ReductionRateResult> reduction_rate(const InfluenceEngine& engine, const ReductionConfig& cfg,
                                                       TokenArm arm, const BaselineSpec& baseline) {
  if (!(cfg.top_instance_fraction > 0.0 && cfg.top_instance_fraction <= 1.0)) {
    throw UsageError("reduction_rate: top_instance_fraction must lie in (0, 1]");
  }
  for (const double f : cfg.token_fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw UsageError("reduction_rate: token fractions must lie in [0, 1]");
  }
  const auto ranking = engine.rank_by_memorization();
  const std::size_t top = std::max<std::size_t>(1, detail::count_of(cfg.top_instance_fraction, ranking.size()));
  std::vector<MemorizationScore> chosen;
  for (std::size_t i = 0; i < top; ++i) {
    if (std::abs(ranking[i].m_remove) > cfg.zero_guard) chosen.push_back(ranking[i]);
  }
  if (chosen.empty()) throw UsageError("reduction_rate: every candidate instance has near-zero self-influence");

  const auto& data = engine.dataset();
  std::vector<std::vector<double>> rates(chosen.size(), std::vector<double>(cfg.token_fractions.size()));
  parallel_for(chosen.size(), [&](std::size_t c) {
    const std::size_t idx = chosen[c].instance_index;
    const Instance& z = data[idx];
    const double self = chosen[c].m_remove;
    std::vector<std::size_t> order;
    if (arm == TokenArm::attributed) {
      const auto report = engine.attribute(idx, make_baseline(z, baseline), baseline.kind, cfg.riemann_steps);
      order = tokens_by_attribution(report.per_token);
    }
    for (std::size_t f = 0; f < cfg.token_fractions.size(); ++f) {
      const std::size_t k = detail::count_of(cfg.token_fractions[f], z.num_tokens());
      std::vector<std::size_t> replaced;
      if (arm == TokenArm::attributed) {
        replaced.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
      } else {
        std::vector<std::size_t> all(z.num_tokens());
        std::iota(all.begin(), all.end(), std::size_t{0});
        auto rng = detail::seeded_rng(cfg.seed, idx, f, 2);
        std::sample(all.begin(), all.end(), std::back_inserter(replaced), k, rng);
      }
      if (replaced.empty()) {
        rates[c][f] = 0.0;
        continue;
      }
      const double perturbed = engine.influence_on(idx, replace_tokens(z, replaced, baseline));
      rates[c][f] = (self - perturbed) / self;
    }
  });

  std::vector<ReductionRateResult> out;
  for (std::size_t f = 0; f < cfg.token_fractions.size(); ++f) {
    std::vector<double> column;
    for (const auto& r : rates) column.push_back(r[f]);
    out.push_back({cfg.token_fractions[f], mean_of(column), arm, chosen.size()});
  }
  return out;
}

inline void write_reduction_csv(std::ostream& os, std::span<const ReductionRateResult> results) {
  os << "arm,token_fraction,mean_reduction_rate,num_instances\n";
  for (const auto& r : results) {
    std::ostringstream line;
    line.precision(17);
    line << to_string(r.arm) << ',' << r.token_fraction_removed << ',' << r.mean_reduction_rate << ','
         << r.num_instances << '\n';
    os << line.str();
  }
}

// ---------------------------------------------------------------------------
// Seed stability

/// Pairwise Spearman correlation of m_remove scores from models trained with each seed.
inline Eigen::MatrixXd seed_stability(std::span<const Instance> train_set, std::size_t num_classes,
                                      double ridge_lambda, std::span<const std::uint64_t> seeds,
                                      const TrainConfig& train_cfg, const EngineOptions& engine_options = {}) {
  if (seeds.size() < 2) throw UsageError("seed_stability: need at least 2 seeds");
  const std::size_t m = seeds.size();
  std::vector<std::vector<double>> scores(m);
  parallel_for(m, [&](std::size_t k) {
    TrainConfig cfg = train_cfg;
    cfg.seed = seeds[k];
    const auto fit = train(train_set, num_classes, ridge_lambda, cfg);
    const InfluenceEngine engine(fit.model, Dataset(train_set.begin(), train_set.end()), engine_options);
    for (const auto& s : engine.all_scores(1)) scores[k].push_back(s.m_remove);
  });
  Eigen::MatrixXd rho = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      const double r = spearman(scores[a], scores[b]);
      rho(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = r;
      rho(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = r;
    }
  }
  return rho;
}

// ---------------------------------------------------------------------------
// Atypicality table

struct FractionRow {
  std::string group;  // "top", "all" or "bottom"
  std::size_t label = 0;
  double mean_positive_fraction = 0.0;
  std::size_t count = 0;
};

struct FractionSummary {
  std::vector<FractionRow> rows;
  std::vector<std::string> warnings;

  std::optional<double> mean(std::string_view group, std::size_t label) const {
    for (const auto& r : rows) {
      if (r.group == group && r.label == label) return r.mean_positive_fraction;
    }
    return std::nullopt;
  }
};

/// Mean positive_fraction of the top / all / bottom memorized instances within each class.
/// Groups are taken per class: the top group of class c is the first round(top_frac * n_c)
/// class-c instances in ranking order.
inline FractionSummary group_fraction_summary(std::span<const MemorizationScore> ranked,
                                              std::span<const std::pair<std::size_t, std::size_t>> annotations,
                                              std::span<const std::size_t> labels, std::size_t num_classes,
                                              double top_frac, double bottom_frac, double k = 0.01) {
  if (annotations.size() != labels.size()) throw UsageError("fraction summary: annotations and labels differ in length");
  if (ranked.size() != labels.size()) throw UsageError("fraction summary: ranking must cover every instance");
  if (!(top_frac >= 0.0 && top_frac <= 1.0) || !(bottom_frac >= 0.0 && bottom_frac <= 1.0)) {
    throw UsageError("fraction summary: fractions must lie in [0, 1]");
  }
  for (const auto& s : ranked) {
    if (s.instance_index >= labels.size()) throw UsageError("fraction summary: ranking index out of range");
  }

  FractionSummary out;
  auto group_mean = [&](std::vector<std::size_t> members) {
    // Index order keeps the summation order independent of how the group was chosen.
    std::sort(members.begin(), members.end());
    std::vector<double> fr;
    for (const auto i : members) fr.push_back(positive_fraction(annotations[i].first, annotations[i].second, k));
    return mean_of(fr);
  };
  for (const std::string group : {"top", "all", "bottom"}) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::vector<std::size_t> in_class;
      for (const auto& s : ranked) {
        if (labels[s.instance_index] == c) in_class.push_back(s.instance_index);
      }
      std::vector<std::size_t> members;
      if (group == "all") {
        members = in_class;
      } else {
        const std::size_t take = detail::count_of(group == "top" ? top_frac : bottom_frac, in_class.size());
        if (group == "top") {
          members.assign(in_class.begin(), in_class.begin() + static_cast<std::ptrdiff_t>(take));
        } else {
          members.assign(in_class.end() - static_cast<std::ptrdiff_t>(take), in_class.end());
        }
      }
      if (members.empty()) {
        out.warnings.push_back("group '" + group + "' of class " + std::to_string(c) + " is empty; row omitted");
        continue;
      }
      out.rows.push_back({group, c, group_mean(members), members.size()});
    }
  }
  return out;
}

inline void write_fraction_csv(std::ostream& os, const FractionSummary& summary) {
  os << "group,label,mean_positive_fraction,count\n";
  for (const auto& r : summary.rows) {
    std::ostringstream line;
    line.precision(17);
    line << r.group << ',' << r.label << ',' << r.mean_positive_fraction << ',' << r.count << '\n';
    os << line.str();
  }
}

}  // namespace memscore
