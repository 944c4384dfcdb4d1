#pragma once

// Routing policies side by side at matched FLOP budgets. Per seed the base
// network (and MultiPool stage, when enabled) is trained once and every
// policy continues from that snapshot with the same remaining stage list:
//   pag / layer-skip / static-perforation  one chain over decreasing budgets,
//                                           evaluated at each budget
//   truncated   one run per budget, blocks dropped to the nearest ratio
//   dense       one run, reported at budget 1

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "pag/harness/checkpoint.hpp"
#include "pag/harness/evaluate.hpp"
#include "pag/harness/trainer.hpp"

namespace pag::harness {

struct CompareRow {
  Policy policy = Policy::Dense;
  double budget = 1.0;
  std::size_t seed = 0;
  double rho = 1.0;
  double metric = kNoMetric;
  double flop_ratio = 1.0;
  double gated_flops = 0.0;
  double dense_flops = 0.0;
  std::size_t kept_blocks = 0;
  double mean_density = kNoMetric;
  std::string note;
};

inline const char* kCompareCsvHeader =
    "policy,budget,seed,rho,metric,flop_ratio,gated_flops,dense_flops,kept_blocks,mean_density,"
    "note\n";

inline std::string compare_csv_row(const CompareRow& r) {
  return csv_row({policy_name(r.policy), csv_number(r.budget), std::to_string(r.seed),
                  csv_number(r.rho), csv_number(r.metric), csv_number(r.flop_ratio),
                  csv_number(r.gated_flops), csv_number(r.dense_flops),
                  std::to_string(r.kept_blocks), csv_number(r.mean_density), r.note});
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return kNoMetric;
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Sample standard deviation (n - 1); zero for a single value.
inline double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : xs) m += x / double(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(xs.size() - 1));
}

struct CompareSummary {
  Policy policy = Policy::Dense;
  double budget = 1.0;
  std::vector<double> metrics;  // one per seed
  double median_metric = kNoMetric;
  double std_metric = 0.0;
  double median_flop_ratio = kNoMetric;
};

inline std::vector<CompareSummary> summarize(const std::vector<CompareRow>& rows) {
  std::map<std::pair<int, double>, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& r : rows) {
    auto& g = groups[{int(r.policy), r.budget}];
    g.first.push_back(r.metric);
    g.second.push_back(r.flop_ratio);
  }
  std::vector<CompareSummary> out;
  for (const auto& [key, g] : groups) {
    CompareSummary s;
    s.policy = Policy(key.first);
    s.budget = key.second;
    s.metrics = g.first;
    s.median_metric = median(g.first);
    s.std_metric = sample_std(g.first);
    s.median_flop_ratio = median(g.second);
    out.push_back(s);
  }
  return out;
}

inline const CompareSummary* find_summary(const std::vector<CompareSummary>& s, Policy p,
                                          double budget) {
  for (const auto& x : s)
    if (x.policy == p && std::abs(x.budget - budget) < 1e-12) return &x;
  return nullptr;
}

namespace detail {

inline CompareRow row_from_eval(const Model& m, const EvalResult& e, double budget,
                                std::size_t seed) {
  CompareRow r;
  r.policy = m.config().policy;
  r.budget = budget;
  r.seed = seed;
  r.rho = is_gated(r.policy) ? m.config().rho : 1.0;
  r.metric = e.primary;
  r.flop_ratio = e.flops.ratio;
  r.gated_flops = e.flops.gated_total;
  r.dense_flops = e.flops.dense_total;
  r.kept_blocks = m.kept_blocks();
  r.mean_density = e.mean_density;
  if (r.policy == Policy::StaticPerforation) {
    r.note = "fixed input size " + std::to_string(m.config().image_size) + "x" +
             std::to_string(m.config().image_size);
  }
  return r;
}

// Budgets below one become the rho chain; a budget of one alone means rho 1.
inline std::vector<double> chain_to(const std::vector<double>& budgets, double last) {
  std::vector<double> out;
  for (double b : budgets) {
    out.push_back(b);
    if (b == last) break;
  }
  return out;
}

}  // namespace detail

// Runs the comparison described by `config`; writes <output>/compare.csv and
// <output>/compare_summary.csv and returns the per-run rows.
inline std::vector<CompareRow> compare_policies(const RunConfig& config,
                                                std::ostream* progress = nullptr) {
  config.validate();
  namespace fs = std::filesystem;
  fs::create_directories(config.output);
  std::vector<CompareRow> rows;
  const auto& budgets = config.compare_budgets;

  for (std::size_t seed : config.compare_seeds) {
    RunConfig base_c = config;
    base_c.seed = seed;
    base_c.policy = Policy::Dense;
    base_c.rho_steps = budgets;
    base_c.rho = budgets.back();
    const fs::path seed_dir = fs::path(config.output) / ("seed" + std::to_string(seed));
    fs::create_directories(seed_dir);
    const SyntheticDataset data = training_data(base_c);
    const SyntheticDataset eval = evaluation_data(base_c);

    // Shared stages: base, then MultiPool.
    RngStream init(mix_seed(seed, 0x1217));
    Model base = Model::create(base_c, init);
    const auto base_plan = plan_stages(base_c);
    std::size_t first = 1;
    while (first < base_plan.size() && base_plan[first].add_pool) ++first;
    std::size_t shared_iters = 0;
    {
      std::ofstream csv(seed_dir / "shared_train_metrics.csv");
      csv << kTrainCsvHeader;
      Trainer t(base, data, &csv, progress);
      for (std::size_t i = 0; i < first; ++i) {
        if (progress) *progress << "seed " << seed << " stage " << base_plan[i].name << "\n";
        t.run_stage(base_plan[i]);
        shared_iters += base_plan[i].iterations;
      }
    }

    auto run = [&](RunConfig c, const std::string& name) {
      c.output = (seed_dir / name).string();
      fs::create_directories(c.output);
      Model m = base.with_config(c);
      std::ofstream csv(fs::path(c.output) / "train_metrics.csv");
      csv << kTrainCsvHeader;
      Trainer t(m, data, &csv, progress);
      const auto plan = plan_stages(c);
      configure_anneal(t, plan);
      t.set_global_step(shared_iters);
      if (progress) *progress << "seed " << seed << " " << name << "\n";
      return run_stages(m, t, plan, first, true);
    };

    for (Policy p : config.compare_policies) {
      RunConfig c = base_c;
      c.policy = p;
      if (p == Policy::Dense) {
        run(c, "dense");
        Model m = load_checkpoint((seed_dir / "dense" / "final").string());
        rows.push_back(detail::row_from_eval(m, evaluate(m, eval), 1.0, seed));
      } else if (p == Policy::Truncated) {
        for (double b : budgets) {
          RunConfig tc = c;
          tc.rho_steps = detail::chain_to(budgets, b);
          tc.rho = b;
          double achieved = 1.0, target = 1.0;
          tc.truncate_blocks = truncation_for_budget(tc, b, &achieved, &target);
          const std::string name = "truncated_" + csv_number(b);
          run(tc, name);
          Model m = load_checkpoint((seed_dir / name / "final").string());
          CompareRow r = detail::row_from_eval(m, evaluate(m, eval), b, seed);
          if (std::abs(achieved - target) > 1e-9) {
            r.note = "nearest achievable ratio " + csv_number(achieved) + " for target " +
                     csv_number(target);
          }
          rows.push_back(r);
        }
      } else {
        const TrainResult tr = run(c, policy_name(p));
        for (const auto& [rho, dir] : tr.checkpoints) {
          Model m = load_checkpoint(dir);
          rows.push_back(detail::row_from_eval(m, evaluate(m, eval), rho, seed));
        }
      }
    }
  }

  std::ofstream csv(fs::path(config.output) / "compare.csv");
  csv << kCompareCsvHeader;
  for (const auto& r : rows) csv << compare_csv_row(r);
  std::ofstream sum(fs::path(config.output) / "compare_summary.csv");
  sum << "policy,budget,seeds,median_metric,std_metric,median_flop_ratio\n";
  for (const auto& s : summarize(rows)) {
    sum << csv_row({policy_name(s.policy), csv_number(s.budget), std::to_string(s.metrics.size()),
                    csv_number(s.median_metric), csv_number(s.std_metric),
                    csv_number(s.median_flop_ratio)});
  }
  if (!csv || !sum) throw Error("failed writing comparison CSVs under " + config.output);
  return rows;
}

}  // namespace pag::harness
