#pragma once

// Stage-wise SGD training with batch size one:
//   base        dense network
//   multipool   MultiPool module added in front of the last block
//   gate<i>     gate inserted in block i (shallowest first), trained at the
//               first rho step
//   rho<r>      each rho step in decreasing order, continuing from the last
// Dense and truncated runs go through the same stages without gates so every
// policy sees the same number of updates.

#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "pag/harness/checkpoint.hpp"
#include "pag/harness/config.hpp"
#include "pag/harness/dataset.hpp"
#include "pag/harness/io.hpp"
#include "pag/harness/metrics.hpp"
#include "pag/harness/model.hpp"

namespace pag::harness {

inline double poly_lr(std::size_t iter, std::size_t max_iter, double base_lr = 2e-4,
                      double power = 0.9) {
  if (iter >= max_iter) {
    throw Error("poly_lr: iteration " + std::to_string(iter) + " not below " +
                std::to_string(max_iter));
  }
  return base_lr * std::pow(1.0 - double(iter) / double(max_iter), power);
}

// momentum <- mu * momentum - lr * grad; w <- w + momentum. With a positive
// clip the whole gradient is rescaled to at most that global L2 norm.
class Sgd {
 public:
  explicit Sgd(double mu, double clip = 0.0) : mu_(mu), clip_(clip) {}

  // Returns the global gradient norm before clipping.
  double step(ParamStore& store, const std::map<std::string, Tensor>& grads, double lr) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    const double k = clip_ > 0.0 && norm > clip_ ? clip_ / norm : 1.0;
    for (const auto& [name, g] : grads) {
      Tensor& w = store.get(name);
      auto [it, fresh] = velocity_.try_emplace(name, Tensor(w.dims()));
      Tensor& v = it->second;
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = mu_ * v[i] - lr * k * g[i];
        w[i] += v[i];
      }
    }
    return norm;
  }

  void reset() { velocity_.clear(); }

 private:
  double mu_, clip_;
  std::map<std::string, Tensor> velocity_;
};

inline const char* kTrainCsvHeader =
    "stage,iter,lr,tau,rho,task_loss,total_loss,mean_density,densities\n";

struct StageSummary {
  std::string name;
  double rho = 1.0;
  std::size_t iterations = 0;
  // Averages over the last quarter of the stage.
  double task_loss = 0.0;
  std::vector<double> densities;
  double mean_density = kNoMetric;
};

struct StagePlan {
  std::string name;
  std::size_t iterations = 0;
  double rho = 1.0;
  std::optional<std::size_t> insert_gate;
  bool add_pool = false;
  bool truncate = false;
  bool checkpoint = false;  // save under <output>/<name> when done
};

// Stages after the base one, in order, for the configured policy.
inline std::vector<StagePlan> plan_stages(const RunConfig& c) {
  std::vector<StagePlan> plan;
  plan.push_back({"base", c.base_iters, 1.0});
  if (c.multipool != PoolSetting::None && c.multipool_iters > 0) {
    StagePlan p{"multipool", c.multipool_iters, 1.0};
    p.add_pool = true;
    plan.push_back(p);
  }
  const auto steps = c.rho_schedule();
  const bool gated = is_gated(c.policy);
  for (std::size_t i = 0; i < c.blocks && c.gate_iters > 0; ++i) {
    StagePlan p{"gate" + std::to_string(i), c.gate_iters, gated ? steps.front() : 1.0};
    if (gated) p.insert_gate = i;
    plan.push_back(p);
  }
  for (double rho : steps) {
    if (c.sparsify_iters == 0) break;
    StagePlan p{"rho" + csv_number(rho), c.sparsify_iters, gated ? rho : 1.0};
    p.checkpoint = true;
    plan.push_back(p);
  }
  if (c.policy == Policy::Truncated && plan.size() > 1) {
    plan[c.multipool != PoolSetting::None && c.multipool_iters > 0 ? 2 : 1].truncate = true;
  }
  return plan;
}

// Kept block count whose FLOP ratio is nearest the one PAG is predicted to
// reach at rho; ties prefer the deeper network.
inline std::size_t truncation_for_budget(const RunConfig& config, double rho,
                                         double* achieved = nullptr, double* target = nullptr) {
  RunConfig pag = config;
  pag.policy = Policy::Pag;
  RngStream rng(0);
  Model gated = Model::create(pag, rng);
  for (std::size_t i = 0; i < pag.blocks; ++i) gated.add_gate(i, rng);
  if (config.multipool != PoolSetting::None) gated.add_multipool(rng);
  // MultiPool branches counted as if a single branch were active per pixel.
  std::vector<double> shares;
  if (config.multipool == PoolSetting::Hard) {
    std::size_t convs = 0;
    for (auto r : config.pool_rates) convs += r != 0;
    shares.assign(convs, 1.0 / double(config.pool_rates.size()));
  }
  const double want = gated.predicted_ratio(rho, shares);

  RunConfig dense = config;
  dense.policy = Policy::Truncated;
  Model t = Model::create(dense, rng);
  if (config.multipool != PoolSetting::None) t.add_multipool(rng);
  const double full = t.full_dense_flops();
  std::size_t best = config.blocks;
  double best_gap = 1e300, best_ratio = 1.0;
  for (std::size_t k = config.blocks; k >= 1; --k) {
    t.set_kept_blocks(k);
    std::vector<double> d(t.describe().gate_count, 1.0 / double(config.pool_rates.size()));
    const double ratio = count_flops(t.describe(), d, 1.0, full).ratio;
    if (std::abs(ratio - want) < best_gap - 1e-12) {
      best_gap = std::abs(ratio - want);
      best = k;
      best_ratio = ratio;
    }
  }
  if (achieved) *achieved = best_ratio;
  if (target) *target = want;
  return best;
}

class Trainer {
 public:
  Trainer(Model& model, const SyntheticDataset& data, std::ostream* csv = nullptr,
          std::ostream* progress = nullptr)
      : model_(model), data_(data), csv_(csv), progress_(progress) {}

  // Total iterations over which the temperature anneals.
  void set_anneal_span(std::size_t start, std::size_t total) {
    anneal_start_ = start;
    anneal_total_ = total;
  }
  std::size_t global_step() const { return global_step_; }
  void set_global_step(std::size_t s) { global_step_ = s; }

  double current_tau() const {
    const RunConfig& c = model_.config();
    if (global_step_ < anneal_start_ || anneal_total_ == 0) return c.tau_start;
    const std::size_t step = std::min(global_step_ - anneal_start_, anneal_total_);
    return anneal_tau(step, TemperatureSchedule{c.tau_start, c.tau_end, anneal_total_});
  }

  StageSummary run_stage(const StagePlan& plan);

 private:
  std::vector<Var> densities(Tape& tape, const ForwardResult& r);

  Model& model_;
  const SyntheticDataset& data_;
  std::ostream* csv_;
  std::ostream* progress_;
  Sgd sgd_{0.0};
  std::size_t global_step_ = 0;
  std::size_t anneal_start_ = 0, anneal_total_ = 0;
  std::map<std::size_t, std::deque<double>> skip_history_;
};

// Per-layer densities on the tape. A layer-skip gate is a single bit per
// image, so its density is taken over a sliding window of recent images with
// only the current one differentiable.
inline std::vector<Var> Trainer::densities(Tape& tape, const ForwardResult& r) {
  std::vector<Var> out;
  const RunConfig& c = model_.config();
  for (std::size_t k = 0; k < r.gates.size(); ++k) {
    if (c.policy != Policy::LayerSkip) {
      out.push_back(mask_density(r.gates[k]));
      continue;
    }
    auto& hist = skip_history_[r.gated_blocks[k]];
    double past = 0.0;
    for (double v : hist) past += v;
    const double n = double(hist.size() + 1);
    out.push_back(add(scale(r.gates[k], 1.0 / n), tape.constant(Tensor::scalar(past / n))));
    hist.push_back(r.gates[k].value()[0]);
    if (hist.size() >= c.skip_window) hist.pop_front();
  }
  return out;
}

inline StageSummary Trainer::run_stage(const StagePlan& plan) {
  const RunConfig& c = model_.config();
  std::uint64_t key = 0;
  for (char ch : plan.name) key = key * 131 + std::uint64_t(static_cast<unsigned char>(ch));
  RngStream data_rng(mix_seed(c.seed, key));
  RngStream gumbel_rng(mix_seed(c.seed ^ 0xA5A5A5A5ull, key));
  RngStream init_rng(mix_seed(c.seed ^ 0x5A5A5A5Aull, key));

  if (plan.add_pool) model_.add_multipool(init_rng);
  if (plan.truncate) {
    model_.set_kept_blocks(c.truncate_blocks ? c.truncate_blocks
                                             : truncation_for_budget(c, c.rho));
  }
  if (plan.insert_gate) model_.add_gate(*plan.insert_gate, init_rng);

  sgd_ = Sgd(c.momentum, c.grad_clip);
  const SparsityBudget budget{plan.rho, plan.rho < 1.0 ? c.lambda : 0.0, c.scope};
  StageSummary summary{plan.name, plan.rho, plan.iterations};
  const std::size_t tail_from = plan.iterations - std::max<std::size_t>(plan.iterations / 4, 1);
  std::vector<double> tail_density;
  std::size_t tail_count = 0;

  for (std::size_t it = 0; it < plan.iterations; ++it, ++global_step_) {
    const double lr = poly_lr(it, plan.iterations, c.base_lr, c.lr_power);
    const double tau = current_tau();
    const Sample& raw = data_.samples[data_rng.below(data_.samples.size())];
    const Sample s = augment(raw, c.task, c.image_size, data_rng);

    Tape tape;
    ParamBinder binder(tape, model_.params(), true);
    ForwardResult r = model_.forward(binder, s.image, ForwardOptions{tau, &gumbel_rng});
    Var task = model_.task_loss(r, s.target);
    std::vector<Var> dens = densities(tape, r);
    Var loss = task;
    if (!dens.empty() && budget.lambda > 0.0) loss = total_loss(task, dens, budget);
    tape.backward(loss);
    sgd_.step(model_.params(), binder.gradients(), lr);

    std::vector<double> dv;
    for (const auto& g : r.gates) dv.push_back(g.value().mean());
    double mean_d = kNoMetric;
    if (!dv.empty()) {
      mean_d = 0.0;
      for (double v : dv) mean_d += v / double(dv.size());
    }
    if (it >= tail_from) {
      summary.task_loss += task.value().item();
      if (tail_density.empty()) tail_density.assign(dv.size(), 0.0);
      for (std::size_t k = 0; k < dv.size(); ++k) tail_density[k] += dv[k];
      ++tail_count;
    }
    if (csv_ && (it % c.log_every == 0 || it + 1 == plan.iterations)) {
      std::string joined;
      for (std::size_t k = 0; k < dv.size(); ++k) joined += (k ? ";" : "") + csv_number(dv[k]);
      *csv_ << csv_row({plan.name, std::to_string(it), csv_number(lr), csv_number(tau),
                        csv_number(plan.rho), csv_number(task.value().item()),
                        csv_number(loss.value().item()), csv_number(mean_d), joined});
    }
    if (progress_ && (it + 1) % 500 == 0) {
      *progress_ << "  " << plan.name << " " << it + 1 << "/" << plan.iterations
                 << " loss " << task.value().item() << "\n";
    }
  }
  summary.task_loss /= double(std::max<std::size_t>(tail_count, 1));
  for (auto& d : tail_density) d /= double(tail_count);
  summary.densities = tail_density;
  if (!tail_density.empty()) {
    summary.mean_density = 0.0;
    for (double d : tail_density) summary.mean_density += d / double(tail_density.size());
  }
  return summary;
}

inline SyntheticDataset training_data(const RunConfig& c) {
  return gen_dataset(c.task, c.image_size + 2 * c.crop_margin, c.train_images, c.seed, c.classes);
}

inline SyntheticDataset evaluation_data(const RunConfig& c) {
  return gen_dataset(c.task, c.image_size, c.eval_images, c.seed + kEvalSeedOffset, c.classes);
}

// The config as it stood once training reached `rho`: the rho steps end there.
inline RunConfig config_at_rho(const RunConfig& c, double rho) {
  if (!is_gated(c.policy)) return c;
  RunConfig out = c;
  out.rho_steps.clear();
  for (double r : c.rho_schedule()) {
    out.rho_steps.push_back(r);
    if (r == rho) break;
  }
  out.rho = out.rho_steps.back();
  return out;
}

struct TrainResult {
  std::vector<StageSummary> stages;
  std::vector<std::pair<double, std::string>> checkpoints;  // rho, directory
};

// Runs every planned stage from `first` on. Stage checkpoints go under
// config.output when save is set; the final model is saved there as well.
inline TrainResult run_stages(Model& model, Trainer& trainer, const std::vector<StagePlan>& plan,
                              std::size_t first, bool save) {
  TrainResult result;
  const RunConfig& c = model.config();
  for (std::size_t i = first; i < plan.size(); ++i) {
    result.stages.push_back(trainer.run_stage(plan[i]));
    if (save && plan[i].checkpoint) {
      const std::string dir = (std::filesystem::path(c.output) / plan[i].name).string();
      const RunConfig staged = config_at_rho(c, plan[i].rho);
      save_checkpoint(model, dir, &staged);
      result.checkpoints.emplace_back(plan[i].rho, dir);
    }
  }
  if (save) save_checkpoint(model, (std::filesystem::path(c.output) / "final").string());
  return result;
}

// Anneal over everything after the base stage.
inline void configure_anneal(Trainer& trainer, const std::vector<StagePlan>& plan) {
  std::size_t total = 0;
  for (std::size_t i = 1; i < plan.size(); ++i) total += plan[i].iterations;
  trainer.set_anneal_span(plan.front().iterations, total);
}

// Full training run described by the config; writes
// <output>/train_metrics.csv and checkpoints.
inline TrainResult train(const RunConfig& config, std::ostream* progress = nullptr) {
  config.validate();
  std::filesystem::create_directories(config.output);
  const SyntheticDataset data = training_data(config);
  RngStream init(mix_seed(config.seed, 0x1217));
  Model model = Model::create(config, init);
  std::ofstream csv(std::filesystem::path(config.output) / "train_metrics.csv");
  csv << kTrainCsvHeader;
  Trainer trainer(model, data, &csv, progress);
  const auto plan = plan_stages(config);
  configure_anneal(trainer, plan);
  TrainResult r = run_stages(model, trainer, plan, 0, true);
  {
    std::ofstream os(std::filesystem::path(config.output) / "config.txt");
    os << config.to_text();
  }
  return r;
}

}  // namespace pag::harness
