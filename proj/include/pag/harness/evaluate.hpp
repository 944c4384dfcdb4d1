#pragma once

// Deterministic inference (zero Gumbel noise) over a dataset: task metrics,
// per-layer densities, MultiPool branch shares and the FLOP report.

#include <filesystem>
#include <fstream>
#include <optional>

#include "pag/blocks.hpp"
#include "pag/harness/dataset.hpp"
#include "pag/harness/io.hpp"
#include "pag/harness/metrics.hpp"
#include "pag/harness/model.hpp"

namespace pag::harness {

struct InferenceResult {
  Tensor output;
  std::vector<Tensor> gates;  // H x W per gated block (layer-skip bits broadcast)
  std::optional<Tensor> selection;
};

inline InferenceResult infer(const Model& model, const Tensor& image) {
  Tape tape;
  ParamBinder binder(tape, model.params(), false);
  ForwardResult r = model.forward(binder, image, ForwardOptions{model.config().tau_end, nullptr});
  InferenceResult out{r.output.value(), {}, std::nullopt};
  const std::size_t h = image.height() / 2, w = image.width() / 2;
  for (const auto& g : r.gates) {
    const Tensor& v = g.value();
    out.gates.push_back(v.size() == 1 ? Tensor({h, w}, v[0]) : v);
  }
  if (r.selection) out.selection = r.selection->value();
  return out;
}

struct EvalResult {
  TaskMetrics metrics;
  double primary = kNoMetric;
  std::vector<double> layer_densities;
  double mean_density = kNoMetric;
  std::vector<double> pool_shares;  // per branch with a convolution
  FlopReport flops;
  double predicted_ratio = 1.0;
  std::size_t images = 0;
};

// Ponder map upsampled to the image grid, scaled by round(255 p / L).
inline Tensor ponder_image(const std::vector<Tensor>& gates, std::size_t scale = 2) {
  const PonderMap pm = accumulate_ponder(gates);
  const std::size_t h = pm.values.height(), w = pm.values.width();
  Tensor out({h * scale, w * scale});
  for (std::size_t y = 0; y < h * scale; ++y)
    for (std::size_t x = 0; x < w * scale; ++x)
      out.at(y, x) = std::round(255.0 * pm.values.at(y / scale, x / scale) / double(pm.layer_count));
  return out;
}

// Selected branch index i drawn as i * floor(255 / (P - 1)).
inline Tensor selection_image(const Tensor& selection, std::size_t scale = 2) {
  const std::size_t p = selection.channels(), h = selection.height(), w = selection.width();
  const double step = p > 1 ? std::floor(255.0 / double(p - 1)) : 0.0;
  Tensor out({h * scale, w * scale});
  for (std::size_t y = 0; y < h * scale; ++y)
    for (std::size_t x = 0; x < w * scale; ++x) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < p; ++c)
        if (selection.at(c, y / scale, x / scale) > selection.at(best, y / scale, x / scale)) best = c;
      out.at(y, x) = double(best) * step;
    }
  return out;
}

inline EvalResult evaluate(const Model& model, const SyntheticDataset& data,
                           const std::string& image_dir = "") {
  const RunConfig& c = model.config();
  if (data.kind != c.task) {
    throw Error("dataset kind " + data.kind + " does not match the checkpoint task " + c.task);
  }
  if (data.kind == "shapes-semantic" && data.classes != c.classes) {
    throw Error("dataset class count does not match the checkpoint");
  }
  if (c.policy == Policy::StaticPerforation && data.size != c.image_size) {
    throw Error("static perforation needs " + std::to_string(c.image_size) +
                " pixel inputs, dataset has " + std::to_string(data.size));
  }
  if (!image_dir.empty()) std::filesystem::create_directories(image_dir);

  MetricAccumulator acc(c.task, c.classes);
  EvalResult r;
  const std::size_t gated = model.block_gate_count();
  r.layer_densities.assign(gated, 0.0);
  std::vector<std::size_t> conv_branches;
  for (std::size_t b = 0; b < c.pool_rates.size(); ++b)
    if (c.pool_rates[b] != 0) conv_branches.push_back(b);
  const bool hard_pool = model.pool_active() && c.multipool == PoolSetting::Hard;
  if (hard_pool) r.pool_shares.assign(conv_branches.size(), 0.0);

  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    InferenceResult out = infer(model, s.image);
    acc.add(out.output, s.target);
    for (std::size_t k = 0; k < gated; ++k) r.layer_densities[k] += out.gates[k].mean();
    if (hard_pool) {
      const Tensor& sel = *out.selection;
      const std::size_t plane = sel.height() * sel.width();
      for (std::size_t j = 0; j < conv_branches.size(); ++j) {
        double on = 0.0;
        for (std::size_t q = 0; q < plane; ++q) on += sel[conv_branches[j] * plane + q];
        r.pool_shares[j] += on / double(plane);
      }
    }
    if (!image_dir.empty()) {
      const std::string stem = std::to_string(i);
      if (!out.gates.empty()) {
        write_pgm((std::filesystem::path(image_dir) / ("ponder_" + stem + ".pgm")).string(),
                  ponder_image(out.gates));
      }
      if (out.selection) {
        write_pgm((std::filesystem::path(image_dir) / ("multipool_" + stem + ".pgm")).string(),
                  selection_image(*out.selection));
      }
    }
  }
  const double n = double(data.samples.size());
  r.images = data.samples.size();
  for (auto& d : r.layer_densities) d /= n;
  for (auto& s : r.pool_shares) s /= n;
  if (gated) {
    r.mean_density = 0.0;
    for (double d : r.layer_densities) r.mean_density += d / double(gated);
  }
  r.metrics = acc.finish();
  r.primary = primary_metric(c.task, r.metrics);

  std::vector<double> dens = r.layer_densities;
  dens.insert(dens.end(), r.pool_shares.begin(), r.pool_shares.end());
  const double rho = is_gated(c.policy) ? c.rho : 1.0;
  r.flops = count_flops(model.describe(), dens, rho, model.full_dense_flops());
  r.predicted_ratio = is_gated(c.policy) ? model.predicted_ratio(rho, r.pool_shares) : r.flops.ratio;
  return r;
}

inline const char* kEvalCsvHeader =
    "task,policy,images,primary,miou,pixel_accuracy,boundary_f,delta1,delta2,delta3,"
    "mean_angle_deg,rho,mean_density,layer_densities,flop_ratio,predicted_flop_ratio,"
    "gated_flops,dense_flops\n";

inline std::string eval_csv_row(const RunConfig& c, const EvalResult& r) {
  std::string dens;
  for (std::size_t k = 0; k < r.layer_densities.size(); ++k) {
    dens += (k ? ";" : "") + csv_number(r.layer_densities[k]);
  }
  const auto& m = r.metrics;
  return csv_row({c.task, policy_name(c.policy), std::to_string(r.images), csv_number(r.primary),
                  csv_number(m.miou), csv_number(m.pixel_accuracy), csv_number(m.boundary_f),
                  csv_number(m.delta1), csv_number(m.delta2), csv_number(m.delta3),
                  csv_number(m.mean_angle_deg), csv_number(r.flops.rho),
                  csv_number(r.mean_density), dens, csv_number(r.flops.ratio),
                  csv_number(r.predicted_ratio), csv_number(r.flops.gated_total),
                  csv_number(r.flops.dense_total)});
}

inline void write_flop_csv(const std::string& path, const FlopReport& f) {
  std::ofstream os(path);
  os << "layer,dense_flops,gated_flops\n";
  for (const auto& l : f.layers) os << csv_row({l.name, csv_number(l.dense), csv_number(l.gated)});
  if (!os) throw Error("failed writing " + path);
}

}  // namespace pag::harness
