#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pag/tensor.hpp"

namespace pag {

// One convolution of a network. gate_index selects the mask density that
// scales its cost; layers without one always run densely.
struct ConvLayerDesc {
  std::string name;
  std::size_t height = 0, width = 0;
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t kh = 1, kw = 1;
  std::optional<std::size_t> gate_index;

  // 2 FLOPs per multiply-accumulate.
  double dense_flops() const {
    return 2.0 * double(height) * double(width) * double(in_channels) * double(out_channels) *
           double(kh) * double(kw);
  }
};

struct NetworkDescription {
  std::vector<ConvLayerDesc> layers;
  std::size_t gate_count = 0;

  double dense_total() const {
    double total = 0.0;
    for (const auto& l : layers) total += l.dense_flops();
    return total;
  }
};

struct LayerFlops {
  std::string name;
  double dense = 0.0;
  double gated = 0.0;
};

struct FlopReport {
  std::vector<LayerFlops> layers;
  double dense_total = 0.0;
  double gated_total = 0.0;
  double ratio = 1.0;
  double rho = 1.0;
};

// densities[g] is the active-pixel fraction of gate g. The ratio is taken
// against reference_dense when given (e.g. the full-depth network for a
// truncated one), otherwise against this network's own dense total.
inline FlopReport count_flops(const NetworkDescription& net, const std::vector<double>& densities,
                              double rho = 1.0, std::optional<double> reference_dense = {}) {
  if (densities.size() != net.gate_count) {
    throw Error("count_flops: " + std::to_string(densities.size()) + " densities for " +
                std::to_string(net.gate_count) + " gates");
  }
  FlopReport r;
  r.rho = rho;
  for (const auto& l : net.layers) {
    LayerFlops lf{l.name, l.dense_flops(), l.dense_flops()};
    if (l.gate_index) {
      const double g = densities.at(*l.gate_index);
      if (g < 0.0 || g > 1.0) throw Error("count_flops: density outside [0, 1]");
      lf.gated = lf.dense * g;
    }
    r.dense_total += lf.dense;
    r.gated_total += lf.gated;
    r.layers.push_back(std::move(lf));
  }
  const double denom = reference_dense.value_or(r.dense_total);
  r.ratio = denom > 0.0 ? r.gated_total / denom : 1.0;
  return r;
}

inline double mask_density(const Tensor& mask) { return mask.mean(); }

inline FlopReport count_flops(const NetworkDescription& net, const std::vector<Tensor>& masks,
                              double rho = 1.0, std::optional<double> reference_dense = {}) {
  std::vector<double> densities;
  densities.reserve(masks.size());
  for (const auto& m : masks) densities.push_back(mask_density(m));
  return count_flops(net, densities, rho, reference_dense);
}

}  // namespace pag
