#pragma once

// Bottleneck residual blocks: standard, pixel-gated, layer-skipping and
// statically perforated variants, plus ponder-map accumulation.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pag/autodiff.hpp"
#include "pag/gating.hpp"
#include "pag/params.hpp"

namespace pag {

// How a gate decides. With a forced mask the gate is that constant map; with
// no rng the Gumbel noise is zero (deterministic argmax of the logits).
struct GateContext {
  double tau = 1.0;
  RngStream* rng = nullptr;
  const Tensor* forced = nullptr;

  Tensor noise(const Dims& dims) const { return rng ? gumbel_sample(dims, *rng) : Tensor(dims); }
};

inline constexpr double kGateOnBiasInit = 3.0;

// 1x1 C -> 2 head producing off/on logits.
struct GateHead {
  std::string prefix;

  static GateHead create(ParamStore& store, const std::string& prefix, std::size_t channels,
                         RngStream& rng) {
    Tensor kernel({2, channels, 1, 1});
    for (auto& v : kernel.storage()) v = 0.01 * rng.normal();
    Tensor bias({2});
    bias[kGateOn] = kGateOnBiasInit;
    store.add(prefix + ".kernel", std::move(kernel));
    store.add(prefix + ".bias", std::move(bias));
    return {prefix};
  }

  Var logits(ParamBinder& p, Var input) const {
    return conv2d(input, p(prefix + ".kernel"), p(prefix + ".bias"));
  }
};

struct BlockParams {
  std::string prefix;
  std::size_t channels = 0;
  std::size_t bottleneck_ratio = 1;
  ConvUnit f1, f2, f3;
  GateHead gate;

  std::size_t mid_channels() const { return channels / bottleneck_ratio; }

  // F3's norm starts with a small scale so a fresh block is close to the
  // identity map.
  static BlockParams create(ParamStore& store, const std::string& prefix, std::size_t channels,
                            std::size_t ratio, RngStream& rng, bool with_gate = true) {
    if (ratio == 0 || channels % ratio != 0) {
      throw Error("bottleneck ratio must divide the channel count");
    }
    BlockParams b;
    b.prefix = prefix;
    b.channels = channels;
    b.bottleneck_ratio = ratio;
    const std::size_t mid = channels / ratio;
    b.f1 = ConvUnit::create(store, prefix + ".f1", channels, mid, 1, rng);
    b.f2 = ConvUnit::create(store, prefix + ".f2", mid, mid, 3, rng);
    b.f3 = ConvUnit::create(store, prefix + ".f3", mid, channels, 1, rng);
    store.get(prefix + ".f3.scale").fill(0.1);
    b.gate.prefix = prefix + ".gate";
    if (with_gate) b.add_gate(store, rng);
    return b;
  }

  // Binds to the parameters already in the store.
  static BlockParams attach(const std::string& prefix, std::size_t channels, std::size_t ratio) {
    BlockParams b;
    b.prefix = prefix;
    b.channels = channels;
    b.bottleneck_ratio = ratio;
    b.f1 = {prefix + ".f1", 1};
    b.f2 = {prefix + ".f2", 1};
    b.f3 = {prefix + ".f3", 1};
    b.gate = {prefix + ".gate"};
    return b;
  }

  bool has_gate(const ParamStore& store) const { return store.contains(gate.prefix + ".kernel"); }

  void add_gate(ParamStore& store, RngStream& rng) {
    if (!has_gate(store)) gate = GateHead::create(store, prefix + ".gate", channels, rng);
  }
};

namespace detail {

inline void check_block_input(const Var& input, const BlockParams& p) {
  const Tensor& v = input.value();
  if (v.rank() != 3 || v.channels() != p.channels) {
    throw Error("block " + p.prefix + " expects " + std::to_string(p.channels) +
                " input channels, got dims " + dims_to_string(v.dims()));
  }
}

}  // namespace detail

// O = I + F3(F2(F1(I))); ReLU after F1 and F2 only.
inline Var standard_block(Var input, const BlockParams& p, ParamBinder& params) {
  detail::check_block_input(input, p);
  Var x = p.f1.forward(params, input, true);
  Var y = p.f2.forward(params, x, true);
  Var z = p.f3.forward(params, y, false);
  return add(input, z);
}

// Residual branch restricted to the pixels where gate == 1:
//   X = F1(I) dense, Y = F2 perforated on G,
//   Z = F3 over (1-G) X + G Y, perforated on G (or dense when dense_f3),
//   O = I + G Z.
// The final product by G carries the straight-through gradient to the gate
// and leaves O == I bitwise wherever G == 0.
inline Var gated_residual(Var input, const BlockParams& p, ParamBinder& params, Var gate,
                          bool dense_f3 = false) {
  const Tensor mask = gate.value();
  Var x = p.f1.forward(params, input, true);
  Var y = p.f2.forward_perforated(params, x, mask, true);
  Var mixed = add(mul_spatial(x, one_minus(gate)), mul_spatial(y, gate));
  if (dense_f3) return add(input, p.f3.forward(params, mixed, false));
  Var z = p.f3.forward_perforated(params, mixed, mask, false);
  return add(input, mul_spatial(z, gate));
}

struct GatedOutput {
  Var output;
  Var gate;  // H x W binary map (1 x 1 for layer skipping)
};

inline Var gate_from_logits(Tape& tape, Var logits, const GateContext& ctx) {
  const Tensor& l = logits.value();
  if (ctx.forced) {
    validate_binary_mask(*ctx.forced, l.height(), l.width());
    return tape.constant(*ctx.forced);
  }
  return binary_gate(logits, ctx.noise(l.dims()), ctx.tau);
}

inline GatedOutput pag_block(Var input, const BlockParams& p, ParamBinder& params,
                             const GateContext& ctx, bool dense_f3 = false) {
  detail::check_block_input(input, p);
  Var logits = p.gate.logits(params, input);
  Var gate = gate_from_logits(params.tape(), logits, ctx);
  return {gated_residual(input, p, params, gate, dense_f3), gate};
}

// One on/off decision for the whole block from spatially averaged gate
// logits. When off, F1..F3 are not evaluated and O is I itself.
inline GatedOutput layer_skip_block(Var input, const BlockParams& p, ParamBinder& params,
                                    const GateContext& ctx) {
  detail::check_block_input(input, p);
  Tape& tape = params.tape();
  Var gate;
  if (ctx.forced) {
    if (ctx.forced->size() != 1 || ((*ctx.forced)[0] != 0.0 && (*ctx.forced)[0] != 1.0)) {
      throw Error("forced layer gate must be a single 0 or 1");
    }
    gate = tape.constant(Tensor::scalar((*ctx.forced)[0]));
  } else {
    Var pooled = spatial_mean(p.gate.logits(params, input));
    gate = reshape(binary_gate(pooled, ctx.noise(pooled.dims()), ctx.tau), {1});
  }
  if (gate.value()[0] == 0.0) return {input, gate};
  Var x = p.f1.forward(params, input, true);
  Var y = p.f2.forward(params, x, true);
  Var z = p.f3.forward(params, y, false);
  return {add(input, mul_scalar(z, gate)), gate};
}

// Input-independent mask from a trainable 2 x H x W logit map; the input
// must have exactly that spatial size.
inline GatedOutput static_perforation_block(Var input, const BlockParams& p, ParamBinder& params,
                                            Var mask_logits, const GateContext& ctx,
                                            bool dense_f3 = false) {
  detail::check_block_input(input, p);
  const Tensor& l = mask_logits.value();
  const Tensor& in = input.value();
  if (l.rank() != 3 || l.channels() != 2 || l.height() != in.height() ||
      l.width() != in.width()) {
    throw Error("static perforation mask is " + dims_to_string(l.dims()) +
                " but the input is " + dims_to_string(in.dims()) +
                "; this policy requires a fixed input size");
  }
  Var gate = gate_from_logits(params.tape(), mask_logits, ctx);
  return {gated_residual(input, p, params, gate, dense_f3), gate};
}

// ---------------------------------------------------------------------------

struct PonderMap {
  Tensor values;  // H x W, integer counts
  std::size_t layer_count = 0;

  double mean_fraction() const { return values.mean() / double(layer_count); }
};

inline PonderMap accumulate_ponder(const std::vector<Tensor>& masks) {
  if (masks.empty()) throw Error("accumulate_ponder: no masks");
  PonderMap pm{Tensor(masks.front().dims()), masks.size()};
  for (const auto& m : masks) {
    if (m.dims() != pm.values.dims()) throw Error("accumulate_ponder: mask dims differ");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i] != 0.0 && m[i] != 1.0) throw Error("accumulate_ponder: masks must be binary");
      pm.values[i] += m[i];
    }
  }
  return pm;
}

}  // namespace pag
