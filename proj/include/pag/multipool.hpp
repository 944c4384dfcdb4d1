#pragma once

// Pixel-wise choice among dilated 3x3 pooling branches. Hard mode picks one
// branch per pixel with a straight-through gate and evaluates each branch
// only on its own pixels; soft mode evaluates every branch densely and
// blends them with per-pixel softmax weights.

#include <optional>
#include <string>
#include <vector>

#include "pag/autodiff.hpp"
#include "pag/blocks.hpp"
#include "pag/gating.hpp"
#include "pag/params.hpp"

namespace pag {

enum class PoolMode { Hard, Soft };

inline const std::vector<std::size_t>& default_pool_rates() {
  static const std::vector<std::size_t> rates{0, 1, 2, 4, 6, 8, 10};
  return rates;
}

// Branch i convolves with dilation rates[i]; rate 0 copies the input.
struct PoolBranchSet {
  std::string prefix;
  std::size_t channels = 0;
  std::vector<std::size_t> rates;

  std::size_t branch_count() const { return rates.size(); }
  std::string branch_prefix(std::size_t i) const {
    return prefix + ".branch" + std::to_string(i);
  }
  std::string selector_prefix() const { return prefix + ".selector"; }

  void validate() const {
    if (rates.empty()) throw Error("multipool needs at least one dilation rate");
    for (std::size_t i = 1; i < rates.size(); ++i) {
      if (rates[i] <= rates[i - 1]) throw Error("multipool rates must be strictly increasing");
    }
  }

  static PoolBranchSet create(ParamStore& store, const std::string& prefix, std::size_t channels,
                              std::vector<std::size_t> rates, RngStream& rng) {
    PoolBranchSet set{prefix, channels, std::move(rates)};
    set.validate();
    for (std::size_t i = 0; i < set.rates.size(); ++i) {
      if (set.rates[i] == 0) continue;
      store.add(set.branch_prefix(i) + ".kernel", he_normal({channels, channels, 3, 3}, rng, 0.5));
      store.add(set.branch_prefix(i) + ".bias", Tensor({channels}));
    }
    if (set.rates.size() > 1) {
      Tensor sel({set.rates.size(), channels, 1, 1});
      for (auto& v : sel.storage()) v = 0.01 * rng.normal();
      store.add(set.selector_prefix() + ".kernel", std::move(sel));
      store.add(set.selector_prefix() + ".bias", Tensor({set.rates.size()}));
    }
    return set;
  }

  Var branch(ParamBinder& p, std::size_t i, Var x, const Tensor* mask) const {
    if (rates[i] == 0) return x;
    Var k = p(branch_prefix(i) + ".kernel");
    Var b = p(branch_prefix(i) + ".bias");
    return mask ? conv2d_perforated(x, k, b, rates[i], *mask) : conv2d(x, k, b, rates[i]);
  }
};

struct MultiPoolOutput {
  Var output;
  Var selection;  // P x H x W
};

// tau is required in hard mode and rejected in soft mode. ctx.forced, when
// set, is a P x H x W one-hot selection used instead of the selector.
inline MultiPoolOutput multipool(Var x, const PoolBranchSet& set, ParamBinder& params,
                                 PoolMode mode, std::optional<double> tau,
                                 RngStream* rng = nullptr, const Tensor* forced = nullptr) {
  set.validate();
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || xv.channels() != set.channels) {
    throw Error("multipool expects " + std::to_string(set.channels) + " channels, got " +
                dims_to_string(xv.dims()));
  }
  if (mode == PoolMode::Hard && !tau) throw Error("multipool hard mode requires a temperature");
  if (mode == PoolMode::Soft && tau) throw Error("multipool soft mode takes no temperature");
  Tape& tape = params.tape();
  const std::size_t p_count = set.branch_count();
  const std::size_t h = xv.height(), w = xv.width(), plane = h * w;

  Var selection;
  if (forced) {
    if (forced->dims() != Dims{p_count, h, w}) throw Error("forced selection has wrong dims");
    selection = tape.constant(*forced);
  } else if (p_count == 1) {
    selection = tape.constant(Tensor({1, h, w}, 1.0));
  } else {
    Var logits = conv2d(x, params(set.selector_prefix() + ".kernel"),
                        params(set.selector_prefix() + ".bias"));
    if (mode == PoolMode::Hard) {
      const Tensor noise = rng ? gumbel_sample(logits.dims(), *rng) : Tensor(logits.dims());
      selection = straight_through_gate(logits, noise, *tau);
    } else {
      selection = softmax_channels(logits);
    }
  }

  std::optional<Var> out;
  for (std::size_t i = 0; i < p_count; ++i) {
    Var weight = p_count == 1 ? reshape(selection, {h, w}) : channel(selection, i);
    Var branch_out;
    if (mode == PoolMode::Hard) {
      const Tensor& mask = weight.value();
      bool any = false;
      for (std::size_t q = 0; q < plane && !any; ++q) any = mask[q] == 1.0;
      if (!any) continue;
      branch_out = set.branch(params, i, x, &mask);
    } else {
      branch_out = set.branch(params, i, x, nullptr);
    }
    Var term = mul_spatial(branch_out, weight);
    out = out ? add(*out, term) : term;
  }
  if (!out) throw Error("multipool selection is empty");
  return {*out, selection};
}

}  // namespace pag
