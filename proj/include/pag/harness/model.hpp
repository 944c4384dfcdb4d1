#pragma once

// Toy dense-prediction network:
//   2x2 average pool -> 3x3 stem -> L bottleneck blocks at half resolution
//   (optional MultiPool in front of the last kept block) -> 2x upsample ->
//   3x3 conv + ReLU -> 1x1 task head.

#include <optional>
#include <string>
#include <vector>

#include "pag/blocks.hpp"
#include "pag/flops.hpp"
#include "pag/harness/config.hpp"
#include "pag/harness/dataset.hpp"
#include "pag/multipool.hpp"
#include "pag/objectives.hpp"

namespace pag::harness {

struct ForwardOptions {
  double tau = 1.0;
  RngStream* rng = nullptr;  // null: zero Gumbel noise
};

struct ForwardResult {
  Var output;
  std::vector<std::size_t> gated_blocks;
  std::vector<Var> gates;  // H x W maps, or 1-element for layer skipping
  std::optional<Var> selection;
};

class Model {
 public:
  explicit Model(const RunConfig& config) : config_(config) {
    config_.validate();
    kept_ = config_.blocks;
  }

  // Fresh parameters for the dense base network.
  static Model create(const RunConfig& config, RngStream& rng) {
    Model m(config);
    m.init_base(rng);
    return m;
  }

  // Same parameters and state under another config, e.g. a different policy
  // continuing from a shared base.
  Model with_config(const RunConfig& config) const {
    Model m(config);
    m.store_ = store_;
    m.kept_ = std::min(kept_, m.config_.blocks);
    m.set_pool_added(pool_added_);
    return m;
  }

  const RunConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  std::size_t out_channels() const { return target_channels(config_.task, config_.classes); }
  std::size_t trunk_size() const { return config_.image_size / 2; }
  std::size_t kept_blocks() const { return kept_; }
  void set_kept_blocks(std::size_t k) {
    if (k == 0 || k > config_.blocks) throw Error("kept block count out of range");
    kept_ = k;
  }

  BlockParams block(std::size_t i) const {
    return BlockParams::attach("block" + std::to_string(i), config_.width, config_.bottleneck);
  }
  std::string static_mask_name(std::size_t i) const {
    return "block" + std::to_string(i) + ".static";
  }

  PoolBranchSet pool_set() const { return {"mp", config_.width, config_.pool_rates}; }

  void add_multipool(RngStream& rng) {
    if (config_.multipool == PoolSetting::None) throw Error("config has multipool = none");
    if (pool_added_) return;
    PoolBranchSet::create(store_, "mp", config_.width, config_.pool_rates, rng);
    pool_added_ = true;
  }
  bool pool_active() const { return pool_added_; }
  // Restores the flag for parameters loaded from a checkpoint.
  void set_pool_added(bool added) {
    if (added && config_.multipool == PoolSetting::None) {
      throw Error("checkpoint has a multipool module but the config disables it");
    }
    pool_added_ = added;
  }

  bool block_gated(std::size_t i) const {
    switch (config_.policy) {
      case Policy::Pag:
      case Policy::LayerSkip: return block(i).has_gate(store_);
      case Policy::StaticPerforation: return store_.contains(static_mask_name(i));
      default: return false;
    }
  }

  std::vector<std::size_t> gated_blocks() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < kept_; ++i)
      if (block_gated(i)) out.push_back(i);
    return out;
  }

  // Inserts the gate for block i; a no-op when it is already there.
  void add_gate(std::size_t i, RngStream& rng) {
    if (i >= config_.blocks) throw Error("no block " + std::to_string(i));
    if (config_.policy == Policy::Pag || config_.policy == Policy::LayerSkip) {
      BlockParams b = block(i);
      b.add_gate(store_, rng);
    } else if (config_.policy == Policy::StaticPerforation) {
      if (store_.contains(static_mask_name(i))) return;
      Tensor logits({2, trunk_size(), trunk_size()});
      const std::size_t plane = trunk_size() * trunk_size();
      for (std::size_t p = 0; p < plane; ++p) logits[kGateOn * plane + p] = kGateOnBiasInit;
      store_.add(static_mask_name(i), std::move(logits));
    } else {
      throw Error(std::string("policy ") + policy_name(config_.policy) + " has no gates");
    }
  }

  ForwardResult forward(ParamBinder& p, const Tensor& image, const ForwardOptions& opt) const;

  // Task loss summed over pixels.
  Var task_loss(const ForwardResult& r, const Tensor& target) const {
    const std::string& t = config_.task;
    if (t == "shapes-semantic") return semantic_loss(r.output, target);
    if (t == "shapes-boundary") return boundary_loss({r.output}, target);
    if (t == "ramp-depth") return depth_loss(r.output, target);
    return normal_loss(r.output, target);
  }

  // Conv layers for FLOP accounting. Gate indices: one per gated block in
  // order, then one per MultiPool branch in hard mode.
  NetworkDescription describe() const { return describe_with(kept_); }
  std::size_t block_gate_count() const { return gated_blocks().size(); }

  // Predicted FLOP ratio when every gated block runs at density rho; MultiPool
  // branch shares, when present, are taken as given.
  double predicted_ratio(double rho, const std::vector<double>& pool_shares = {}) const {
    std::vector<double> d(block_gate_count(), rho);
    d.insert(d.end(), pool_shares.begin(), pool_shares.end());
    return count_flops(describe(), d, rho, full_dense_flops()).ratio;
  }

  // Dense cost of the untruncated network, the reference for every ratio.
  double full_dense_flops() const { return describe_with(config_.blocks).dense_total(); }

 private:
  void init_base(RngStream& rng) {
    const std::size_t c = config_.width;
    ConvUnit::create(store_, "stem", 3, c, 3, rng);
    for (std::size_t i = 0; i < config_.blocks; ++i) {
      BlockParams::create(store_, "block" + std::to_string(i), c, config_.bottleneck, rng, false);
    }
    ConvUnit::create(store_, "head.conv", c, config_.head_width, 3, rng);
    store_.add("head.out.kernel", he_normal({out_channels(), config_.head_width, 1, 1}, rng, 0.5));
    store_.add("head.out.bias", Tensor({out_channels()}));
  }

  std::size_t pool_position() const { return kept_ - 1; }
  NetworkDescription describe_with(std::size_t kept) const;

  RunConfig config_;
  ParamStore store_;
  std::size_t kept_ = 0;
  bool pool_added_ = false;
};

inline ForwardResult Model::forward(ParamBinder& p, const Tensor& image,
                                    const ForwardOptions& opt) const {
  if (image.rank() != 3 || image.channels() != 3 || image.height() % 2 || image.width() % 2) {
    throw Error("model input must be 3 x H x W with even H and W, got " +
                dims_to_string(image.dims()));
  }
  Tape& tape = p.tape();
  Tensor centred = image;
  for (auto& v : centred.storage()) v -= 0.5;

  ForwardResult r;
  Var x = avg_pool2(tape.constant(centred));
  x = ConvUnit{"stem", 1}.forward(p, x, true);

  GateContext ctx{opt.tau, opt.rng, nullptr};
  for (std::size_t i = 0; i < kept_; ++i) {
    if (pool_active() && i == pool_position()) {
      const bool hard = config_.multipool == PoolSetting::Hard;
      auto mp = multipool(x, pool_set(), p, hard ? PoolMode::Hard : PoolMode::Soft,
                          hard ? std::optional<double>(opt.tau) : std::nullopt, opt.rng);
      x = mp.output;
      r.selection = mp.selection;
    }
    const BlockParams b = block(i);
    if (!block_gated(i)) {
      x = standard_block(x, b, p);
      continue;
    }
    GatedOutput g;
    switch (config_.policy) {
      case Policy::Pag: g = pag_block(x, b, p, ctx, config_.dense_f3); break;
      case Policy::LayerSkip: g = layer_skip_block(x, b, p, ctx); break;
      default: g = static_perforation_block(x, b, p, p(static_mask_name(i)), ctx, config_.dense_f3);
    }
    x = g.output;
    r.gated_blocks.push_back(i);
    r.gates.push_back(g.gate);
  }

  Var y = upsample2(x);
  y = ConvUnit{"head.conv", 1}.forward(p, y, true);
  r.output = conv2d(y, p("head.out.kernel"), p("head.out.bias"));
  return r;
}

inline NetworkDescription Model::describe_with(std::size_t kept) const {
  NetworkDescription net;
  const std::size_t s = trunk_size(), full = config_.image_size;
  const std::size_t c = config_.width, mid = c / config_.bottleneck;
  auto conv = [&](std::string name, std::size_t hw, std::size_t cin, std::size_t cout,
                  std::size_t k, std::optional<std::size_t> gate = {}) {
    net.layers.push_back({std::move(name), hw, hw, cin, cout, k, k, gate});
  };
  conv("stem", s, 3, c, 3);
  std::size_t gate = 0;
  std::vector<std::size_t> pool_branches;
  for (std::size_t i = 0; i < kept; ++i) {
    if (pool_active() && i == kept - 1) {
      const auto& rates = config_.pool_rates;
      if (rates.size() > 1) conv("mp.selector", s, c, rates.size(), 1);
      for (std::size_t b = 0; b < rates.size(); ++b) {
        if (rates[b] == 0) continue;
        net.layers.push_back({"mp.branch" + std::to_string(b), s, s, c, c, 3, 3, std::nullopt});
        pool_branches.push_back(net.layers.size() - 1);
      }
    }
    const std::string pre = "block" + std::to_string(i);
    std::optional<std::size_t> g;
    if (block_gated(i)) g = gate++;
    const bool skip = config_.policy == Policy::LayerSkip;
    if (g && config_.policy != Policy::StaticPerforation) conv(pre + ".gate", s, c, 2, 1);
    conv(pre + ".f1", s, c, mid, 1, skip ? g : std::nullopt);
    conv(pre + ".f2", s, mid, mid, 3, g);
    conv(pre + ".f3", s, mid, c, 1, config_.dense_f3 && !skip ? std::nullopt : g);
  }
  // Hard-mode branches run only on their own pixels.
  if (pool_active() && config_.multipool == PoolSetting::Hard) {
    for (std::size_t idx : pool_branches) net.layers[idx].gate_index = gate++;
  }
  conv("head.conv", full, c, config_.head_width, 3);
  conv("head.out", full, config_.head_width, out_channels(), 1);
  net.gate_count = gate;
  return net;
}

}  // namespace pag::harness
