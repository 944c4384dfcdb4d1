#pragma once

// Named parameter storage and per-tape binding.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pag/autodiff.hpp"
#include "pag/gating.hpp"

namespace pag {

class ParamStore {
 public:
  struct Entry {
    Tensor value;
    bool trainable = true;
  };

  Tensor& add(const std::string& name, Tensor value, bool trainable = true) {
    if (entries_.count(name)) throw Error("parameter '" + name + "' already exists");
    return entries_.emplace(name, Entry{std::move(value), trainable}).first->second.value;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor& get(const std::string& name) const { return entry(name).value; }
  Tensor& get(const std::string& name) { return entry(name).value; }
  bool trainable(const std::string& name) const { return entry(name).trainable; }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
  }

 private:
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

// Places parameters on a tape on first use. With training disabled every
// parameter is a constant, so inference records no backward closures.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamStore& store, bool training)
      : tape_(tape), store_(store), training_(training) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const bool grad = training_ && store_.trainable(name);
    Var v = tape_.leaf(store_.get(name), grad);
    bound_.emplace(name, v);
    return v;
  }

  const Tensor& constant(const std::string& name) const { return store_.get(name); }

  Tape& tape() { return tape_; }
  const std::map<std::string, Var>& bound() const { return bound_; }

  // Gradients of every bound trainable parameter that the loss reached.
  std::map<std::string, Tensor> gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : bound_) {
      if (tape_.requires_grad(v.id) && tape_.has_grad(v.id)) out.emplace(name, tape_.grad(v.id));
    }
    return out;
  }

 private:
  Tape& tape_;
  const ParamStore& store_;
  bool training_;
  std::map<std::string, Var> bound_;
};

inline Tensor he_normal(const Dims& kernel_dims, RngStream& rng, double gain = 1.0) {
  Tensor t(kernel_dims);
  const double fan_in = double(kernel_dims[1] * kernel_dims[2] * kernel_dims[3]);
  const double stddev = gain * std::sqrt(2.0 / fan_in);
  for (auto& v : t.storage()) v = stddev * rng.normal();
  return t;
}

// conv -> frozen batch norm (-> ReLU), stored under <prefix>.{kernel,bias,
// scale,shift,mean,var}; the moments are not trainable.
struct ConvUnit {
  std::string prefix;
  std::size_t dilation = 1;

  static ConvUnit create(ParamStore& store, const std::string& prefix, std::size_t cin,
                         std::size_t cout, std::size_t k, RngStream& rng, double gain = 1.0,
                         std::size_t dilation = 1) {
    store.add(prefix + ".kernel", he_normal({cout, cin, k, k}, rng, gain));
    store.add(prefix + ".bias", Tensor({cout}));
    store.add(prefix + ".scale", Tensor({cout}, 1.0));
    store.add(prefix + ".shift", Tensor({cout}));
    store.add(prefix + ".mean", Tensor({cout}), false);
    store.add(prefix + ".var", Tensor({cout}, 1.0), false);
    return {prefix, dilation};
  }

  Var conv(ParamBinder& p, Var x) const {
    return conv2d(x, p(prefix + ".kernel"), p(prefix + ".bias"), dilation);
  }
  Var conv_perforated(ParamBinder& p, Var x, const Tensor& mask) const {
    return conv2d_perforated(x, p(prefix + ".kernel"), p(prefix + ".bias"), dilation, mask);
  }
  Var norm(ParamBinder& p, Var x) const {
    return frozen_norm(x, p(prefix + ".scale"), p(prefix + ".shift"), p.constant(prefix + ".mean"),
                       p.constant(prefix + ".var"));
  }
  Var forward(ParamBinder& p, Var x, bool with_relu) const {
    Var y = norm(p, conv(p, x));
    return with_relu ? relu(y) : y;
  }
  Var forward_perforated(ParamBinder& p, Var x, const Tensor& mask, bool with_relu) const {
    Var y = norm(p, conv_perforated(p, x, mask));
    return with_relu ? relu(y) : y;
  }
};

}  // namespace pag
