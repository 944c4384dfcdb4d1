#pragma once

// Reverse-mode differentiation over a recorded tape. Ops are free functions
// taking and returning Var handles; each one computes its value eagerly and
// records a backward closure holding whatever it needs.

#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pag/conv.hpp"
#include "pag/tensor.hpp"

namespace pag {

using NodeId = std::size_t;
class Tape;

struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Dims& dims() const { return value().dims(); }
};

class Tape {
 public:
  Tape() = default;
  // Recorded closures hold Var handles pointing at this tape.
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Receives the gradient of the node's output and accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Var leaf(Tensor value, bool requires_grad = true) {
    return push("leaf", std::move(value), {}, requires_grad, nullptr);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(std::string op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool needs = false;
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    for (const auto& v : inputs) {
      if (v.tape != this) throw Error(op + ": input recorded on a different tape");
      ids.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    if (!value.all_finite()) throw Error(op + ": produced a non-finite value");
    return push(std::move(op), std::move(value), std::move(ids), needs,
                needs ? std::move(backward) : nullptr);
  }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const std::string& op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(NodeId id) const { return nodes_.at(id).grad.has_value(); }

  const Tensor& grad(NodeId id) const {
    const auto& n = nodes_.at(id);
    if (!n.grad) throw Error("node " + std::to_string(id) + " (" + n.op + ") has no gradient");
    return *n.grad;
  }

  // Lazily zero-initialised gradient accumulator; null when the node does
  // not require a gradient.
  Tensor* grad_buffer(NodeId id) {
    auto& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (!n.grad) n.grad = Tensor(n.value.dims());
    return &*n.grad;
  }

  void accumulate(NodeId id, const Tensor& g) {
    Tensor* buf = grad_buffer(id);
    if (!buf) return;
    if (buf->dims() != g.dims()) {
      throw Error("gradient dims " + dims_to_string(g.dims()) + " do not match node dims " +
                  dims_to_string(buf->dims()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
  }

  void backward(Var loss) {
    if (loss.tape != this) throw Error("backward: loss is on a different tape");
    if (value(loss.id).size() != 1) {
      throw Error("backward: loss must be scalar, got dims " +
                  dims_to_string(value(loss.id).dims()));
    }
    std::vector<bool> reachable(nodes_.size(), false);
    reachable[loss.id] = true;
    for (NodeId id = loss.id + 1; id-- > 0;) {
      if (!reachable[id]) continue;
      for (NodeId in : nodes_[id].inputs) reachable[in] = true;
    }
    if (Tensor* g = grad_buffer(loss.id)) (*g)[0] += 1.0;
    for (NodeId id = loss.id + 1; id-- > 0;) {
      if (!reachable[id] || !nodes_[id].requires_grad) continue;
      grad_buffer(id);
      if (nodes_[id].backward) {
        // Copy: the closure may grow other nodes' buffers but never this one.
        const Tensor g = *nodes_[id].grad;
        nodes_[id].backward(*this, g);
      }
    }
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<NodeId> inputs;
    bool requires_grad = false;
    BackwardFn backward;
    std::optional<Tensor> grad;
  };

  Var push(std::string op, Tensor value, std::vector<NodeId> inputs, bool requires_grad,
           BackwardFn backward) {
    nodes_.push_back(Node{std::move(op), std::move(value), std::move(inputs), requires_grad,
                          std::move(backward), std::nullopt});
    return Var{this, nodes_.size() - 1};
  }

  // deque: node references stay valid while later ops are recorded.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad(id); }

namespace detail {

inline void require_same_dims(const char* op, const Var& a, const Var& b) {
  if (a.dims() != b.dims()) {
    throw Error(std::string(op) + ": dims " + dims_to_string(a.dims()) + " vs " +
                dims_to_string(b.dims()));
  }
}

inline void require_rank3(const char* op, const Tensor& t) {
  if (t.rank() != 3) {
    throw Error(std::string(op) + ": expected C x H x W, got " + dims_to_string(t.dims()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_dims("add", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_dims("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a.id, g);
    if (Tensor* gb = t.grad_buffer(b.id))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_dims("mul", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (Tensor* ga = t.grad_buffer(a.id))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (Tensor* gb = t.grad_buffer(b.id))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  return a.tape->record("scale", std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a.id))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

// 1 - a
inline Var one_minus(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = 1.0 - v;
  return a.tape->record("one_minus", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a.id))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] -= g[i];
  });
}

inline Var square(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= v;
  return a.tape->record("square", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    if (Tensor* ga = t.grad_buffer(a.id))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0 * av[i] * g[i];
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return a.tape->record("relu", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    if (Tensor* ga = t.grad_buffer(a.id))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av[i] > 0.0) (*ga)[i] += g[i];
  });
}

// x (C x H x W) times a spatial map m (H x W), broadcast over channels.
inline Var mul_spatial(Var x, Var m) {
  detail::require_rank3("mul_spatial", x.value());
  const Tensor& xv = x.value();
  const Tensor& mv = m.value();
  const std::size_t plane = xv.height() * xv.width();
  if (mv.rank() != 2 || mv.dim(0) != xv.height() || mv.dim(1) != xv.width()) {
    throw Error("mul_spatial: map dims " + dims_to_string(mv.dims()) + " vs features " +
                dims_to_string(xv.dims()));
  }
  Tensor out = xv;
  for (std::size_t c = 0; c < xv.channels(); ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] *= mv[p];
  return x.tape->record("mul_spatial", std::move(out), {x, m},
                        [x, m, plane](Tape& t, const Tensor& g) {
                          const Tensor& xv = x.value();
                          const Tensor& mv = m.value();
                          const std::size_t ch = xv.channels();
                          if (Tensor* gx = t.grad_buffer(x.id))
                            for (std::size_t c = 0; c < ch; ++c)
                              for (std::size_t p = 0; p < plane; ++p)
                                (*gx)[c * plane + p] += g[c * plane + p] * mv[p];
                          if (Tensor* gm = t.grad_buffer(m.id))
                            for (std::size_t c = 0; c < ch; ++c)
                              for (std::size_t p = 0; p < plane; ++p)
                                (*gm)[p] += g[c * plane + p] * xv[c * plane + p];
                        });
}

// x times a scalar node s (dims {1}).
inline Var mul_scalar(Var x, Var s) {
  if (s.value().size() != 1) throw Error("mul_scalar: gate must be a scalar");
  Tensor out = x.value();
  const double sv = s.value()[0];
  for (auto& v : out.storage()) v *= sv;
  return x.tape->record("mul_scalar", std::move(out), {x, s}, [x, s](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const double sv = s.value()[0];
    if (Tensor* gx = t.grad_buffer(x.id))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * sv;
    if (Tensor* gs = t.grad_buffer(s.id)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      (*gs)[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(Var a) {
  Tensor out = Tensor::scalar(a.value().sum());
  return a.tape->record("sum", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a.id))
      for (auto& v : ga->storage()) v += g[0];
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  Tensor out = Tensor::scalar(a.value().sum() / n);
  return a.tape->record("mean", std::move(out), {a}, [a, n](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a.id))
      for (auto& v : ga->storage()) v += g[0] / n;
  });
}

// Per-channel spatial mean: C x H x W -> C x 1 x 1.
inline Var spatial_mean(Var x) {
  detail::require_rank3("spatial_mean", x.value());
  const Tensor& xv = x.value();
  const std::size_t ch = xv.channels(), plane = xv.height() * xv.width();
  Tensor out({ch, 1, 1});
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xv[c * plane + p];
    out[c] = s / double(plane);
  }
  return x.tape->record("spatial_mean", std::move(out), {x},
                        [x, ch, plane](Tape& t, const Tensor& g) {
                          if (Tensor* gx = t.grad_buffer(x.id))
                            for (std::size_t c = 0; c < ch; ++c)
                              for (std::size_t p = 0; p < plane; ++p)
                                (*gx)[c * plane + p] += g[c] / double(plane);
                        });
}

// Channel c of a C x H x W tensor as an H x W map.
inline Var channel(Var x, std::size_t c) {
  detail::require_rank3("channel", x.value());
  const Tensor& xv = x.value();
  if (c >= xv.channels()) throw Error("channel: index out of range");
  const std::size_t plane = xv.height() * xv.width();
  Tensor out({xv.height(), xv.width()});
  std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(c * plane), plane,
              out.data().begin());
  return x.tape->record("channel", std::move(out), {x}, [x, c, plane](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_buffer(x.id))
      for (std::size_t p = 0; p < plane; ++p) (*gx)[c * plane + p] += g[p];
  });
}

inline Var reshape(Var x, Dims dims) {
  Tensor out = x.value().reshaped(std::move(dims));
  return x.tape->record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_buffer(x.id))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

inline Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_channels: no inputs");
  const Tensor& first = parts.front().value();
  detail::require_rank3("concat_channels", first);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank3("concat_channels", p.value());
    if (p.value().height() != first.height() || p.value().width() != first.width()) {
      throw Error("concat_channels: spatial dims differ");
    }
    total += p.value().channels();
  }
  Tensor out({total, first.height(), first.width()});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.value().size();
  }
  return parts.front().tape->record("concat_channels", std::move(out), parts,
                                    [parts](Tape& t, const Tensor& g) {
                                      std::size_t offset = 0;
                                      for (const auto& p : parts) {
                                        const std::size_t n = p.value().size();
                                        if (Tensor* gp = t.grad_buffer(p.id))
                                          for (std::size_t i = 0; i < n; ++i)
                                            (*gp)[i] += g[offset + i];
                                        offset += n;
                                      }
                                    });
}

// ---------------------------------------------------------------------------
// Spatial resampling

inline Var avg_pool2(Var x) {
  detail::require_rank3("avg_pool2", x.value());
  const Tensor& xv = x.value();
  const std::size_t ch = xv.channels(), h = xv.height(), w = xv.width();
  if (h % 2 || w % 2) throw Error("avg_pool2: spatial dims must be even");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({ch, oh, ow});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out.at(c, y, xx) = 0.25 * (xv.at(c, 2 * y, 2 * xx) + xv.at(c, 2 * y, 2 * xx + 1) +
                                   xv.at(c, 2 * y + 1, 2 * xx) + xv.at(c, 2 * y + 1, 2 * xx + 1));
  return x.tape->record("avg_pool2", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_buffer(x.id);
    if (!gx) return;
    for (std::size_t c = 0; c < gx->channels(); ++c)
      for (std::size_t y = 0; y < gx->height(); ++y)
        for (std::size_t xx = 0; xx < gx->width(); ++xx)
          gx->at(c, y, xx) += 0.25 * g.at(c, y / 2, xx / 2);
  });
}

// Nearest-neighbour 2x upsampling.
inline Var upsample2(Var x) {
  detail::require_rank3("upsample2", x.value());
  const Tensor& xv = x.value();
  const std::size_t ch = xv.channels(), h = xv.height(), w = xv.width();
  Tensor out({ch, 2 * h, 2 * w});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out.at(c, y, xx) = xv.at(c, y / 2, xx / 2);
  return x.tape->record("upsample2", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_buffer(x.id);
    if (!gx) return;
    for (std::size_t c = 0; c < g.channels(); ++c)
      for (std::size_t y = 0; y < g.height(); ++y)
        for (std::size_t xx = 0; xx < g.width(); ++xx) gx->at(c, y / 2, xx / 2) += g.at(c, y, xx);
  });
}

// ---------------------------------------------------------------------------
// Normalisation and softmax

// Batch normalisation with frozen moments: scale * (x - mean) / sqrt(var + eps) + shift.
inline Var frozen_norm(Var x, Var scale_param, Var shift_param, const Tensor& moment_mean,
                       const Tensor& moment_var, double eps = 1e-5) {
  detail::require_rank3("frozen_norm", x.value());
  const Tensor& xv = x.value();
  const std::size_t ch = xv.channels(), plane = xv.height() * xv.width();
  for (const Tensor* p : {&scale_param.value(), &shift_param.value(), &moment_mean, &moment_var}) {
    if (p->rank() != 1 || p->dim(0) != ch) {
      throw Error("frozen_norm: per-channel parameter must have dims {" + std::to_string(ch) + "}");
    }
  }
  std::vector<double> inv_std(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    if (moment_var[c] + eps <= 0.0) throw Error("frozen_norm: non-positive variance");
    inv_std[c] = 1.0 / std::sqrt(moment_var[c] + eps);
  }
  Tensor normalized(xv.dims());
  Tensor out(xv.dims());
  const Tensor& sc = scale_param.value();
  const Tensor& sh = shift_param.value();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t i = c * plane + p;
      normalized[i] = (xv[i] - moment_mean[c]) * inv_std[c];
      out[i] = sc[c] * normalized[i] + sh[c];
    }
  return x.tape->record(
      "frozen_norm", std::move(out), {x, scale_param, shift_param},
      [x, scale_param, shift_param, inv_std, normalized = std::move(normalized), ch,
       plane](Tape& t, const Tensor& g) {
        const Tensor& sc = scale_param.value();
        Tensor* gx = t.grad_buffer(x.id);
        Tensor* gs = t.grad_buffer(scale_param.id);
        Tensor* gb = t.grad_buffer(shift_param.id);
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t i = c * plane + p;
            if (gx) (*gx)[i] += g[i] * sc[c] * inv_std[c];
            if (gs) (*gs)[c] += g[i] * normalized[i];
            if (gb) (*gb)[c] += g[i];
          }
      });
}

inline Tensor softmax_channels_value(const Tensor& x) {
  if (x.rank() != 3) throw Error("softmax_channels: expected K x H x W");
  const std::size_t k = x.channels(), plane = x.height() * x.width();
  Tensor out(x.dims());
  for (std::size_t p = 0; p < plane; ++p) {
    double m = x[p];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, x[c * plane + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      out[c * plane + p] = std::exp(x[c * plane + p] - m);
      z += out[c * plane + p];
    }
    for (std::size_t c = 0; c < k; ++c) out[c * plane + p] /= z;
  }
  return out;
}

// Adds the softmax Jacobian-vector product J^T g for softmax values s.
inline void softmax_channels_backward(const Tensor& s, const Tensor& g, Tensor& gx,
                                      double input_scale = 1.0) {
  const std::size_t k = s.channels(), plane = s.height() * s.width();
  for (std::size_t p = 0; p < plane; ++p) {
    double dot = 0.0;
    for (std::size_t c = 0; c < k; ++c) dot += g[c * plane + p] * s[c * plane + p];
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t i = c * plane + p;
      gx[i] += input_scale * s[i] * (g[i] - dot);
    }
  }
}

// Per-pixel softmax across channels.
inline Var softmax_channels(Var x) {
  Tensor out = softmax_channels_value(x.value());
  Tensor saved = out;
  return x.tape->record("softmax_channels", std::move(out), {x},
                        [x, s = std::move(saved)](Tape& t, const Tensor& g) {
                          if (Tensor* gx = t.grad_buffer(x.id)) softmax_channels_backward(s, g, *gx);
                        });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

inline Var conv_record(const char* name, Var x, Var kernel, std::optional<Var> bias,
                       std::size_t dilation, std::optional<Tensor> mask) {
  const ConvSpec spec = conv_spec_for(kernel.value(), dilation);
  const Tensor* bias_value = bias ? &bias->value() : nullptr;
  auto result =
      conv2d_gather_scatter(x.value(), spec, kernel.value(), bias_value, mask ? &*mask : nullptr);
  std::vector<Var> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return x.tape->record(
      name, std::move(result.output), inputs,
      [x, kernel, bias, spec, mask = std::move(mask)](Tape& t, const Tensor& g) {
        auto grads = conv2d_gather_scatter_backward(x.value(), spec, kernel.value(),
                                                    mask ? &*mask : nullptr, g);
        t.accumulate(x.id, grads.input);
        t.accumulate(kernel.id, grads.kernel);
        if (bias) t.accumulate(bias->id, grads.bias);
      });
}

}  // namespace detail

// "Same" zero-padded stride-1 convolution with optional per-channel bias.
inline Var conv2d(Var x, Var kernel, std::optional<Var> bias = std::nullopt,
                  std::size_t dilation = 1) {
  return detail::conv_record("conv2d", x, kernel, bias, dilation, std::nullopt);
}

// Convolution evaluated only at pixels where mask == 1; zero elsewhere. The
// mask is a constant of this op.
inline Var conv2d_perforated(Var x, Var kernel, std::optional<Var> bias, std::size_t dilation,
                             const Tensor& mask) {
  return detail::conv_record("conv2d_perforated", x, kernel, bias, dilation, mask);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
// with central differences of step eps.
inline double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                         double eps = 1e-5) {
  Tape tape;
  Var input = tape.leaf(x);
  Var out = f(tape, input);
  tape.backward(out);
  const Tensor analytic = input.grad();

  auto eval = [&](const Tensor& point) {
    Tape t;
    return f(t, t.leaf(point, false)).value().item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace pag
