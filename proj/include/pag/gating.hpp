#pragma once

// Gumbel-max sampling with a straight-through gate: the forward value is the
// discrete argmax of logits + Gumbel noise, the backward rule is the Jacobian
// of the tempered softmax relaxation of the same quantity.

#include <cmath>
#include <cstdint>
#include <random>

#include "pag/autodiff.hpp"
#include "pag/tensor.hpp"

namespace pag {

// Explicit, single-owner random stream. Uniform draws are built from the raw
// 64-bit engine output so results do not depend on the standard library's
// distribution implementations.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  // Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }
  std::uint64_t next_u64() { return engine_(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * double(n)) % n; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    const double u1 = uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
  RngStream fork() { return RngStream(engine_() ^ 0x9E3779B97F4A7C15ull); }

 private:
  std::mt19937_64 engine_;
};

inline constexpr double kUniformClamp = 1e-12;

inline double gumbel_from_uniform(double u) {
  u = std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
  return -std::log(-std::log(u));
}

inline Tensor gumbel_sample(const Dims& dims, RngStream& rng) {
  Tensor t(dims);
  for (auto& v : t.storage()) v = gumbel_from_uniform(rng.uniform());
  return t;
}

namespace detail {

inline void check_gate_inputs(const Tensor& logits, const Tensor& gumbels, double tau) {
  if (!(tau > 0.0)) throw Error("temperature must be positive");
  if (logits.rank() != 3 || logits.channels() < 2) {
    throw Error("gate logits must be K x H x W with K >= 2, got " + dims_to_string(logits.dims()));
  }
  if (gumbels.dims() != logits.dims()) {
    throw Error("gumbel noise dims " + dims_to_string(gumbels.dims()) + " do not match logits " +
                dims_to_string(logits.dims()));
  }
}

inline Tensor perturbed(const Tensor& logits, const Tensor& gumbels, double tau) {
  Tensor z = logits;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = (z[i] + gumbels[i]) / tau;
  return z;
}

}  // namespace detail

// softmax((logits + gumbels) / tau) across the K channels of every pixel.
inline Tensor concrete_relax(const Tensor& logits, const Tensor& gumbels, double tau) {
  detail::check_gate_inputs(logits, gumbels, tau);
  return softmax_channels_value(detail::perturbed(logits, gumbels, tau));
}

// Per-pixel one-hot of argmax(logits + gumbels); ties go to the lowest index.
inline Tensor argmax_one_hot(const Tensor& logits, const Tensor& gumbels) {
  const std::size_t k = logits.channels(), plane = logits.height() * logits.width();
  Tensor out(logits.dims());
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    double best_v = logits[p] + gumbels[p];
    for (std::size_t c = 1; c < k; ++c) {
      const double v = logits[c * plane + p] + gumbels[c * plane + p];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out[best * plane + p] = 1.0;
  }
  return out;
}

inline Var straight_through_gate(Var logits, const Tensor& gumbels, double tau) {
  detail::check_gate_inputs(logits.value(), gumbels, tau);
  Tensor hard = argmax_one_hot(logits.value(), gumbels);
  Tensor soft = softmax_channels_value(detail::perturbed(logits.value(), gumbels, tau));
  return logits.tape->record("straight_through_gate", std::move(hard), {logits},
                             [logits, tau, soft = std::move(soft)](Tape& t, const Tensor& g) {
                               if (Tensor* gl = t.grad_buffer(logits.id))
                                 softmax_channels_backward(soft, g, *gl, 1.0 / tau);
                             });
}

// On/off gate: K = 2, channel 1 means "compute". Returns the H x W on-map.
inline constexpr std::size_t kGateOn = 1;

inline Var binary_gate(Var logits, const Tensor& gumbels, double tau) {
  if (logits.value().rank() != 3 || logits.value().channels() != 2) {
    throw Error("binary gate logits must have 2 channels");
  }
  return channel(straight_through_gate(logits, gumbels, tau), kGateOn);
}

struct TemperatureSchedule {
  double tau_start = 1.0;
  double tau_end = 0.1;
  std::size_t total_steps = 1;

  void validate() const {
    if (!(tau_end > 0.0) || tau_start < tau_end) {
      throw Error("temperature schedule requires tau_start >= tau_end > 0");
    }
    if (total_steps == 0) throw Error("temperature schedule needs total_steps > 0");
  }
};

// Geometric interpolation from tau_start to tau_end.
inline double anneal_tau(std::size_t step, const TemperatureSchedule& schedule) {
  schedule.validate();
  if (step > schedule.total_steps) {
    throw Error("anneal step " + std::to_string(step) + " exceeds " +
                std::to_string(schedule.total_steps));
  }
  const double frac = double(step) / double(schedule.total_steps);
  return schedule.tau_start * std::pow(schedule.tau_end / schedule.tau_start, frac);
}

}  // namespace pag
