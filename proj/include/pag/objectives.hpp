#pragma once

// Training objectives. All task losses are sums over pixels; each records a
// single fused node on the tape with its analytic gradient.

#include <cmath>
#include <numbers>
#include <vector>

#include "pag/autodiff.hpp"

namespace pag {

inline constexpr double kDensityClamp = 1e-6;
inline constexpr double kCosineClamp = 1e-7;
inline constexpr double kIgnoreLabel = 255.0;

enum class SparsityScope { PerLayer, Total };

struct SparsityBudget {
  double rho = 0.5;
  double lambda = 1e-4;
  SparsityScope scope = SparsityScope::PerLayer;

  void validate() const {
    if (!(rho > 0.0 && rho < 1.0)) throw Error("sparsity target rho must lie in (0, 1)");
    if (!(lambda >= 0.0)) throw Error("sparsity weight lambda must be non-negative");
  }
};

// KL(rho || g) between Bernoulli distributions, g clamped to [1e-6, 1 - 1e-6].
inline double sparsity_kl(double g, double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw Error("sparsity target rho must lie in (0, 1)");
  g = std::clamp(g, kDensityClamp, 1.0 - kDensityClamp);
  return rho * std::log(rho / g) + (1.0 - rho) * std::log((1.0 - rho) / (1.0 - g));
}

// d KL / d g at the clamped density. The derivative is passed through at the
// clamp boundary so a collapsed gate is still pushed back toward rho.
inline double sparsity_kl_derivative(double g, double rho) {
  g = std::clamp(g, kDensityClamp, 1.0 - kDensityClamp);
  return -rho / g + (1.0 - rho) / (1.0 - g);
}

inline Var sparsity_kl(Var density, double rho) {
  if (density.value().size() != 1) throw Error("sparsity_kl: density must be a scalar");
  const double g = density.value()[0];
  return density.tape->record("sparsity_kl", Tensor::scalar(sparsity_kl(g, rho)), {density},
                              [density, rho, g](Tape& t, const Tensor& grad) {
                                if (Tensor* gd = t.grad_buffer(density.id))
                                  (*gd)[0] += grad[0] * sparsity_kl_derivative(g, rho);
                              });
}

// Fraction of active pixels in a mask (or its relaxed surrogate on backward).
inline Var mask_density(Var mask) { return mean(mask); }

inline double total_loss(double task_loss, const std::vector<double>& densities,
                         const SparsityBudget& budget) {
  budget.validate();
  if (budget.lambda == 0.0) return task_loss;
  if (densities.empty()) throw Error("total_loss: no gated layers for a positive lambda");
  double penalty = 0.0;
  if (budget.scope == SparsityScope::PerLayer) {
    for (double g : densities) penalty += sparsity_kl(g, budget.rho);
  } else {
    double mean_g = 0.0;
    for (double g : densities) mean_g += g;
    penalty = sparsity_kl(mean_g / double(densities.size()), budget.rho);
  }
  return task_loss + budget.lambda * penalty;
}

inline Var total_loss(Var task_loss, const std::vector<Var>& densities,
                      const SparsityBudget& budget) {
  budget.validate();
  if (budget.lambda == 0.0) return task_loss;
  if (densities.empty()) throw Error("total_loss: no gated layers for a positive lambda");
  Var penalty;
  if (budget.scope == SparsityScope::PerLayer) {
    penalty = sparsity_kl(densities.front(), budget.rho);
    for (std::size_t l = 1; l < densities.size(); ++l)
      penalty = add(penalty, sparsity_kl(densities[l], budget.rho));
  } else {
    Var acc = densities.front();
    for (std::size_t l = 1; l < densities.size(); ++l) acc = add(acc, densities[l]);
    penalty = sparsity_kl(scale(acc, 1.0 / double(densities.size())), budget.rho);
  }
  return add(task_loss, scale(penalty, budget.lambda));
}

namespace detail {

inline std::size_t plane_of(const Tensor& t) { return t.height() * t.width(); }

// log sigmoid(z) without overflow.
inline double log_sigmoid(double z) {
  return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace detail

struct BoundaryWeights {
  double positive = 0.0;
  double negative = 0.0;
};

// beta+ = |Y-| / |Y|, beta- = 1 - beta+.
inline BoundaryWeights boundary_weights(const Tensor& target) {
  std::size_t negatives = 0;
  for (double v : target.data()) {
    if (v != 0.0 && v != 1.0) throw Error("boundary target must be binary");
    if (v == 0.0) ++negatives;
  }
  const double pos = double(negatives) / double(target.size());
  return {pos, 1.0 - pos};
}

// Class-balanced logistic loss summed over every prediction branch.
inline Var boundary_loss(const std::vector<Var>& branches, const Tensor& target) {
  if (branches.empty()) throw Error("boundary_loss: no prediction branches");
  const BoundaryWeights beta = boundary_weights(target);
  const std::size_t n = target.size();
  double loss = 0.0;
  for (const auto& b : branches) {
    const Tensor& z = b.value();
    if (z.size() != n) throw Error("boundary_loss: branch size does not match target");
    for (std::size_t j = 0; j < n; ++j) {
      loss -= target[j] == 1.0 ? beta.positive * detail::log_sigmoid(z[j])
                               : beta.negative * detail::log_sigmoid(-z[j]);
    }
  }
  return branches.front().tape->record(
      "boundary_loss", Tensor::scalar(loss), branches,
      [branches, target, beta, n](Tape& t, const Tensor& g) {
        for (const auto& b : branches) {
          Tensor* gb = t.grad_buffer(b.id);
          if (!gb) continue;
          const Tensor& z = b.value();
          for (std::size_t j = 0; j < n; ++j) {
            const double s = detail::sigmoid(z[j]);
            (*gb)[j] += g[0] * (target[j] == 1.0 ? -beta.positive * (1.0 - s)
                                                 : beta.negative * s);
          }
        }
      });
}

// K-way cross-entropy summed over labelled pixels; label 255 is ignored.
inline Var semantic_loss(Var logits, const Tensor& labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 3) throw Error("semantic_loss: logits must be K x H x W");
  const std::size_t k = z.channels(), plane = detail::plane_of(z);
  if (labels.size() != plane) throw Error("semantic_loss: label map does not match logits");
  Tensor probs = softmax_channels_value(z);
  double loss = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    const double y = labels[p];
    if (y == kIgnoreLabel) continue;
    if (y < 0.0 || y >= double(k) || y != std::floor(y)) {
      throw Error("semantic_loss: label " + std::to_string(y) + " outside [0, " +
                  std::to_string(k) + ")");
    }
    // log softmax computed directly for accuracy at large margins.
    double m = z[p];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, z[c * plane + p]);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(z[c * plane + p] - m);
    loss -= z[static_cast<std::size_t>(y) * plane + p] - m - std::log(s);
  }
  return logits.tape->record(
      "semantic_loss", Tensor::scalar(loss), {logits},
      [logits, labels, probs = std::move(probs), k, plane](Tape& t, const Tensor& g) {
        Tensor* gl = t.grad_buffer(logits.id);
        if (!gl) return;
        for (std::size_t p = 0; p < plane; ++p) {
          const double y = labels[p];
          if (y == kIgnoreLabel) continue;
          for (std::size_t c = 0; c < k; ++c) {
            const double onehot = static_cast<std::size_t>(y) == c ? 1.0 : 0.0;
            (*gl)[c * plane + p] += g[0] * (probs[c * plane + p] - onehot);
          }
        }
      });
}

// sum_i (D_i - T_i)^2 + gamma |D_i - T_i| on log depth. The L1 subgradient at
// zero error is 0.
inline Var depth_loss(Var pred, const Tensor& target, double gamma = 2.0) {
  const Tensor& d = pred.value();
  if (d.size() != target.size()) throw Error("depth_loss: prediction and target sizes differ");
  double loss = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double e = d[i] - target[i];
    loss += e * e + gamma * std::abs(e);
  }
  return pred.tape->record("depth_loss", Tensor::scalar(loss), {pred},
                           [pred, target, gamma](Tape& t, const Tensor& g) {
                             Tensor* gp = t.grad_buffer(pred.id);
                             if (!gp) return;
                             const Tensor& d = pred.value();
                             for (std::size_t i = 0; i < d.size(); ++i) {
                               const double e = d[i] - target[i];
                               const double sign = e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0);
                               (*gp)[i] += g[0] * (2.0 * e + gamma * sign);
                             }
                           });
}

// sum_i -n_i.t_i + lambda * acos(n_i.t_i) after unit-normalising each
// predicted vector; the dot product is clamped to [-1 + 1e-7, 1 - 1e-7].
// Pixels whose target is the all-zero void sentinel are skipped.
inline Var normal_loss(Var pred, const Tensor& target, double lambda = 4.0) {
  const Tensor& n = pred.value();
  if (n.rank() != 3 || n.channels() != 3 || target.dims() != n.dims()) {
    throw Error("normal_loss: prediction and target must both be 3 x H x W");
  }
  const std::size_t plane = detail::plane_of(n);
  double loss = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    const double tx = target[p], ty = target[plane + p], tz = target[2 * plane + p];
    if (tx == 0.0 && ty == 0.0 && tz == 0.0) continue;
    const double nx = n[p], ny = n[plane + p], nz = n[2 * plane + p];
    const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
    if (len == 0.0) throw Error("normal_loss: zero-length predicted normal");
    double dot = (nx * tx + ny * ty + nz * tz) / len;
    dot = std::clamp(dot, -1.0 + kCosineClamp, 1.0 - kCosineClamp);
    loss += -dot + lambda * std::acos(dot);
  }
  return pred.tape->record(
      "normal_loss", Tensor::scalar(loss), {pred},
      [pred, target, lambda, plane](Tape& t, const Tensor& g) {
        Tensor* gp = t.grad_buffer(pred.id);
        if (!gp) return;
        const Tensor& n = pred.value();
        for (std::size_t p = 0; p < plane; ++p) {
          const double tv[3] = {target[p], target[plane + p], target[2 * plane + p]};
          if (tv[0] == 0.0 && tv[1] == 0.0 && tv[2] == 0.0) continue;
          const double nv[3] = {n[p], n[plane + p], n[2 * plane + p]};
          const double len = std::sqrt(nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]);
          const double dot = (nv[0] * tv[0] + nv[1] * tv[1] + nv[2] * tv[2]) / len;
          if (dot <= -1.0 + kCosineClamp || dot >= 1.0 - kCosineClamp) continue;
          const double dloss_ddot = -1.0 - lambda / std::sqrt(1.0 - dot * dot);
          // d(dot)/dn = (t - dot * n / len) / len
          for (int c = 0; c < 3; ++c) {
            const double ddot = (tv[c] - dot * nv[c] / len) / len;
            (*gp)[static_cast<std::size_t>(c) * plane + p] += g[0] * dloss_ddot * ddot;
          }
        }
      });
}

}  // namespace pag
