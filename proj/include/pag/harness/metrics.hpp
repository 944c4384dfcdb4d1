#pragma once

// Dense-prediction metrics, accumulated over a dataset then finalised.

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "pag/objectives.hpp"
#include "pag/tensor.hpp"

namespace pag::harness {

inline constexpr double kNoMetric = std::numeric_limits<double>::quiet_NaN();

struct TaskMetrics {
  double miou = kNoMetric;
  double pixel_accuracy = kNoMetric;
  double boundary_f = kNoMetric;
  double delta1 = kNoMetric, delta2 = kNoMetric, delta3 = kNoMetric;
  double mean_angle_deg = kNoMetric;
};

// The number each task is ranked by; larger is better except for normals.
inline double primary_metric(const std::string& task, const TaskMetrics& m) {
  if (task == "shapes-semantic") return m.miou;
  if (task == "shapes-boundary") return m.boundary_f;
  if (task == "ramp-depth") return m.delta1;
  return m.mean_angle_deg;
}

inline bool higher_is_better(const std::string& task) { return task != "facet-normal"; }

// Confusion counts over non-ignored pixels.
class SemanticAccumulator {
 public:
  explicit SemanticAccumulator(std::size_t classes) : k_(classes), confusion_(classes * classes) {}

  void add_labels(const Tensor& predicted, const Tensor& labels) {
    if (predicted.size() != labels.size()) throw Error("semantic metric: size mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == kIgnoreLabel) continue;
      const auto t = static_cast<std::size_t>(labels[i]);
      const auto p = static_cast<std::size_t>(predicted[i]);
      if (t >= k_ || p >= k_) throw Error("semantic metric: label out of range");
      ++confusion_[t * k_ + p];
    }
  }

  // Argmax over the channels of K x H x W logits; ties go to the lower class.
  void add(const Tensor& logits, const Tensor& labels) {
    const std::size_t plane = logits.height() * logits.width();
    if (logits.channels() != k_) throw Error("semantic metric: class count mismatch");
    Tensor pred({plane});
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k_; ++c)
        if (logits[c * plane + p] > logits[best * plane + p]) best = c;
      pred[p] = double(best);
    }
    add_labels(pred, labels);
  }

  // Mean IoU over classes that occur in the labels or the predictions.
  double miou() const {
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < k_; ++c) {
      double tp = double(confusion_[c * k_ + c]), fp = 0.0, fn = 0.0;
      for (std::size_t o = 0; o < k_; ++o) {
        if (o == c) continue;
        fp += double(confusion_[o * k_ + c]);
        fn += double(confusion_[c * k_ + o]);
      }
      if (tp + fp + fn == 0.0) continue;
      total += tp / (tp + fp + fn);
      ++counted;
    }
    return counted ? total / double(counted) : kNoMetric;
  }

  double pixel_accuracy() const {
    double correct = 0.0, all = 0.0;
    for (std::size_t t = 0; t < k_; ++t)
      for (std::size_t p = 0; p < k_; ++p) {
        all += double(confusion_[t * k_ + p]);
        if (t == p) correct += double(confusion_[t * k_ + p]);
      }
    return all > 0.0 ? correct / all : kNoMetric;
  }

 private:
  std::size_t k_;
  std::vector<std::size_t> confusion_;
};

// Optimal-dataset-scale F: one threshold on sigmoid(logit) shared by the
// whole dataset, predictions and edges matched within one pixel.
class BoundaryAccumulator {
 public:
  static constexpr std::size_t kThresholds = 99;

  void add(const Tensor& logits, const Tensor& edges) {
    const std::size_t h = edges.height(), w = edges.width();
    if (logits.size() != h * w) throw Error("boundary metric: size mismatch");
    auto near = [&](const Tensor& m, std::size_t y, std::size_t x, auto&& pred) {
      for (std::size_t yy = y ? y - 1 : 0; yy <= std::min(h - 1, y + 1); ++yy)
        for (std::size_t xx = x ? x - 1 : 0; xx <= std::min(w - 1, x + 1); ++xx)
          if (pred(m[yy * w + xx])) return true;
      return false;
    };
    Tensor prob({h, w});
    for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = 1.0 / (1.0 + std::exp(-logits[i]));
    for (std::size_t t = 0; t < kThresholds; ++t) {
      const double thr = double(t + 1) / double(kThresholds + 1);
      auto on = [thr](double v) { return v >= thr; };
      auto edge = [](double v) { return v == 1.0; };
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t i = y * w + x;
          if (on(prob[i])) {
            ++predicted_[t];
            if (near(edges, y, x, edge)) ++precise_[t];
          }
          if (edge(edges[i])) {
            ++truth_[t];
            if (near(prob, y, x, on)) ++recalled_[t];
          }
        }
    }
  }

  double ods_f() const {
    double best = 0.0;
    for (std::size_t t = 0; t < kThresholds; ++t) {
      const double p = predicted_[t] ? double(precise_[t]) / double(predicted_[t]) : 0.0;
      const double r = truth_[t] ? double(recalled_[t]) / double(truth_[t]) : 0.0;
      if (p + r > 0.0) best = std::max(best, 2.0 * p * r / (p + r));
    }
    return best;
  }

 private:
  std::array<std::size_t, kThresholds> predicted_{}, precise_{}, truth_{}, recalled_{};
};

// Fraction of pixels whose depth ratio max(p/g, g/p) is below 1.25^k.
class DepthAccumulator {
 public:
  void add_depths(const Tensor& pred_depth, const Tensor& true_depth) {
    if (pred_depth.size() != true_depth.size()) throw Error("depth metric: size mismatch");
    for (std::size_t i = 0; i < pred_depth.size(); ++i) {
      const double p = pred_depth[i], g = true_depth[i];
      if (!(p > 0.0 && g > 0.0)) throw Error("depth metric: depths must be positive");
      const double ratio = std::max(p / g, g / p);
      for (std::size_t k = 0; k < 3; ++k)
        if (ratio < std::pow(1.25, double(k + 1))) ++within_[k];
      ++count_;
    }
  }

  // Model output and targets are log-depth.
  void add(const Tensor& pred_log, const Tensor& true_log) {
    Tensor p(pred_log.dims()), g(true_log.dims());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(pred_log[i]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::exp(true_log[i]);
    add_depths(p, g);
  }

  double delta(std::size_t k) const {
    return count_ ? double(within_.at(k - 1)) / double(count_) : kNoMetric;
  }

 private:
  std::array<std::size_t, 3> within_{};
  std::size_t count_ = 0;
};

// Mean angle in degrees between the normalised prediction and non-void
// targets.
class NormalAccumulator {
 public:
  void add(const Tensor& pred, const Tensor& target) {
    const std::size_t plane = target.height() * target.width();
    if (pred.dims() != target.dims() || target.channels() != 3) {
      throw Error("normal metric: expected matching 3 x H x W maps");
    }
    for (std::size_t p = 0; p < plane; ++p) {
      const double t[3] = {target[p], target[plane + p], target[2 * plane + p]};
      if (t[0] == 0.0 && t[1] == 0.0 && t[2] == 0.0) continue;
      const double q[3] = {pred[p], pred[plane + p], pred[2 * plane + p]};
      const double nq = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
      const double nt = std::sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
      const double c = nq > 0.0 ? (q[0] * t[0] + q[1] * t[1] + q[2] * t[2]) / (nq * nt) : -1.0;
      total_ += std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI;
      ++count_;
    }
  }

  double mean_angle_deg() const { return count_ ? total_ / double(count_) : kNoMetric; }

 private:
  double total_ = 0.0;
  std::size_t count_ = 0;
};

// Dispatches on the task kind.
class MetricAccumulator {
 public:
  MetricAccumulator(std::string task, std::size_t classes)
      : task_(std::move(task)), semantic_(classes) {}

  void add(const Tensor& output, const Tensor& target) {
    if (task_ == "shapes-semantic") semantic_.add(output, target);
    else if (task_ == "shapes-boundary") boundary_.add(output, target);
    else if (task_ == "ramp-depth") depth_.add(output, target);
    else normal_.add(output, target);
  }

  TaskMetrics finish() const {
    TaskMetrics m;
    if (task_ == "shapes-semantic") {
      m.miou = semantic_.miou();
      m.pixel_accuracy = semantic_.pixel_accuracy();
    } else if (task_ == "shapes-boundary") {
      m.boundary_f = boundary_.ods_f();
    } else if (task_ == "ramp-depth") {
      m.delta1 = depth_.delta(1);
      m.delta2 = depth_.delta(2);
      m.delta3 = depth_.delta(3);
    } else {
      m.mean_angle_deg = normal_.mean_angle_deg();
    }
    return m;
  }

 private:
  std::string task_;
  SemanticAccumulator semantic_;
  BoundaryAccumulator boundary_;
  DepthAccumulator depth_;
  NormalAccumulator normal_;
};

}  // namespace pag::harness
