#pragma once

// Raw (tape-free) convolution kernels. Every convolution in the library goes
// through the gather / GEMM / scatter path below; a dense convolution is the
// same path with every pixel active, so dense and full-mask perforated
// results are bitwise identical.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "pag/tensor.hpp"

namespace pag {

struct ConvSpec {
  std::size_t out_channels = 1;
  std::size_t in_channels = 1;
  std::size_t kh = 1;
  std::size_t kw = 1;
  std::size_t dilation = 1;
  std::size_t stride = 1;

  Dims kernel_dims() const { return {out_channels, in_channels, kh, kw}; }
  std::size_t patch_size() const { return in_channels * kh * kw; }
  std::size_t macs_per_pixel() const { return patch_size() * out_channels; }

  // Column of the patch matrix holding input channel c at tap (i, j).
  // c varies fastest, then i, then j.
  std::size_t patch_column(std::size_t c, std::size_t i, std::size_t j) const {
    return (j * kh + i) * in_channels + c;
  }
};

inline ConvSpec conv_spec_for(const Tensor& kernel, std::size_t dilation = 1) {
  if (kernel.rank() != 4) {
    throw Error("conv kernel must be rank 4, got " + dims_to_string(kernel.dims()));
  }
  return {kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3), dilation, 1};
}

inline void validate_conv(const Tensor& input, const ConvSpec& spec, const Tensor& kernel,
                          const Tensor* bias) {
  if (input.rank() != 3) {
    throw Error("conv input must be C x H x W, got " + dims_to_string(input.dims()));
  }
  if (kernel.dims() != spec.kernel_dims()) {
    throw Error("conv kernel dims " + dims_to_string(kernel.dims()) +
                " do not match spec " + dims_to_string(spec.kernel_dims()));
  }
  if (input.dim(0) != spec.in_channels) {
    throw Error("conv input has " + std::to_string(input.dim(0)) + " channels, kernel expects " +
                std::to_string(spec.in_channels));
  }
  if (spec.stride != 1) throw Error("only stride 1 convolution is supported");
  if (spec.dilation == 0) {
    throw Error("dilation 0 is a copy, not a convolution");
  }
  if (spec.kh % 2 == 0 || spec.kw % 2 == 0) throw Error("conv kernel extents must be odd");
  const std::size_t rf_h = (spec.kh - 1) * spec.dilation + 1;
  const std::size_t rf_w = (spec.kw - 1) * spec.dilation + 1;
  if (rf_h > 2 * input.dim(1) || rf_w > 2 * input.dim(2)) {
    throw Error("dilation " + std::to_string(spec.dilation) +
                " gives a receptive field larger than twice the input extent");
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != spec.out_channels)) {
    throw Error("conv bias must have dims {" + std::to_string(spec.out_channels) + "}");
  }
}

inline void validate_binary_mask(const Tensor& mask, std::size_t h, std::size_t w) {
  if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w) {
    throw Error("mask dims " + dims_to_string(mask.dims()) + " do not match spatial dims " +
                std::to_string(h) + "x" + std::to_string(w));
  }
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw Error("mask must contain only 0 and 1");
  }
}

// Row-major (y * W + x) indices of the active pixels.
inline std::vector<std::size_t> active_pixels(const Tensor* mask, std::size_t h, std::size_t w) {
  std::vector<std::size_t> active;
  active.reserve(h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    if (!mask || (*mask)[p] == 1.0) active.push_back(p);
  }
  return active;
}

// Patch matrix: one row per active pixel, patch_size() columns.
inline std::vector<double> gather_patches(const Tensor& input, const ConvSpec& spec,
                                          const std::vector<std::size_t>& active) {
  const auto h = static_cast<std::ptrdiff_t>(input.dim(1));
  const auto w = static_cast<std::ptrdiff_t>(input.dim(2));
  const auto d = static_cast<std::ptrdiff_t>(spec.dilation);
  const auto ch = static_cast<std::ptrdiff_t>(spec.kh / 2);
  const auto cw = static_cast<std::ptrdiff_t>(spec.kw / 2);
  const std::size_t cols = spec.patch_size();
  const std::size_t plane = input.dim(1) * input.dim(2);
  const double* in = input.data().data();
  std::vector<double> patches(active.size() * cols, 0.0);
  for (std::size_t n = 0; n < active.size(); ++n) {
    const auto y = static_cast<std::ptrdiff_t>(active[n]) / w;
    const auto x = static_cast<std::ptrdiff_t>(active[n]) % w;
    double* row = patches.data() + n * cols;
    for (std::size_t j = 0; j < spec.kw; ++j) {
      const auto xx = x + d * (static_cast<std::ptrdiff_t>(j) - cw);
      if (xx < 0 || xx >= w) continue;
      for (std::size_t i = 0; i < spec.kh; ++i) {
        const auto yy = y + d * (static_cast<std::ptrdiff_t>(i) - ch);
        if (yy < 0 || yy >= h) continue;
        const std::size_t offset = static_cast<std::size_t>(yy * w + xx);
        double* dst = row + spec.patch_column(0, i, j);
        for (std::size_t c = 0; c < spec.in_channels; ++c) dst[c] = in[c * plane + offset];
      }
    }
  }
  return patches;
}

// Transposed scatter of patch-matrix gradients back to the input layout.
inline void scatter_patch_grads(Tensor& grad_input, const ConvSpec& spec,
                                const std::vector<std::size_t>& active,
                                const std::vector<double>& patch_grads) {
  const auto h = static_cast<std::ptrdiff_t>(grad_input.dim(1));
  const auto w = static_cast<std::ptrdiff_t>(grad_input.dim(2));
  const auto d = static_cast<std::ptrdiff_t>(spec.dilation);
  const auto ch = static_cast<std::ptrdiff_t>(spec.kh / 2);
  const auto cw = static_cast<std::ptrdiff_t>(spec.kw / 2);
  const std::size_t cols = spec.patch_size();
  const std::size_t plane = grad_input.dim(1) * grad_input.dim(2);
  double* g = grad_input.data().data();
  for (std::size_t n = 0; n < active.size(); ++n) {
    const auto y = static_cast<std::ptrdiff_t>(active[n]) / w;
    const auto x = static_cast<std::ptrdiff_t>(active[n]) % w;
    const double* row = patch_grads.data() + n * cols;
    for (std::size_t j = 0; j < spec.kw; ++j) {
      const auto xx = x + d * (static_cast<std::ptrdiff_t>(j) - cw);
      if (xx < 0 || xx >= w) continue;
      for (std::size_t i = 0; i < spec.kh; ++i) {
        const auto yy = y + d * (static_cast<std::ptrdiff_t>(i) - ch);
        if (yy < 0 || yy >= h) continue;
        const std::size_t offset = static_cast<std::size_t>(yy * w + xx);
        const double* src = row + spec.patch_column(0, i, j);
        for (std::size_t c = 0; c < spec.in_channels; ++c) g[c * plane + offset] += src[c];
      }
    }
  }
}

// Kernel re-laid out as patch_size() x out_channels so the GEMM inner loop
// runs over output channels.
inline std::vector<double> kernel_matrix(const Tensor& kernel, const ConvSpec& spec) {
  std::vector<double> km(spec.patch_size() * spec.out_channels);
  for (std::size_t o = 0; o < spec.out_channels; ++o)
    for (std::size_t c = 0; c < spec.in_channels; ++c)
      for (std::size_t i = 0; i < spec.kh; ++i)
        for (std::size_t j = 0; j < spec.kw; ++j)
          km[spec.patch_column(c, i, j) * spec.out_channels + o] =
              kernel[((o * spec.in_channels + c) * spec.kh + i) * spec.kw + j];
  return km;
}

struct PerforatedConvResult {
  Tensor output;
  std::size_t gathered_rows = 0;
};

// Output is zero at inactive pixels (bias included); active pixels hold the
// full convolution plus bias. A null mask means every pixel is active.
inline PerforatedConvResult conv2d_gather_scatter(const Tensor& input, const ConvSpec& spec,
                                                  const Tensor& kernel, const Tensor* bias,
                                                  const Tensor* mask) {
  validate_conv(input, spec, kernel, bias);
  const std::size_t h = input.dim(1), w = input.dim(2);
  if (mask) validate_binary_mask(*mask, h, w);
  const auto active = active_pixels(mask, h, w);
  const auto patches = gather_patches(input, spec, active);
  const auto km = kernel_matrix(kernel, spec);
  const std::size_t cols = spec.patch_size();
  const std::size_t oc = spec.out_channels;

  std::vector<double> acc(oc);
  Tensor out({oc, h, w});
  const std::size_t plane = h * w;
  for (std::size_t n = 0; n < active.size(); ++n) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const double* row = patches.data() + n * cols;
    for (std::size_t col = 0; col < cols; ++col) {
      const double p = row[col];
      const double* krow = km.data() + col * oc;
      for (std::size_t o = 0; o < oc; ++o) acc[o] += p * krow[o];
    }
    for (std::size_t o = 0; o < oc; ++o) {
      out[o * plane + active[n]] = bias ? acc[o] + (*bias)[o] : acc[o];
    }
  }
  return {std::move(out), active.size()};
}

struct ConvGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

// Gradients of conv2d_gather_scatter; inactive output pixels contribute
// nothing on any path.
inline ConvGrads conv2d_gather_scatter_backward(const Tensor& input, const ConvSpec& spec,
                                                const Tensor& kernel, const Tensor* mask,
                                                const Tensor& grad_out) {
  const std::size_t h = input.dim(1), w = input.dim(2);
  const auto active = active_pixels(mask, h, w);
  const auto patches = gather_patches(input, spec, active);
  const auto km = kernel_matrix(kernel, spec);
  const std::size_t cols = spec.patch_size();
  const std::size_t oc = spec.out_channels;
  const std::size_t plane = h * w;

  ConvGrads grads{Tensor(input.dims()), Tensor(kernel.dims()), Tensor({oc})};
  std::vector<double> dkm(cols * oc, 0.0);
  std::vector<double> dpatches(active.size() * cols, 0.0);
  std::vector<double> gout(oc);
  for (std::size_t n = 0; n < active.size(); ++n) {
    for (std::size_t o = 0; o < oc; ++o) {
      gout[o] = grad_out[o * plane + active[n]];
      grads.bias[o] += gout[o];
    }
    const double* row = patches.data() + n * cols;
    double* drow = dpatches.data() + n * cols;
    for (std::size_t col = 0; col < cols; ++col) {
      const double p = row[col];
      const double* krow = km.data() + col * oc;
      double* dkrow = dkm.data() + col * oc;
      double s = 0.0;
      for (std::size_t o = 0; o < oc; ++o) {
        dkrow[o] += p * gout[o];
        s += krow[o] * gout[o];
      }
      drow[col] = s;
    }
  }
  scatter_patch_grads(grads.input, spec, active, dpatches);
  for (std::size_t o = 0; o < oc; ++o)
    for (std::size_t c = 0; c < spec.in_channels; ++c)
      for (std::size_t i = 0; i < spec.kh; ++i)
        for (std::size_t j = 0; j < spec.kw; ++j)
          grads.kernel[((o * spec.in_channels + c) * spec.kh + i) * spec.kw + j] =
              dkm[spec.patch_column(c, i, j) * oc + o];
  return grads;
}

}  // namespace pag
