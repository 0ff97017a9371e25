#pragma once

// Dense forward kernels and their input-gradient rules. Reductions accumulate
// in double and round once on store, so results do not depend on how callers
// schedule work.

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "dpw/tensor.hpp"

namespace dpw {

inline std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t pad, std::size_t stride) {
  require(stride >= 1, Errc::invalid_argument, "conv stride must be >= 1");
  const std::size_t padded = in + 2 * pad;
  require(padded >= k, Errc::shape_mismatch, "conv kernel larger than padded input");
  require((padded - k) % stride == 0, Errc::shape_mismatch,
          "conv output extent is not integral: (" + std::to_string(in) + "+2*" + std::to_string(pad) + "-" +
              std::to_string(k) + ")/" + std::to_string(stride));
  return (padded - k) / stride + 1;
}

/// out(co,y,x) = bias(co) + sum input(ci, y*stride-pad+dy, x*stride-pad+dx) * weight(co,ci,dy,dx)
inline Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t pad,
                             std::size_t stride = 1) {
  require_rank(input.shape(), 3, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  require(k % 2 == 1 && weight.dim(3) == k, Errc::invalid_argument, "conv2d kernel must be square with odd extent");
  require(weight.dim(1) == cin, Errc::shape_mismatch,
          "conv2d weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " + std::to_string(cin));
  require_shape(bias.shape(), {cout}, "conv2d bias");
  const std::size_t oh = conv_output_extent(h, k, pad, stride);
  const std::size_t ow = conv_output_extent(w, k, pad, stride);

  Tensor out({cout, oh, ow});
  std::vector<double> acc(oh * ow);
  const auto in = input.data();
  const auto wt = weight.data();
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t co = 0; co < cout; ++co) {
    std::fill(acc.begin(), acc.end(), static_cast<double>(bias[co]));
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const float* plane = in.data() + ci * h * w;
      for (std::size_t dy = 0; dy < k; ++dy) {
        for (std::size_t dx = 0; dx < k; ++dx) {
          const double wv = wt[((co * cin + ci) * k + dy) * k + dx];
          if (wv == 0.0) continue;
          for (std::size_t y = 0; y < oh; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + dy) - ipad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const float* row = plane + static_cast<std::size_t>(iy) * w;
            double* arow = acc.data() + y * ow;
            for (std::size_t x = 0; x < ow; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + dx) - ipad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              arow[x] += wv * row[ix];
            }
          }
        }
      }
    }
    for (std::size_t i = 0; i < oh * ow; ++i) out[co * oh * ow + i] = static_cast<float>(acc[i]);
  }
  return out;
}

struct ReluResult {
  Tensor output;
  Tensor mask;  // 1 where input > 0, else 0
};

inline ReluResult relu_forward(const Tensor& input) {
  ReluResult r{Tensor(input.shape()), Tensor(input.shape())};
  for (std::size_t i = 0; i < input.size(); ++i) {
    const bool on = input[i] > 0.0f;
    r.mask[i] = on ? 1.0f : 0.0f;
    r.output[i] = on ? input[i] : 0.0f;
  }
  return r;
}

// Winning input coordinate of each 2x2 pooling window, stored as y*W+x of the
// input plane for every (c, oy, ox) of the output.
struct PoolArgmax {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::uint32_t> index;

  std::pair<std::size_t, std::size_t> coord(std::size_t c, std::size_t oy, std::size_t ox) const {
    const std::size_t flat = index[(c * output_shape[1] + oy) * output_shape[2] + ox];
    return {flat / input_shape[2], flat % input_shape[2]};
  }
};

struct PoolResult {
  Tensor output;
  PoolArgmax argmax;
};

/// 2x2 max pooling, stride 2, ceiling extents (trailing windows may be partial).
/// Ties go to the first element in row-major window order.
inline PoolResult maxpool2x2_forward(const Tensor& input) {
  require_rank(input.shape(), 3, "maxpool input");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  PoolResult r{Tensor({c, oh, ow}), PoolArgmax{input.shape(), {c, oh, ow}, {}}};
  r.argmax.index.resize(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        float best_v = input.at(ch, 2 * oy, 2 * ox);
        for (std::size_t y = 2 * oy; y < std::min(2 * oy + 2, h); ++y) {
          for (std::size_t x = 2 * ox; x < std::min(2 * ox + 2, w); ++x) {
            const float v = input.at(ch, y, x);
            if (v > best_v) {
              best_v = v;
              best = y * w + x;
            }
          }
        }
        const std::size_t o = (ch * oh + oy) * ow + ox;
        r.output[o] = best_v;
        r.argmax.index[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

/// out = weight * input + bias
inline Tensor linear_forward(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  require(input.size() == n, Errc::shape_mismatch,
          "linear expects " + std::to_string(n) + " inputs, got " + std::to_string(input.size()));
  require_shape(bias.shape(), {m}, "linear bias");
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = bias[i];
    const float* row = weight.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * input[j];
    out[i] = static_cast<float>(acc);
  }
  return out;
}

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

inline std::vector<double> softmax(const Tensor& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits.data()) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

/// loss = -log softmax(logits)[label]; grad = softmax - onehot(label).
inline LossResult softmax_cross_entropy(const Tensor& logits, std::size_t label) {
  require(label < logits.size(), Errc::out_of_range,
          "label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) + " classes");
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits.data()) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (float v : logits.data()) z += std::exp(v - mx);
  const auto p = softmax(logits);
  LossResult r{std::log(z) - (logits[label] - mx), Tensor(logits.shape())};
  for (std::size_t i = 0; i < p.size(); ++i) r.grad_logits[i] = static_cast<float>(p[i] - (i == label ? 1.0 : 0.0));
  return r;
}

// ---- input-gradient rules -------------------------------------------------

inline Tensor relu_backward(const Tensor& upstream, const Tensor& mask) {
  require_shape(upstream.shape(), mask.shape(), "relu backward");
  Tensor g(upstream.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = upstream[i] * mask[i];
  return g;
}

inline Tensor maxpool2x2_backward(const Tensor& upstream, const PoolArgmax& argmax) {
  require_shape(upstream.shape(), argmax.output_shape, "maxpool backward");
  Tensor g(argmax.input_shape);
  const std::size_t c = argmax.output_shape[0];
  const std::size_t plane_out = argmax.output_shape[1] * argmax.output_shape[2];
  const std::size_t plane_in = argmax.input_shape[1] * argmax.input_shape[2];
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane_out; ++i)
      g[ch * plane_in + argmax.index[ch * plane_out + i]] += upstream[ch * plane_out + i];
  return g;
}

/// Transpose of conv2d_forward with respect to its input.
inline Tensor conv2d_backward_input(const Tensor& upstream, const Tensor& weight, const Shape& input_shape,
                                    std::size_t pad, std::size_t stride = 1) {
  require_rank(upstream.shape(), 3, "conv2d backward upstream");
  require_rank(input_shape, 3, "conv2d backward input shape");
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
  const std::size_t h = input_shape[1], w = input_shape[2];
  const std::size_t oh = upstream.dim(1), ow = upstream.dim(2);
  require(upstream.dim(0) == cout && input_shape[0] == cin, Errc::shape_mismatch, "conv2d backward channel mismatch");
  require(oh == conv_output_extent(h, k, pad, stride) && ow == conv_output_extent(w, k, pad, stride),
          Errc::shape_mismatch, "conv2d backward spatial mismatch");
  Tensor g(input_shape);
  std::vector<double> acc(h * w);
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t ci = 0; ci < cin; ++ci) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t co = 0; co < cout; ++co) {
      const float* up = upstream.data().data() + co * oh * ow;
      for (std::size_t dy = 0; dy < k; ++dy) {
        for (std::size_t dx = 0; dx < k; ++dx) {
          const double wv = weight.at(co, ci, dy, dx);
          if (wv == 0.0) continue;
          for (std::size_t y = 0; y < oh; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + dy) - ipad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t x = 0; x < ow; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + dx) - ipad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              acc[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += wv * up[y * ow + x];
            }
          }
        }
      }
    }
    for (std::size_t i = 0; i < h * w; ++i) g[ci * h * w + i] = static_cast<float>(acc[i]);
  }
  return g;
}

/// weight^T * upstream
inline Tensor linear_backward_input(const Tensor& upstream, const Tensor& weight) {
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  require(upstream.size() == m, Errc::shape_mismatch, "linear backward upstream size mismatch");
  std::vector<double> acc(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double u = upstream[i];
    const float* row = weight.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc[j] += u * row[j];
  }
  Tensor g({n});
  for (std::size_t j = 0; j < n; ++j) g[j] = static_cast<float>(acc[j]);
  return g;
}

}  // namespace dpw
