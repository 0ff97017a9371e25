#pragma once

// Diffusion pathways of individual pixels.
//
// Each input pixel starts as a 1x1 field holding its channel values. A conv
// layer diffuses the field through the layer's filter rotated by 180 degrees
// with 1 added to every tap (a full correlation, so the field grows by k-1
// per axis); the forward pass's ReLU mask then switches positions off, and
// an optional channel mask keeps only the layer's most important feature
// maps. A pool layer keeps, for every pooled cell, the field value at the
// forward pass's argmax. After each conv/pool layer the field is summed over
// its spatial extent, giving one intensity per (pixel, channel).
//
// Fields are tracked with an anchor: the feature-map coordinate of field
// element (0,0). Elements whose coordinate falls outside the map are cleared
// by the ReLU mask step.

#include <cstdint>
#include <optional>
#include <tuple>
#include <string>
#include <vector>

#include "dpw/model.hpp"
#include "dpw/parallel.hpp"

namespace dpw {

// ---- diffusion kernels ------------------------------------------------------------

/// rotate180 in the (kh, kw) plane: out(co,ci,dy,dx) = w(co,ci,k-1-dy,k-1-dx).
inline Tensor rotate180(const Tensor& w) {
  require_rank(w.shape(), 4, "rotate180 weight");
  const std::size_t co = w.dim(0), ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  Tensor r(w.shape());
  for (std::size_t a = 0; a < co; ++a)
    for (std::size_t b = 0; b < ci; ++b)
      for (std::size_t y = 0; y < kh; ++y)
        for (std::size_t x = 0; x < kw; ++x) r.at(a, b, y, x) = w.at(a, b, kh - 1 - y, kw - 1 - x);
  return r;
}

struct DiffusionKernelSet {
  std::vector<std::size_t> conv_layers;  // model layer indices
  std::vector<Tensor> kernels;           // rotate180(weight), same order

  const Tensor& for_layer(std::size_t layer_index) const {
    for (std::size_t i = 0; i < conv_layers.size(); ++i)
      if (conv_layers[i] == layer_index) return kernels[i];
    throw Error(Errc::missing_record, "no diffusion kernel for layer " + std::to_string(layer_index));
  }
};

inline DiffusionKernelSet build_diffusion_kernels(const Model& model) {
  DiffusionKernelSet set;
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    const LayerSpec& l = model.spec.layers[i];
    if (l.kind != LayerKind::conv) continue;
    set.conv_layers.push_back(i);
    set.kernels.push_back(rotate180(model.weight(l)));
  }
  return set;
}

// ---- single-pixel fields ------------------------------------------------------------

struct PixelField {
  std::size_t origin_y = 0, origin_x = 0;
  Tensor64 values;  // (c, ph, pw)
  std::ptrdiff_t anchor_y = 0, anchor_x = 0;
  std::size_t cursor = 0;  // pathway layers applied so far

  std::size_t channels() const { return values.dim(0); }
  std::size_t ph() const { return values.dim(1); }
  std::size_t pw() const { return values.dim(2); }
};

constexpr std::ptrdiff_t floor_div2(std::ptrdiff_t v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

/// Initial 1x1 field of pixel (y, x) carrying the image's channel values.
inline PixelField initial_field(const Tensor& image, std::size_t y, std::size_t x) {
  require_rank(image.shape(), 3, "initial_field image");
  require(y < image.dim(1) && x < image.dim(2), Errc::out_of_range, "pixel outside image");
  PixelField f{y, x, Tensor64({image.dim(0), 1, 1}), static_cast<std::ptrdiff_t>(y), static_cast<std::ptrdiff_t>(x), 0};
  for (std::size_t c = 0; c < image.dim(0); ++c) f.values[c] = image.at(c, y, x);
  return f;
}

/// Full correlation of the field with (rw + 1); extent grows by k-1.
inline PixelField conv_diffuse(const PixelField& field, const Tensor& rw) {
  require_rank(rw.shape(), 4, "conv_diffuse kernel");
  const std::size_t cout = rw.dim(0), cin = rw.dim(1), k = rw.dim(2);
  require(cin == field.channels(), Errc::shape_mismatch,
          "conv_diffuse: field has " + std::to_string(field.channels()) + " channels, kernel expects " +
              std::to_string(cin));
  const std::size_t ph = field.ph(), pw = field.pw();
  const std::size_t oh = ph + k - 1, ow = pw + k - 1;
  PixelField out{field.origin_y, field.origin_x, Tensor64({cout, oh, ow}),
                 field.anchor_y - static_cast<std::ptrdiff_t>((k - 1) / 2),
                 field.anchor_x - static_cast<std::ptrdiff_t>((k - 1) / 2), field.cursor};
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t sy = 0; sy < ph; ++sy) {
      for (std::size_t sx = 0; sx < pw; ++sx) {
        const double v = field.values.at(ci, sy, sx);
        if (v == 0.0) continue;
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx)
              out.values.at(co, sy + dy, sx + dx) += v * (static_cast<double>(rw.at(co, ci, dy, dx)) + 1.0);
      }
    }
  }
  return out;
}

/// Zeroes elements outside the map or where the forward ReLU mask (c,H,W) is 0.
/// Pass an empty mask to apply the boundary clip alone.
inline PixelField apply_relu_mask(const PixelField& field, const Tensor& mask, std::size_t map_h, std::size_t map_w) {
  if (!mask.empty()) {
    require_rank(mask.shape(), 3, "relu mask");
    require(mask.dim(0) == field.channels() && mask.dim(1) == map_h && mask.dim(2) == map_w, Errc::shape_mismatch,
            "relu mask does not match field channels / map extent");
  }
  PixelField out = field;
  for (std::size_t c = 0; c < field.channels(); ++c) {
    for (std::size_t y = 0; y < field.ph(); ++y) {
      const std::ptrdiff_t my = field.anchor_y + static_cast<std::ptrdiff_t>(y);
      for (std::size_t x = 0; x < field.pw(); ++x) {
        const std::ptrdiff_t mx = field.anchor_x + static_cast<std::ptrdiff_t>(x);
        const bool inside = my >= 0 && mx >= 0 && my < static_cast<std::ptrdiff_t>(map_h) &&
                            mx < static_cast<std::ptrdiff_t>(map_w);
        if (!inside || (!mask.empty() && mask.at(c, static_cast<std::size_t>(my), static_cast<std::size_t>(mx)) == 0.0f))
          out.values.at(c, y, x) = 0.0;
      }
    }
  }
  return out;
}

/// Resolves the ReLU record following conv layer `conv_layer` in the trace.
inline PixelField apply_relu_mask(const PixelField& field, const Model& model, const ForwardTrace& trace,
                                  std::size_t conv_layer) {
  const std::size_t relu = conv_layer + 1;
  require(relu < model.spec.layers.size() && model.spec.layers[relu].kind == LayerKind::relu &&
              relu < trace.layers.size() && !trace.layers[relu].relu_mask.empty(),
          Errc::missing_record, "no relu record after layer " + std::to_string(conv_layer));
  const Tensor& mask = trace.layers[relu].relu_mask;
  return apply_relu_mask(field, mask, mask.dim(1), mask.dim(2));
}

/// Routes the field through 2x2 pooling: each pooled cell takes the field
/// value at its forward argmax, or 0 when the argmax is outside the field.
inline PixelField apply_pool_mask(const PixelField& field, const PoolArgmax& argmax) {
  require(argmax.output_shape.size() == 3 && argmax.output_shape[0] == field.channels(), Errc::shape_mismatch,
          "pool argmax does not match field channels");
  const std::ptrdiff_t qy0 = floor_div2(field.anchor_y), qx0 = floor_div2(field.anchor_x);
  const std::ptrdiff_t qy1 = floor_div2(field.anchor_y + static_cast<std::ptrdiff_t>(field.ph()) - 1);
  const std::ptrdiff_t qx1 = floor_div2(field.anchor_x + static_cast<std::ptrdiff_t>(field.pw()) - 1);
  const auto oh = static_cast<std::size_t>(qy1 - qy0 + 1), ow = static_cast<std::size_t>(qx1 - qx0 + 1);
  PixelField out{field.origin_y, field.origin_x, Tensor64({field.channels(), oh, ow}), qy0, qx0, field.cursor};
  const auto hp = static_cast<std::ptrdiff_t>(argmax.output_shape[1]);
  const auto wp = static_cast<std::ptrdiff_t>(argmax.output_shape[2]);
  for (std::size_t c = 0; c < field.channels(); ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      const std::ptrdiff_t qy = qy0 + static_cast<std::ptrdiff_t>(y);
      if (qy < 0 || qy >= hp) continue;
      for (std::size_t x = 0; x < ow; ++x) {
        const std::ptrdiff_t qx = qx0 + static_cast<std::ptrdiff_t>(x);
        if (qx < 0 || qx >= wp) continue;
        const auto [ty, tx] = argmax.coord(c, static_cast<std::size_t>(qy), static_cast<std::size_t>(qx));
        const std::ptrdiff_t fy = static_cast<std::ptrdiff_t>(ty) - field.anchor_y;
        const std::ptrdiff_t fx = static_cast<std::ptrdiff_t>(tx) - field.anchor_x;
        if (fy < 0 || fx < 0 || fy >= static_cast<std::ptrdiff_t>(field.ph()) ||
            fx >= static_cast<std::ptrdiff_t>(field.pw()))
          continue;
        out.values.at(c, y, x) = field.values.at(c, static_cast<std::size_t>(fy), static_cast<std::size_t>(fx));
      }
    }
  }
  return out;
}

inline PixelField apply_pool_mask(const PixelField& field, const ForwardTrace& trace, std::size_t pool_layer) {
  require(pool_layer < trace.layers.size() && trace.layers[pool_layer].has_argmax, Errc::missing_record,
          "no pool argmax for layer " + std::to_string(pool_layer));
  return apply_pool_mask(field, trace.layers[pool_layer].argmax);
}

/// Zeroes every channel not in `keep`.
inline PixelField apply_channel_mask(const PixelField& field, const std::vector<std::size_t>& keep) {
  std::vector<char> kept(field.channels(), 0);
  for (std::size_t c : keep) {
    require(c < field.channels(), Errc::out_of_range,
            "channel " + std::to_string(c) + " out of range for " + std::to_string(field.channels()) + " channels");
    kept[c] = 1;
  }
  PixelField out = field;
  const std::size_t plane = field.ph() * field.pw();
  for (std::size_t c = 0; c < field.channels(); ++c)
    if (!kept[c]) std::fill_n(out.values.data().begin() + static_cast<std::ptrdiff_t>(c * plane), plane, 0.0);
  return out;
}

/// Per-channel sum of the field over its spatial extent.
inline std::vector<double> field_sums(const PixelField& field) {
  std::vector<double> s(field.channels(), 0.0);
  const std::size_t plane = field.ph() * field.pw();
  for (std::size_t c = 0; c < field.channels(); ++c)
    for (std::size_t i = 0; i < plane; ++i) s[c] += field.values[c * plane + i];
  return s;
}

// ---- whole-image extraction -------------------------------------------------------

struct ExtractOptions {
  std::optional<std::size_t> channel_topk;  // channel mask off when empty
  bool relu_masks = true;                   // false: boundary clip only
  ImportanceMethod importance = ImportanceMethod::activation_l1;
  std::optional<std::size_t> importance_class;  // grad-x-activation; defaults to the prediction
  std::size_t chunk = 64;
  std::size_t threads = 1;
};

struct LayerPathwayAggregate {
  std::size_t pathway_index = 0;  // position among the pathway layers (L0, L1, ...)
  std::size_t layer_index = 0;    // index into ModelSpec::layers
  std::string name;
  Tensor64 values;  // (H, W, C_l): summed field of pixel (h,w) on channel c
};

struct PathwayResult {
  std::vector<LayerPathwayAggregate> layers;
  ExtractOptions options;
  // Channels kept by the channel mask at each pathway layer (all channels
  // when the mask is off or the layer is a pool layer).
  std::vector<std::vector<std::size_t>> kept_channels;

  std::size_t height() const { return layers.at(0).values.dim(0); }
  std::size_t width() const { return layers.at(0).values.dim(1); }
};

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  double s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// A pixel's field restricted to the in-bounds part of its logical extent.
// Out-of-bounds elements are always zero after the ReLU-mask step, so only
// this window is stored, channel-last.
struct ClippedField {
  std::ptrdiff_t anchor_y = 0, anchor_x = 0;
  std::size_t ph = 1, pw = 1;
  std::ptrdiff_t y0 = 0, x0 = 0;
  std::size_t h = 0, w = 0;
  std::vector<double> v;  // ((y - y0) * w + (x - x0)) * c + ch
};

inline std::pair<std::ptrdiff_t, std::size_t> clip_range(std::ptrdiff_t lo, std::size_t extent, std::size_t bound) {
  const std::ptrdiff_t a = std::max<std::ptrdiff_t>(lo, 0);
  const std::ptrdiff_t b = std::min<std::ptrdiff_t>(lo + static_cast<std::ptrdiff_t>(extent), static_cast<std::ptrdiff_t>(bound));
  return {a, b > a ? static_cast<std::size_t>(b - a) : 0};
}

struct ConvStep {
  std::size_t cin = 0, cout = 0, k = 0, map_h = 0, map_w = 0;
  std::vector<double> gather;   // (cout, k*k, cin): rw(co,ci,k-1-ey,k-1-ex) + 1
  const Tensor* mask = nullptr; // relu mask, null when masks are off
  std::vector<char> keep;       // channel mask
};

struct PoolStep {
  const PoolArgmax* argmax = nullptr;
  std::size_t c = 0, map_h = 0, map_w = 0, out_h = 0, out_w = 0;
};

inline void conv_step(const ConvStep& s, const std::vector<ClippedField>& in, std::vector<ClippedField>& out) {
  const auto r = static_cast<std::ptrdiff_t>((s.k - 1) / 2);
  out.resize(in.size());
  for (std::size_t p = 0; p < in.size(); ++p) {
    const ClippedField& f = in[p];
    ClippedField& o = out[p];
    o.anchor_y = f.anchor_y - r;
    o.anchor_x = f.anchor_x - r;
    o.ph = f.ph + s.k - 1;
    o.pw = f.pw + s.k - 1;
    std::tie(o.y0, o.h) = clip_range(o.anchor_y, o.ph, s.map_h);
    std::tie(o.x0, o.w) = clip_range(o.anchor_x, o.pw, s.map_w);
    o.v.assign(o.h * o.w * s.cout, 0.0);
  }
  const std::size_t taps = s.k * s.k;
  const std::size_t plane = s.map_h * s.map_w;
  for (std::size_t co = 0; co < s.cout; ++co) {
    if (!s.keep[co]) continue;
    const double* g = s.gather.data() + co * taps * s.cin;
    const float* mask = s.mask ? s.mask->data().data() + co * plane : nullptr;
    for (std::size_t p = 0; p < in.size(); ++p) {
      const ClippedField& f = in[p];
      ClippedField& o = out[p];
      for (std::size_t yy = 0; yy < o.h; ++yy) {
        const std::ptrdiff_t y = o.y0 + static_cast<std::ptrdiff_t>(yy);
        for (std::size_t xx = 0; xx < o.w; ++xx) {
          const std::ptrdiff_t x = o.x0 + static_cast<std::ptrdiff_t>(xx);
          if (mask && mask[static_cast<std::size_t>(y) * s.map_w + static_cast<std::size_t>(x)] == 0.0f) continue;
          double acc = 0.0;
          for (std::size_t ey = 0; ey < s.k; ++ey) {
            const std::ptrdiff_t sy = y - r + static_cast<std::ptrdiff_t>(ey) - f.y0;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(f.h)) continue;
            for (std::size_t ex = 0; ex < s.k; ++ex) {
              const std::ptrdiff_t sx = x - r + static_cast<std::ptrdiff_t>(ex) - f.x0;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(f.w)) continue;
              acc += dot(f.v.data() + (static_cast<std::size_t>(sy) * f.w + static_cast<std::size_t>(sx)) * s.cin,
                         g + (ey * s.k + ex) * s.cin, s.cin);
            }
          }
          o.v[(yy * o.w + xx) * s.cout + co] = acc;
        }
      }
    }
  }
}

inline void pool_step(const PoolStep& s, const std::vector<ClippedField>& in, std::vector<ClippedField>& out) {
  out.resize(in.size());
  for (std::size_t p = 0; p < in.size(); ++p) {
    const ClippedField& f = in[p];
    ClippedField& o = out[p];
    o.anchor_y = floor_div2(f.anchor_y);
    o.anchor_x = floor_div2(f.anchor_x);
    o.ph = static_cast<std::size_t>(floor_div2(f.anchor_y + static_cast<std::ptrdiff_t>(f.ph) - 1) - o.anchor_y + 1);
    o.pw = static_cast<std::size_t>(floor_div2(f.anchor_x + static_cast<std::ptrdiff_t>(f.pw) - 1) - o.anchor_x + 1);
    std::tie(o.y0, o.h) = clip_range(o.anchor_y, o.ph, s.out_h);
    std::tie(o.x0, o.w) = clip_range(o.anchor_x, o.pw, s.out_w);
    o.v.assign(o.h * o.w * s.c, 0.0);
    for (std::size_t yy = 0; yy < o.h; ++yy) {
      for (std::size_t xx = 0; xx < o.w; ++xx) {
        const auto qy = static_cast<std::size_t>(o.y0) + yy, qx = static_cast<std::size_t>(o.x0) + xx;
        for (std::size_t c = 0; c < s.c; ++c) {
          const auto [ty, tx] = s.argmax->coord(c, qy, qx);
          const std::ptrdiff_t fy = static_cast<std::ptrdiff_t>(ty) - f.y0;
          const std::ptrdiff_t fx = static_cast<std::ptrdiff_t>(tx) - f.x0;
          if (fy < 0 || fx < 0 || fy >= static_cast<std::ptrdiff_t>(f.h) || fx >= static_cast<std::ptrdiff_t>(f.w))
            continue;
          o.v[(yy * o.w + xx) * s.c + c] = f.v[(static_cast<std::size_t>(fy) * f.w + static_cast<std::size_t>(fx)) * s.c + c];
        }
      }
    }
  }
}

}  // namespace detail

/// Channels kept at each pathway layer under `options`.
inline std::vector<std::vector<std::size_t>> channel_keep_sets(const Model& model, const ForwardTrace& trace,
                                                               const ExtractOptions& options) {
  std::vector<std::vector<std::size_t>> keep;
  for (std::size_t p = 0; p < model.spec.pathway_layers.size(); ++p) {
    const std::size_t c = model.spec.pathway_channels(p);
    const bool conv = model.spec.layers[model.spec.pathway_layers[p]].kind == LayerKind::conv;
    if (!conv || !options.channel_topk) {
      std::vector<std::size_t> all(c);
      std::iota(all.begin(), all.end(), std::size_t{0});
      keep.push_back(std::move(all));
      continue;
    }
    auto ranking = channel_importance(model, trace, p, options.importance,
                                      options.importance_class.value_or(trace.predicted));
    ranking.resize(std::min(*options.channel_topk, c));
    std::sort(ranking.begin(), ranking.end());
    keep.push_back(std::move(ranking));
  }
  return keep;
}

/// Extracts the pathway aggregates of every pixel of the traced image.
inline PathwayResult extract_pathways(const Model& model, const DiffusionKernelSet& kernels, const ForwardTrace& trace,
                                      const ExtractOptions& options = {}) {
  const ModelSpec& spec = model.spec;
  const Tensor& image = trace.input;
  require_shape(image.shape(), spec.input_shape, "extract_pathways image");
  require(!spec.pathway_layers.empty(), Errc::invalid_argument, "model has no pathway layers");
  const std::size_t H = image.dim(1), W = image.dim(2), C = image.dim(0);

  PathwayResult result;
  result.options = options;
  result.kept_channels = channel_keep_sets(model, trace, options);

  // Per-layer steps, shared read-only by all workers.
  std::vector<detail::ConvStep> convs(spec.pathway_layers.size());
  std::vector<detail::PoolStep> pools(spec.pathway_layers.size());
  for (std::size_t p = 0; p < spec.pathway_layers.size(); ++p) {
    const std::size_t li = spec.pathway_layers[p];
    const LayerSpec& l = spec.layers[li];
    const Shape& in_shape = trace.input_of(li).shape();
    if (l.kind == LayerKind::conv) {
      detail::ConvStep& s = convs[p];
      s.cin = l.conv.cin;
      s.cout = l.conv.cout;
      s.k = l.conv.k;
      s.map_h = in_shape[1];
      s.map_w = in_shape[2];
      const Tensor& rw = kernels.for_layer(li);
      require_shape(rw.shape(), {s.cout, s.cin, s.k, s.k}, "diffusion kernel of " + l.name);
      s.gather.resize(s.cout * s.k * s.k * s.cin);
      for (std::size_t co = 0; co < s.cout; ++co)
        for (std::size_t ey = 0; ey < s.k; ++ey)
          for (std::size_t ex = 0; ex < s.k; ++ex)
            for (std::size_t ci = 0; ci < s.cin; ++ci)
              s.gather[((co * s.k + ey) * s.k + ex) * s.cin + ci] =
                  static_cast<double>(rw.at(co, ci, s.k - 1 - ey, s.k - 1 - ex)) + 1.0;
      if (options.relu_masks) {
        const std::size_t relu = li + 1;
        require(relu < spec.layers.size() && spec.layers[relu].kind == LayerKind::relu &&
                    !trace.layers.at(relu).relu_mask.empty(),
                Errc::missing_record, "no relu record after layer '" + l.name + "'");
        s.mask = &trace.layers[relu].relu_mask;
      }
      s.keep.assign(s.cout, 0);
      for (std::size_t c : result.kept_channels[p]) s.keep[c] = 1;
    } else {
      detail::PoolStep& s = pools[p];
      require(trace.layers.at(li).has_argmax, Errc::missing_record, "no pool argmax for layer '" + l.name + "'");
      s.argmax = &trace.layers[li].argmax;
      s.c = in_shape[0];
      s.map_h = in_shape[1];
      s.map_w = in_shape[2];
      s.out_h = s.argmax->output_shape[1];
      s.out_w = s.argmax->output_shape[2];
    }
    LayerPathwayAggregate agg;
    agg.pathway_index = p;
    agg.layer_index = li;
    agg.name = l.name;
    agg.values = Tensor64({H, W, spec.pathway_channels(p)});
    result.layers.push_back(std::move(agg));
  }

  const std::size_t pixels = H * W;
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
  const std::size_t chunks = (pixels + chunk - 1) / chunk;
  parallel_for(chunks, options.threads, [&](std::size_t ci) {
    const std::size_t first = ci * chunk, last = std::min(pixels, first + chunk);
    std::vector<detail::ClippedField> cur(last - first), next;
    for (std::size_t i = first; i < last; ++i) {
      detail::ClippedField& f = cur[i - first];
      f.anchor_y = f.y0 = static_cast<std::ptrdiff_t>(i / W);
      f.anchor_x = f.x0 = static_cast<std::ptrdiff_t>(i % W);
      f.ph = f.pw = f.h = f.w = 1;
      f.v.resize(C);
      for (std::size_t c = 0; c < C; ++c) f.v[c] = image.at(c, i / W, i % W);
    }
    for (std::size_t p = 0; p < spec.pathway_layers.size(); ++p) {
      const bool conv = spec.layers[spec.pathway_layers[p]].kind == LayerKind::conv;
      if (conv)
        detail::conv_step(convs[p], cur, next);
      else
        detail::pool_step(pools[p], cur, next);
      std::swap(cur, next);
      Tensor64& agg = result.layers[p].values;
      const std::size_t c = agg.dim(2);
      for (std::size_t i = first; i < last; ++i) {
        const detail::ClippedField& f = cur[i - first];
        double* row = agg.data().data() + i * c;
        for (std::size_t pos = 0; pos < f.h * f.w; ++pos)
          for (std::size_t ch = 0; ch < c; ++ch) row[ch] += f.v[pos * c + ch];
      }
    }
  });
  return result;
}

inline PathwayResult extract_pathways(const Model& model, const Tensor& image, const ExtractOptions& options = {}) {
  return extract_pathways(model, build_diffusion_kernels(model), forward_trace(model, image), options);
}

/// Follows one pixel through every pathway layer with the per-step operations,
/// returning its field after each layer.
inline std::vector<PixelField> trace_pixel(const Model& model, const DiffusionKernelSet& kernels,
                                           const ForwardTrace& trace, std::size_t y, std::size_t x,
                                           const ExtractOptions& options = {}) {
  const ModelSpec& spec = model.spec;
  const auto keep = channel_keep_sets(model, trace, options);
  std::vector<PixelField> fields;
  PixelField f = initial_field(trace.input, y, x);
  for (std::size_t p = 0; p < spec.pathway_layers.size(); ++p) {
    const std::size_t li = spec.pathway_layers[p];
    if (spec.layers[li].kind == LayerKind::conv) {
      f = conv_diffuse(f, kernels.for_layer(li));
      if (options.relu_masks) {
        f = apply_relu_mask(f, model, trace, li);
      } else {
        const Shape& s = trace.layers[li].output.shape();
        f = apply_relu_mask(f, Tensor{}, s[1], s[2]);
      }
      if (options.channel_topk) f = apply_channel_mask(f, keep[p]);
    } else {
      f = apply_pool_mask(f, trace, li);
    }
    f.cursor = p + 1;
    fields.push_back(f);
  }
  return fields;
}

}  // namespace dpw
