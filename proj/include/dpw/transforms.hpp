#pragma once

// Rotation and occlusion transforms, and the (original, invariant, variant,
// target) groups found by sweeping them.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpw/attack.hpp"

namespace dpw {

/// Rotates every channel of a (C, H, W) image counterclockwise by `degrees`
/// about the image center, nearest-neighbour sampling, zero fill.
inline Tensor rotate(const Tensor& image, double degrees) {
  require_rank(image.shape(), 3, "rotate image");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  double d = std::fmod(degrees, 360.0);
  if (d < 0) d += 360.0;
  double c, s;
  if (d == 0.0) {
    c = 1, s = 0;
  } else if (d == 90.0) {
    c = 0, s = 1;
  } else if (d == 180.0) {
    c = -1, s = 0;
  } else if (d == 270.0) {
    c = 0, s = -1;
  } else {
    c = std::cos(d * std::numbers::pi / 180.0);
    s = std::sin(d * std::numbers::pi / 180.0);
  }
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  Tensor out(image.shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const long sy = std::lround(dx * s + dy * c + cy);
      const long sx = std::lround(dx * c - dy * s + cx);
      if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
      for (std::size_t ch = 0; ch < C; ++ch)
        out.at(ch, y, x) = image.at(ch, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
    }
  return out;
}

struct Rect {
  std::size_t y = 0, x = 0, h = 0, w = 0;
};

/// Zeroes the pixels of `r` in every channel of a (C, H, W) image.
inline Tensor occlude(const Tensor& image, const Rect& r) {
  require_rank(image.shape(), 3, "occlude image");
  const std::size_t H = image.dim(1), W = image.dim(2);
  require(r.y + r.h <= H && r.x + r.w <= W, Errc::out_of_range, "occlusion rectangle exceeds the frame");
  Tensor out = image;
  for (std::size_t ch = 0; ch < image.dim(0); ++ch)
    for (std::size_t y = r.y; y < r.y + r.h; ++y)
      for (std::size_t x = r.x; x < r.x + r.w; ++x) out.at(ch, y, x) = 0.0f;
  return out;
}

enum class TransformKind { rotate, occlude };

inline std::string to_string(TransformKind k) { return k == TransformKind::rotate ? "rotate" : "occlude"; }

struct TransformDescriptor {
  TransformKind kind = TransformKind::rotate;
  double angle = 0.0;
  Rect rect;

  Tensor apply(const Tensor& image) const { return kind == TransformKind::rotate ? rotate(image, angle) : occlude(image, rect); }

  nlohmann::json to_json() const {
    if (kind == TransformKind::rotate) return {{"kind", "rotate"}, {"angle", angle}};
    return {{"kind", "occlude"}, {"y", rect.y}, {"x", rect.x}, {"h", rect.h}, {"w", rect.w}};
  }
};

/// Rotation sweep: 10, 20, ..., 350 degrees.
inline std::vector<TransformDescriptor> rotation_sweep() {
  std::vector<TransformDescriptor> s;
  for (int a = 10; a <= 350; a += 10) s.push_back({TransformKind::rotate, static_cast<double>(a), {}});
  return s;
}

/// Occlusion sweep: square sizes 4, 6, ... up to half the smaller frame side,
/// two seeded positions per size.
inline std::vector<TransformDescriptor> occlusion_sweep(std::size_t H, std::size_t W, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TransformDescriptor> s;
  for (std::size_t size = 4; size <= std::min(H, W) / 2; size += 2)
    for (int rep = 0; rep < 2; ++rep) {
      const std::size_t y = rng.index(H - size + 1), x = rng.index(W - size + 1);
      s.push_back({TransformKind::occlude, 0.0, {y, x, size, size}});
    }
  return s;
}

struct TransformGroup {
  std::size_t original_index = 0;
  std::int64_t label = 0;
  Tensor original;
  Tensor invariant;
  TransformDescriptor invariant_transform;
  Tensor variant;
  std::size_t variant_prediction = 0;
  TransformDescriptor variant_transform;
  std::size_t target_index = 0;
  Tensor target;
};

struct TransformGroups {
  std::vector<TransformGroup> groups;
  std::size_t examined = 0;
  bool partial = false;
};

namespace detail {

inline std::optional<TransformGroup> try_transform(const Model& model, const TensorDataset& data,
                                                   const std::map<std::int64_t, std::vector<std::size_t>>& by_label,
                                                   std::size_t idx, TransformKind kind, std::uint64_t seed) {
  const Tensor& x = data.images[idx];
  const std::int64_t label = data.labels[idx];
  if (label < 0 || predict(model, x) != static_cast<std::size_t>(label)) return std::nullopt;
  const std::uint64_t item_seed = mix_seed(seed, idx);
  const auto sweep = kind == TransformKind::rotate ? rotation_sweep()
                                                   : occlusion_sweep(x.dim(1), x.dim(2), mix_seed(item_seed, 0));
  std::optional<std::pair<TransformDescriptor, Tensor>> inv;
  std::optional<std::tuple<TransformDescriptor, Tensor, std::size_t>> var;
  for (const auto& t : sweep) {
    if (inv && var) break;
    Tensor y = t.apply(x);
    const std::size_t pred = predict(model, y);
    if (static_cast<std::int64_t>(pred) == label) {
      if (!inv) inv.emplace(t, std::move(y));
    } else if (!var) {
      var.emplace(t, std::move(y), pred);
    }
  }
  if (!inv || !var) return std::nullopt;
  Rng rng(mix_seed(item_seed, 1));
  const std::size_t pred = std::get<2>(*var);
  const auto target = pick_target(by_label, static_cast<std::int64_t>(pred), idx, rng);
  if (!target) return std::nullopt;
  return TransformGroup{idx,
                        label,
                        x,
                        std::move(inv->second),
                        inv->first,
                        std::move(std::get<1>(*var)),
                        pred,
                        std::get<0>(*var),
                        *target,
                        data.images[*target]};
}

}  // namespace detail

/// Visits samples in seeded random order; keeps the first `count` correctly
/// classified originals for which the sweep yields both a prediction-keeping
/// and a prediction-changing version. Independent of the thread count.
inline TransformGroups build_transform_groups(const Model& model, const TensorDataset& data, TransformKind kind,
                                              std::size_t count, std::uint64_t seed, std::size_t threads = 1) {
  require(count >= 1, Errc::invalid_argument, "group count must be >= 1");
  require(data.images.size() == data.labels.size(), Errc::count_mismatch, "image and label counts differ");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  const auto by_label = index_by_label(data.labels);

  TransformGroups out;
  const std::size_t batch = std::max<std::size_t>(1, threads) * 4;
  for (std::size_t start = 0; start < order.size() && out.groups.size() < count; start += batch) {
    const std::size_t n = std::min(batch, order.size() - start);
    std::vector<std::optional<TransformGroup>> found(n);
    parallel_for(n, threads, [&](std::size_t i) {
      found[i] = detail::try_transform(model, data, by_label, order[start + i], kind, seed);
    });
    for (std::size_t i = 0; i < n && out.groups.size() < count; ++i) {
      ++out.examined;
      if (found[i]) out.groups.push_back(std::move(*found[i]));
    }
  }
  out.partial = out.groups.size() < count;
  return out;
}

// Image order within a group: original, invariant, variant, target.
inline const std::vector<std::pair<std::size_t, std::size_t>> kTransformPairs = {{0, 1}, {0, 2}, {1, 2},
                                                                                 {0, 3}, {1, 3}, {2, 3}};
inline const std::vector<std::string> kTransformColumns = {"orig_inv",    "orig_var",   "inv_var",
                                                           "orig_target", "inv_target", "var_target"};

}  // namespace dpw
