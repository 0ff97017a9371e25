#pragma once

// FGSM adversarial examples, adversarial (original, adversarial, target)
// groups, and Grad-CAM.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "dpw/analysis.hpp"
#include "dpw/data.hpp"
#include "dpw/model.hpp"
#include "dpw/parallel.hpp"
#include "dpw/pathway.hpp"
#include "dpw/rng.hpp"

namespace dpw {

struct AttackConfig {
  double epsilon = 0.03;  // preprocessed-pixel units
  float lo = 0.0f, hi = 1.0f;
  std::size_t escalations = 4;  // times epsilon is doubled after a failed flip

  void validate() const {
    require(epsilon >= 0.0 && std::isfinite(epsilon), Errc::invalid_argument, "epsilon must be finite and >= 0");
    require(lo < hi, Errc::invalid_argument, "clip range needs lo < hi");
  }
};

/// Gradient of loss_scale * cross-entropy(softmax(logits), label) w.r.t. the image.
inline Tensor input_gradient(const Model& model, const ForwardTrace& trace, std::size_t label, double loss_scale = 1.0) {
  Tensor g = softmax_cross_entropy(trace.logits, label).grad_logits;
  for (float& v : g.data()) v = static_cast<float>(v * loss_scale);
  return backward_to(model, trace, 0, std::move(g));
}

inline Tensor input_gradient(const Model& model, const Tensor& image, std::size_t label, double loss_scale = 1.0) {
  return input_gradient(model, forward_trace(model, image), label, loss_scale);
}

/// clip(image + eps * sign(grad), lo, hi) with sign(0) = 0.
inline Tensor fgsm_step(const Tensor& image, const Tensor& grad, double epsilon, float lo, float hi) {
  require_shape(grad.shape(), image.shape(), "fgsm gradient");
  Tensor adv(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double s = grad[i] > 0.0f ? 1.0 : (grad[i] < 0.0f ? -1.0 : 0.0);
    adv[i] = std::clamp(static_cast<float>(image[i] + epsilon * s), lo, hi);
  }
  return adv;
}

inline Tensor fgsm(const Model& model, const Tensor& image, std::size_t label, const AttackConfig& config = {}) {
  config.validate();
  return fgsm_step(image, input_gradient(model, image, label), config.epsilon, config.lo, config.hi);
}

// ---- adversarial groups -------------------------------------------------------------

struct AdversarialGroup {
  std::size_t original_index = 0;
  std::int64_t label = 0;
  Tensor original;
  Tensor adversarial;
  std::size_t adversarial_prediction = 0;
  double epsilon = 0.0;
  std::size_t target_index = 0;
  Tensor target;
};

struct AdversarialGroups {
  std::vector<AdversarialGroup> groups;
  std::size_t examined = 0;
  bool partial = false;  // dataset exhausted before `count` groups were found
};

/// Indices of the samples carrying each label.
inline std::map<std::int64_t, std::vector<std::size_t>> index_by_label(const std::vector<std::int64_t>& labels) {
  std::map<std::int64_t, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < labels.size(); ++i) by[labels[i]].push_back(i);
  return by;
}

/// Uniform seeded pick among samples labeled `cls`, excluding `exclude`.
inline std::optional<std::size_t> pick_target(const std::map<std::int64_t, std::vector<std::size_t>>& by_label,
                                              std::int64_t cls, std::size_t exclude, Rng& rng) {
  auto it = by_label.find(cls);
  if (it == by_label.end()) return std::nullopt;
  std::vector<std::size_t> pool;
  for (std::size_t i : it->second)
    if (i != exclude) pool.push_back(i);
  if (pool.empty()) return std::nullopt;
  return pool[rng.index(pool.size())];
}

namespace detail {

inline std::optional<AdversarialGroup> try_adversarial(const Model& model, const TensorDataset& data,
                                                       const std::map<std::int64_t, std::vector<std::size_t>>& by_label,
                                                       std::size_t idx, const AttackConfig& config,
                                                       std::uint64_t seed) {
  const Tensor& x = data.images[idx];
  const std::int64_t label = data.labels[idx];
  if (label < 0 || static_cast<std::size_t>(label) >= model.spec.classes) return std::nullopt;
  const ForwardTrace trace = forward_trace(model, x);
  if (static_cast<std::int64_t>(trace.predicted) != label) return std::nullopt;
  const Tensor grad = input_gradient(model, trace, static_cast<std::size_t>(label));
  double eps = config.epsilon;
  for (std::size_t attempt = 0; attempt <= config.escalations; ++attempt, eps *= 2.0) {
    Tensor adv = fgsm_step(x, grad, eps, config.lo, config.hi);
    const std::size_t pred = predict(model, adv);
    if (static_cast<std::int64_t>(pred) == label) continue;
    Rng rng(mix_seed(seed, idx));
    const auto target = pick_target(by_label, static_cast<std::int64_t>(pred), idx, rng);
    if (!target) return std::nullopt;
    return AdversarialGroup{idx, label, x, std::move(adv), pred, eps, *target, data.images[*target]};
  }
  return std::nullopt;
}

}  // namespace detail

/// Visits samples in a seeded random order and keeps the first `count` that
/// are correctly classified and flipped by FGSM. Candidates are evaluated in
/// parallel batches but accepted in visiting order, so the result does not
/// depend on the thread count.
inline AdversarialGroups build_adversarial_groups(const Model& model, const TensorDataset& data, std::size_t count,
                                                  const AttackConfig& config, std::uint64_t seed,
                                                  std::size_t threads = 1) {
  config.validate();
  require(count >= 1, Errc::invalid_argument, "group count must be >= 1");
  require(data.images.size() == data.labels.size(), Errc::count_mismatch, "image and label counts differ");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  const auto by_label = index_by_label(data.labels);

  AdversarialGroups out;
  const std::size_t batch = std::max<std::size_t>(1, threads) * 4;
  for (std::size_t start = 0; start < order.size() && out.groups.size() < count; start += batch) {
    const std::size_t n = std::min(batch, order.size() - start);
    std::vector<std::optional<AdversarialGroup>> found(n);
    parallel_for(n, threads, [&](std::size_t i) {
      found[i] = detail::try_adversarial(model, data, by_label, order[start + i], config, seed);
    });
    for (std::size_t i = 0; i < n && out.groups.size() < count; ++i) {
      ++out.examined;
      if (found[i]) out.groups.push_back(std::move(*found[i]));
    }
  }
  out.partial = out.groups.size() < count;
  return out;
}

// ---- Grad-CAM -----------------------------------------------------------------------

struct GradCam {
  std::string layer;
  std::vector<double> weights;  // alpha_c
  Tensor64 cam;                 // (h_l, w_l) after the ReLU
  Tensor heatmap;               // (H, W) bilinear, min-max normalized
};

/// Bilinear resize with half-pixel centers and edge clamping.
inline Tensor64 resize_bilinear(const Tensor64& src, std::size_t oh, std::size_t ow) {
  require_rank(src.shape(), 2, "resize_bilinear source");
  const std::size_t h = src.dim(0), w = src.dim(1);
  Tensor64 out({oh, ow});
  auto axis = [](std::size_t o, std::size_t in, std::size_t out_n) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(s);
    return std::tuple{i0, std::min(i0 + 1, in - 1), s - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < oh; ++y) {
    const auto [y0, y1, fy] = axis(y, h, oh);
    for (std::size_t x = 0; x < ow; ++x) {
      const auto [x0, x1, fx] = axis(x, w, ow);
      const double top = src.at(y0, x0) * (1 - fx) + src.at(y0, x1) * fx;
      const double bot = src.at(y1, x0) * (1 - fx) + src.at(y1, x1) * fx;
      out.at(y, x) = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

/// conv3_3 when the model has it, else its last conv layer.
inline std::string default_cam_layer(const ModelSpec& spec) {
  for (const auto& l : spec.layers)
    if (l.name == "conv3_3" && l.kind == LayerKind::conv) return l.name;
  for (std::size_t i = spec.layers.size(); i-- > 0;)
    if (spec.layers[i].kind == LayerKind::conv) return spec.layers[i].name;
  throw Error(Errc::invalid_argument, "model has no conv layer");
}

/// Grad-CAM of logit `cls` at conv layer `layer`, using the layer's rectified
/// feature map (its following ReLU, when present) as the activation A.
inline GradCam grad_cam(const Model& model, const ForwardTrace& trace, std::size_t cls, const std::string& layer) {
  const ModelSpec& spec = model.spec;
  const std::size_t li = spec.find(layer);
  require(spec.layers[li].kind == LayerKind::conv, Errc::invalid_argument, "Grad-CAM layer '" + layer + "' is not a conv");
  const std::size_t fl = spec.feature_map_layer(spec.pathway_position(li));
  const Tensor& act = trace.layers.at(fl).output;
  const Tensor grad = backward_to(model, trace, fl + 1, logit_onehot(spec.classes, cls));
  const std::size_t c = act.dim(0), h = act.dim(1), w = act.dim(2), plane = h * w;

  GradCam g{layer, std::vector<double>(c, 0.0), Tensor64({h, w}), {}};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += grad[ch * plane + i];
    g.weights[ch] = s / static_cast<double>(plane);
  }
  for (std::size_t i = 0; i < plane; ++i) {
    double s = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) s += g.weights[ch] * act[ch * plane + i];
    g.cam[i] = std::max(s, 0.0);
  }
  const Shape& in = spec.input_shape;
  g.heatmap = normalize_minmax(resize_bilinear(g.cam, in[1], in[2]));
  return g;
}

inline GradCam grad_cam(const Model& model, const Tensor& image, std::optional<std::size_t> cls = {},
                        std::optional<std::string> layer = {}) {
  const ForwardTrace trace = forward_trace(model, image);
  return grad_cam(model, trace, cls.value_or(trace.predicted), layer.value_or(default_cam_layer(model.spec)));
}

// ---- portion-hot distances for image groups -----------------------------------------

inline PortionHotVector portion_hot_of(const Model& model, const DiffusionKernelSet& kernels, const Tensor& image,
                                       const ExtractOptions& options, std::size_t k) {
  return portion_hot(extract_pathways(model, kernels, forward_trace(model, image), options), k);
}

/// Pairwise distances in the order of `pairs`, for each image set.
inline std::vector<std::vector<double>> pairwise_distances(const std::vector<std::vector<PortionHotVector>>& sets,
                                                           const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  std::vector<std::vector<double>> out;
  for (const auto& s : sets) {
    std::vector<double> row;
    for (auto [a, b] : pairs) row.push_back(l2_distance(s.at(a), s.at(b)));
    out.push_back(std::move(row));
  }
  return out;
}

inline const std::vector<std::pair<std::size_t, std::size_t>> kAdversarialPairs = {{0, 1}, {0, 2}, {1, 2}};
inline const std::vector<std::string> kAdversarialColumns = {"orig_adv", "orig_target", "adv_target"};

}  // namespace dpw
