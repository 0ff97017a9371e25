#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dpw/ops.hpp"
#include "dpw/rng.hpp"

namespace dpw {

enum class LayerKind { conv, relu, maxpool, flatten, linear };

inline std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "unknown";
}

inline LayerKind parse_layer_kind(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "relu") return LayerKind::relu;
  if (s == "maxpool") return LayerKind::maxpool;
  if (s == "flatten") return LayerKind::flatten;
  if (s == "linear") return LayerKind::linear;
  throw Error(Errc::malformed_header, "unknown layer kind '" + s + "'");
}

struct ConvParams {
  std::size_t cout = 0, cin = 0, k = 3, pad = 1, stride = 1;
};

struct LinearParams {
  std::size_t out = 0, in = 0;
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  ConvParams conv;
  LinearParams linear;

  std::string weight_name() const { return name + ".weight"; }
  std::string bias_name() const { return name + ".bias"; }

  static LayerSpec make_conv(std::string name, std::size_t cin, std::size_t cout, std::size_t k = 3) {
    return {std::move(name), LayerKind::conv, {cout, cin, k, (k - 1) / 2, 1}, {}};
  }
  static LayerSpec make_linear(std::string name, std::size_t in, std::size_t out) {
    return {std::move(name), LayerKind::linear, {}, {out, in}};
  }
  static LayerSpec make(std::string name, LayerKind kind) { return {std::move(name), kind, {}, {}}; }
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  Shape input_shape;  // (C, H, W)
  std::size_t classes = 0;
  // Indices into `layers` of the conv and pool layers that carry pathways,
  // in network order. Filled by finalize().
  std::vector<std::size_t> pathway_layers;
  // Output shape of every layer. Filled by finalize().
  std::vector<Shape> output_shapes;

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return i;
    throw Error(Errc::invalid_argument, "no layer named '" + name + "'");
  }

  // Layer whose output is the feature map seen at pathway position `pos`:
  // the ReLU following a conv when there is one, else the layer itself.
  std::size_t feature_map_layer(std::size_t pos) const {
    const std::size_t li = pathway_layers.at(pos);
    if (layers[li].kind == LayerKind::conv && li + 1 < layers.size() && layers[li + 1].kind == LayerKind::relu)
      return li + 1;
    return li;
  }

  std::size_t pathway_position(std::size_t layer_index) const {
    auto it = std::find(pathway_layers.begin(), pathway_layers.end(), layer_index);
    require(it != pathway_layers.end(), Errc::invalid_argument,
            "layer '" + layers.at(layer_index).name + "' is not a pathway layer");
    return static_cast<std::size_t>(it - pathway_layers.begin());
  }

  std::size_t pathway_channels(std::size_t pos) const { return output_shapes.at(pathway_layers.at(pos))[0]; }

  std::size_t pathway_channel_total() const {
    std::size_t total = 0;
    for (std::size_t p = 0; p < pathway_layers.size(); ++p) total += pathway_channels(p);
    return total;
  }

  // Chains shapes from the input to the logits and derives the pathway-layer
  // list. Throws shape_chain on any inconsistency.
  void finalize() {
    require(input_shape.size() == 3 && shape_size(input_shape) > 0 &&
                std::all_of(input_shape.begin(), input_shape.end(), [](std::size_t e) { return e >= 1; }),
            Errc::shape_chain, "input shape must be (C,H,W) with positive extents");
    require(!layers.empty(), Errc::shape_chain, "model has no layers");
    std::set<std::string> names;
    output_shapes.clear();
    pathway_layers.clear();
    Shape cur = input_shape;
    bool flat = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      require(!l.name.empty() && names.insert(l.name).second, Errc::shape_chain,
              "layer names must be non-empty and unique: '" + l.name + "'");
      const std::string at = "layer '" + l.name + "': ";
      switch (l.kind) {
        case LayerKind::conv:
          require(!flat && cur.size() == 3, Errc::shape_chain, at + "conv after flatten");
          require(l.conv.k % 2 == 1 && l.conv.pad == (l.conv.k - 1) / 2 && l.conv.stride == 1, Errc::shape_chain,
                  at + "conv must use odd k, pad=(k-1)/2, stride 1");
          require(l.conv.cin == cur[0], Errc::shape_chain,
                  at + "expects " + std::to_string(l.conv.cin) + " channels, receives " + std::to_string(cur[0]));
          require(l.conv.cout >= 1, Errc::shape_chain, at + "cout must be >= 1");
          cur = {l.conv.cout, cur[1], cur[2]};
          pathway_layers.push_back(i);
          break;
        case LayerKind::relu:
          break;
        case LayerKind::maxpool:
          require(!flat && cur.size() == 3, Errc::shape_chain, at + "maxpool after flatten");
          cur = {cur[0], (cur[1] + 1) / 2, (cur[2] + 1) / 2};
          pathway_layers.push_back(i);
          break;
        case LayerKind::flatten:
          require(!flat, Errc::shape_chain, at + "repeated flatten");
          cur = {shape_size(cur)};
          flat = true;
          break;
        case LayerKind::linear:
          require(flat, Errc::shape_chain, at + "linear before flatten");
          require(l.linear.in == cur[0], Errc::shape_chain,
                  at + "expects " + std::to_string(l.linear.in) + " inputs, receives " + std::to_string(cur[0]));
          require(l.linear.out >= 1, Errc::shape_chain, at + "out must be >= 1");
          cur = {l.linear.out};
          break;
      }
      output_shapes.push_back(cur);
    }
    require(flat && cur.size() == 1 && cur[0] == classes, Errc::shape_chain,
            "final output " + shape_string(cur) + " does not match class count " + std::to_string(classes));
  }
};

using Weights = std::map<std::string, Tensor>;

struct Model {
  ModelSpec spec;
  Weights weights;

  const Tensor& weight(const LayerSpec& l) const { return tensor(l.weight_name()); }
  const Tensor& bias(const LayerSpec& l) const { return tensor(l.bias_name()); }

  const Tensor& tensor(const std::string& name) const {
    auto it = weights.find(name);
    require(it != weights.end(), Errc::missing_tensor, "missing tensor '" + name + "'");
    return it->second;
  }

  void validate() const {
    for (const LayerSpec& l : spec.layers) {
      if (l.kind == LayerKind::conv) {
        require_shape(weight(l).shape(), {l.conv.cout, l.conv.cin, l.conv.k, l.conv.k}, "tensor " + l.weight_name());
        require_shape(bias(l).shape(), {l.conv.cout}, "tensor " + l.bias_name());
      } else if (l.kind == LayerKind::linear) {
        require_shape(weight(l).shape(), {l.linear.out, l.linear.in}, "tensor " + l.weight_name());
        require_shape(bias(l).shape(), {l.linear.out}, "tensor " + l.bias_name());
      }
    }
  }
};

// ---- reference architectures ----------------------------------------------

/// VGG-16 adapted to small inputs: 13 convs in 5 blocks, each followed by a
/// 2x2 pool, then three fully connected layers.
inline ModelSpec vgg16_spec(Shape input_shape, std::size_t classes = 10) {
  ModelSpec m;
  m.input_shape = input_shape;
  m.classes = classes;
  const std::size_t widths[] = {64, 128, 256, 512, 512};
  const std::size_t depth[] = {2, 2, 3, 3, 3};
  std::size_t cin = input_shape.at(0), h = input_shape.at(1), w = input_shape.at(2);
  for (std::size_t b = 0; b < 5; ++b) {
    for (std::size_t j = 0; j < depth[b]; ++j) {
      const std::string id = std::to_string(b + 1) + "_" + std::to_string(j + 1);
      m.layers.push_back(LayerSpec::make_conv("conv" + id, cin, widths[b]));
      m.layers.push_back(LayerSpec::make("relu" + id, LayerKind::relu));
      cin = widths[b];
    }
    m.layers.push_back(LayerSpec::make("pool" + std::to_string(b + 1), LayerKind::maxpool));
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  m.layers.push_back(LayerSpec::make("flatten", LayerKind::flatten));
  m.layers.push_back(LayerSpec::make_linear("fc6", cin * h * w, 512));
  m.layers.push_back(LayerSpec::make("relu6", LayerKind::relu));
  m.layers.push_back(LayerSpec::make_linear("fc7", 512, 512));
  m.layers.push_back(LayerSpec::make("relu7", LayerKind::relu));
  m.layers.push_back(LayerSpec::make_linear("fc8", 512, classes));
  m.finalize();
  return m;
}

/// Four-conv network used as a fast fixture: conv1_1, conv1_2, pool1,
/// conv2_1, conv2_2, pool2, then one linear classifier.
inline ModelSpec tiny_spec(Shape input_shape, std::size_t classes = 10, std::size_t width = 8) {
  ModelSpec m;
  m.input_shape = input_shape;
  m.classes = classes;
  const std::size_t c = input_shape.at(0);
  m.layers = {
      LayerSpec::make_conv("conv1_1", c, width),         LayerSpec::make("relu1_1", LayerKind::relu),
      LayerSpec::make_conv("conv1_2", width, width),     LayerSpec::make("relu1_2", LayerKind::relu),
      LayerSpec::make("pool1", LayerKind::maxpool),      LayerSpec::make_conv("conv2_1", width, 2 * width),
      LayerSpec::make("relu2_1", LayerKind::relu),       LayerSpec::make_conv("conv2_2", 2 * width, 2 * width),
      LayerSpec::make("relu2_2", LayerKind::relu),       LayerSpec::make("pool2", LayerKind::maxpool),
      LayerSpec::make("flatten", LayerKind::flatten),
  };
  const std::size_t h = (input_shape[1] + 1) / 2, w = (input_shape[2] + 1) / 2;
  m.layers.push_back(LayerSpec::make_linear("fc", 2 * width * ((h + 1) / 2) * ((w + 1) / 2), classes));
  m.finalize();
  return m;
}

/// He-normal conv/linear weights with small random biases, seeded.
inline Weights init_weights(const ModelSpec& spec, std::uint64_t seed, double bias_scale = 0.05) {
  Weights w;
  Rng rng(seed);
  for (const LayerSpec& l : spec.layers) {
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
    const bool conv = l.kind == LayerKind::conv;
    const Shape ws = conv ? Shape{l.conv.cout, l.conv.cin, l.conv.k, l.conv.k} : Shape{l.linear.out, l.linear.in};
    const std::size_t fan_in = conv ? l.conv.cin * l.conv.k * l.conv.k : l.linear.in;
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor wt(ws);
    for (float& v : wt.data()) v = static_cast<float>(std * rng.normal());
    Tensor b({ws[0]});
    for (float& v : b.data()) v = static_cast<float>(bias_scale * rng.normal());
    w.emplace(l.weight_name(), std::move(wt));
    w.emplace(l.bias_name(), std::move(b));
  }
  return w;
}

// ---- forward tracing --------------------------------------------------------

struct LayerRecord {
  Tensor output;
  Tensor relu_mask;    // relu layers only
  PoolArgmax argmax;   // maxpool layers only
  bool has_argmax = false;
};

struct ForwardTrace {
  Tensor input;
  std::vector<LayerRecord> layers;
  Tensor logits;
  std::size_t predicted = 0;
  // Activation-L1 score of every channel, per pathway layer.
  std::vector<std::vector<double>> importance;

  const Tensor& input_of(std::size_t layer) const { return layer == 0 ? input : layers.at(layer - 1).output; }
};

inline std::size_t argmax_index(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline LayerRecord apply_layer(const Model& model, const LayerSpec& l, const Tensor& x) {
  LayerRecord r;
  switch (l.kind) {
    case LayerKind::conv:
      r.output = conv2d_forward(x, model.weight(l), model.bias(l), l.conv.pad, l.conv.stride);
      break;
    case LayerKind::relu: {
      auto rr = relu_forward(x);
      r.output = std::move(rr.output);
      r.relu_mask = std::move(rr.mask);
      break;
    }
    case LayerKind::maxpool: {
      auto pr = maxpool2x2_forward(x);
      r.output = std::move(pr.output);
      r.argmax = std::move(pr.argmax);
      r.has_argmax = true;
      break;
    }
    case LayerKind::flatten:
      r.output = x.reshaped({x.size()});
      break;
    case LayerKind::linear:
      r.output = linear_forward(x, model.weight(l), model.bias(l));
      break;
  }
  return r;
}

inline std::vector<double> activation_l1(const Tensor& fmap) {
  const std::size_t c = fmap.dim(0), plane = fmap.size() / c;
  std::vector<double> s(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) s[ch] += std::fabs(fmap[ch * plane + i]);
  return s;
}

inline ForwardTrace forward_trace(const Model& model, const Tensor& image) {
  require_shape(image.shape(), model.spec.input_shape, "forward_trace image");
  ForwardTrace t;
  t.input = image;
  t.layers.reserve(model.spec.layers.size());
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i)
    t.layers.push_back(apply_layer(model, model.spec.layers[i], t.input_of(i)));
  t.logits = t.layers.back().output;
  t.predicted = argmax_index(t.logits.data());
  for (std::size_t p = 0; p < model.spec.pathway_layers.size(); ++p)
    t.importance.push_back(activation_l1(t.layers[model.spec.feature_map_layer(p)].output));
  return t;
}

/// Runs layers [first, end) starting from activation x; returns the logits.
inline Tensor run_from(const Model& model, std::size_t first, Tensor x) {
  for (std::size_t i = first; i < model.spec.layers.size(); ++i)
    x = apply_layer(model, model.spec.layers[i], x).output;
  return x;
}

inline std::size_t predict(const Model& model, const Tensor& image) {
  return argmax_index(run_from(model, 0, image).data());
}

// ---- input gradients ----------------------------------------------------------

/// Gradient with respect to the input of layer `index`, given the gradient
/// with respect to its output.
inline Tensor layer_input_gradient(const Model& model, const ForwardTrace& trace, std::size_t index,
                                   const Tensor& upstream) {
  const LayerSpec& l = model.spec.layers.at(index);
  const LayerRecord& rec = trace.layers.at(index);
  const Shape& in_shape = trace.input_of(index).shape();
  switch (l.kind) {
    case LayerKind::conv:
      return conv2d_backward_input(upstream, model.weight(l), in_shape, l.conv.pad, l.conv.stride);
    case LayerKind::relu:
      require(!rec.relu_mask.empty(), Errc::missing_record, "layer '" + l.name + "' has no relu mask");
      return relu_backward(upstream, rec.relu_mask);
    case LayerKind::maxpool:
      require(rec.has_argmax, Errc::missing_record, "layer '" + l.name + "' has no pool argmax");
      return maxpool2x2_backward(upstream, rec.argmax);
    case LayerKind::flatten:
      return upstream.reshaped(in_shape);
    case LayerKind::linear:
      return linear_backward_input(upstream, model.weight(l));
  }
  throw Error(Errc::invalid_argument, "unknown layer kind");
}

/// Propagates `grad_logits` back to the input of layer `stop` (stop = 0 gives
/// the gradient with respect to the image).
inline Tensor backward_to(const Model& model, const ForwardTrace& trace, std::size_t stop, Tensor grad_logits) {
  require_shape(grad_logits.shape(), trace.logits.shape(), "backward upstream");
  Tensor g = std::move(grad_logits);
  for (std::size_t i = model.spec.layers.size(); i-- > stop;) g = layer_input_gradient(model, trace, i, g);
  return g;
}

inline Tensor logit_onehot(std::size_t classes, std::size_t cls) {
  require(cls < classes, Errc::out_of_range, "class index " + std::to_string(cls) + " out of range");
  Tensor t({classes});
  t[cls] = 1.0f;
  return t;
}

// ---- channel importance ---------------------------------------------------

enum class ImportanceMethod { activation_l1, grad_x_activation };

/// Per-channel importance at pathway position `pos`.
inline std::vector<double> channel_scores(const Model& model, const ForwardTrace& trace, std::size_t pos,
                                          ImportanceMethod method, std::optional<std::size_t> cls = {}) {
  require(pos < model.spec.pathway_layers.size(), Errc::invalid_argument,
          "pathway position " + std::to_string(pos) + " out of range");
  if (method == ImportanceMethod::activation_l1) return trace.importance.at(pos);
  require(cls.has_value(), Errc::invalid_argument, "grad-x-activation importance needs a class index");
  const std::size_t fl = model.spec.feature_map_layer(pos);
  const Tensor grad = backward_to(model, trace, fl + 1, logit_onehot(model.spec.classes, *cls));
  const Tensor& act = trace.layers[fl].output;
  const std::size_t c = act.dim(0), plane = act.size() / c;
  std::vector<double> s(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i)
      s[ch] += static_cast<double>(grad[ch * plane + i]) * act[ch * plane + i];
    s[ch] = std::max(s[ch], 0.0);
  }
  return s;
}

/// Channel indices sorted by descending score; ties keep the lower index first.
inline std::vector<std::size_t> rank_descending(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

inline std::vector<std::size_t> channel_importance(const Model& model, const ForwardTrace& trace, std::size_t pos,
                                                   ImportanceMethod method = ImportanceMethod::activation_l1,
                                                   std::optional<std::size_t> cls = {}) {
  return rank_descending(channel_scores(model, trace, pos, method, cls));
}

}  // namespace dpw
