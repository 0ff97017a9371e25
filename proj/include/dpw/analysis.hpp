#pragma once

// Everything computed from pathway aggregates: parts, saliency maps,
// portion-hot vectors and the statistics run on them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "dpw/pathway.hpp"
#include "dpw/stats.hpp"

namespace dpw {

// ---- parts ------------------------------------------------------------------------

struct PartAssignment {
  std::size_t pathway_index = 0;
  std::size_t k = 1;
  std::size_t height = 0, width = 0, channels = 0;
  // Per pixel (row-major), up to k channel indices by descending aggregate.
  std::vector<std::vector<std::uint32_t>> pixel_parts;
  // Per channel, number of pixels whose list contains it.
  std::vector<std::size_t> part_pixels;

  double area_ratio(std::size_t channel) const {
    return static_cast<double>(part_pixels.at(channel)) / static_cast<double>(height * width);
  }

  /// Pixel membership of one part as an (H, W) 0/1 map.
  Tensor part_mask(std::size_t channel) const {
    require(channel < channels, Errc::out_of_range, "part channel out of range");
    Tensor m({height, width});
    for (std::size_t i = 0; i < pixel_parts.size(); ++i)
      for (std::uint32_t c : pixel_parts[i])
        if (c == channel) m[i] = 1.0f;
    return m;
  }

  /// Channels with a non-empty part, largest area first (ties: lower index).
  std::vector<std::size_t> parts_by_area() const {
    std::vector<double> area(part_pixels.begin(), part_pixels.end());
    auto order = rank_descending(area);
    order.erase(std::remove_if(order.begin(), order.end(), [&](std::size_t c) { return part_pixels[c] == 0; }),
                order.end());
    return order;
  }
};

/// Top-k channels of every pixel's aggregate row. Only strictly positive
/// entries qualify, so a pixel whose row is all <= 0 belongs to no part.
inline PartAssignment parts_topk(const LayerPathwayAggregate& agg, std::size_t k) {
  require_rank(agg.values.shape(), 3, "parts_topk aggregate");
  const std::size_t h = agg.values.dim(0), w = agg.values.dim(1), c = agg.values.dim(2);
  require(k >= 1 && k <= c, Errc::out_of_range,
          "top-k " + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  PartAssignment pa{agg.pathway_index, k, h, w, c, std::vector<std::vector<std::uint32_t>>(h * w),
                    std::vector<std::size_t>(c, 0)};
  std::vector<std::uint32_t> idx(c);
  for (std::size_t p = 0; p < h * w; ++p) {
    const double* row = agg.values.data().data() + p * c;
    idx.clear();
    for (std::uint32_t ch = 0; ch < c; ++ch)
      if (row[ch] > 0.0) idx.push_back(ch);
    const std::size_t take = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    pa.pixel_parts[p].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    for (std::uint32_t ch : pa.pixel_parts[p]) ++pa.part_pixels[ch];
  }
  return pa;
}

// ---- saliency ---------------------------------------------------------------------

struct SaliencyMap {
  Tensor64 heat;        // (H, W) max over channels of the aggregate
  Tensor normalized;    // min-max scaled to [0, 1]; all zero when heat is constant
};

inline Tensor normalize_minmax(const Tensor64& t) {
  Tensor out(t.shape());
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  const double range = *hi - *lo;
  if (!(range > 0.0) || !std::isfinite(range)) return out;
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>((t[i] - *lo) / range);
  return out;
}

inline SaliencyMap saliency_map(const LayerPathwayAggregate& agg) {
  require_rank(agg.values.shape(), 3, "saliency aggregate");
  const std::size_t h = agg.values.dim(0), w = agg.values.dim(1), c = agg.values.dim(2);
  SaliencyMap s{Tensor64({h, w}), {}};
  for (std::size_t p = 0; p < h * w; ++p) {
    const double* row = agg.values.data().data() + p * c;
    s.heat[p] = *std::max_element(row, row + c);
  }
  s.normalized = normalize_minmax(s.heat);
  return s;
}

/// Saliency at pathway position `pos`; defaults to the last pathway layer.
inline SaliencyMap saliency_map(const PathwayResult& result, std::optional<std::size_t> pos = {}) {
  const std::size_t p = pos.value_or(result.layers.size() - 1);
  require(p < result.layers.size(), Errc::out_of_range, "saliency layer " + std::to_string(p) + " out of range");
  return saliency_map(result.layers[p]);
}

// ---- portion-hot representation ------------------------------------------------

struct PortionHotVector {
  std::vector<double> values;  // pathway layer major, then channel
  std::size_t k = 0;
};

inline PortionHotVector portion_hot(const PathwayResult& result, std::size_t k) {
  require(!result.layers.empty(), Errc::invalid_argument, "portion_hot needs pathway aggregates");
  PortionHotVector v{{}, k};
  for (std::size_t p = 0; p < result.layers.size(); ++p) {
    require(result.layers[p].pathway_index == p, Errc::invalid_argument,
            "pathway aggregates missing or out of order at L" + std::to_string(p));
    const PartAssignment pa = parts_topk(result.layers[p], std::min(k, result.layers[p].values.dim(2)));
    for (std::size_t c = 0; c < pa.channels; ++c) v.values.push_back(pa.area_ratio(c));
  }
  return v;
}

inline double l2_distance(const PortionHotVector& a, const PortionHotVector& b) {
  require(a.values.size() == b.values.size(), Errc::shape_mismatch,
          "portion-hot lengths differ: " + std::to_string(a.values.size()) + " vs " + std::to_string(b.values.size()));
  require(a.k == b.k, Errc::invalid_argument, "portion-hot vectors built with different k");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

struct CategoryCenters {
  std::map<std::int64_t, std::vector<double>> per_label;
  std::map<std::int64_t, std::size_t> counts;
  std::vector<double> global;
};

/// Streaming (incremental) means per label and over all vectors.
inline CategoryCenters category_centers(const std::vector<PortionHotVector>& vectors,
                                        const std::vector<std::int64_t>& labels) {
  require(!vectors.empty(), Errc::invalid_argument, "category_centers needs at least one vector");
  require(vectors.size() == labels.size(), Errc::count_mismatch, "vector and label counts differ");
  const std::size_t n = vectors.front().values.size();
  CategoryCenters cc;
  cc.global.assign(n, 0.0);
  std::size_t seen = 0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto& v = vectors[i].values;
    require(v.size() == n, Errc::shape_mismatch, "portion-hot vectors differ in length");
    auto& center = cc.per_label[labels[i]];
    auto& count = cc.counts[labels[i]];
    if (center.empty()) center.assign(n, 0.0);
    ++count;
    ++seen;
    for (std::size_t j = 0; j < n; ++j) {
      center[j] += (v[j] - center[j]) / static_cast<double>(count);
      cc.global[j] += (v[j] - cc.global[j]) / static_cast<double>(seen);
    }
  }
  return cc;
}

/// Each vector's L2 distance to the mean of all vectors.
inline std::vector<double> scalarize(const std::vector<PortionHotVector>& vectors) {
  require(!vectors.empty(), Errc::invalid_argument, "scalarize needs at least one vector");
  std::vector<std::int64_t> labels(vectors.size(), 0);
  const PortionHotVector center{category_centers(vectors, labels).global, vectors.front().k};
  std::vector<double> out;
  out.reserve(vectors.size());
  for (const auto& v : vectors) out.push_back(l2_distance(v, center));
  return out;
}

// ---- ranking overlap ---------------------------------------------------------------

/// Channel totals of an aggregate over all pixels.
inline std::vector<double> cross_section_totals(const LayerPathwayAggregate& agg) {
  const std::size_t c = agg.values.dim(2), pixels = agg.values.dim(0) * agg.values.dim(1);
  std::vector<double> s(c, 0.0);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) s[ch] += agg.values[p * c + ch];
  return s;
}

inline std::size_t ranking_overlap(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                                   std::size_t n, bool smallest = false) {
  require(n <= a.size() && n <= b.size(), Errc::out_of_range, "overlap n exceeds channel count");
  auto pick = [&](const std::vector<std::size_t>& r) {
    std::vector<std::size_t> s = smallest ? std::vector<std::size_t>(r.end() - static_cast<std::ptrdiff_t>(n), r.end())
                                          : std::vector<std::size_t>(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(s.begin(), s.end());
    return s;
  };
  const auto sa = pick(a), sb = pick(b);
  std::vector<std::size_t> common;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
  return common.size();
}

/// Overlap between the n largest (or smallest) pathway cross-sections and the
/// n most (or least) important feature maps at pathway position `pos`.
inline std::size_t ranking_overlap(const PathwayResult& result, const Model& model, const ForwardTrace& trace,
                                   std::size_t pos, std::size_t n = 10, bool smallest = false,
                                   ImportanceMethod method = ImportanceMethod::activation_l1) {
  require(pos < result.layers.size(), Errc::out_of_range, "overlap layer out of range");
  const auto by_pathway = rank_descending(cross_section_totals(result.layers[pos]));
  const auto by_importance = channel_importance(model, trace, pos, method, trace.predicted);
  return ranking_overlap(by_pathway, by_importance, n, smallest);
}

// ---- main pathway ------------------------------------------------------------------

struct MainPathwayStep {
  std::size_t pathway_index = 0;
  std::int64_t channel = -1;  // -1 when the layer has no part
  double area_ratio = 0.0;
  std::size_t part_count = 0;
};

/// Largest part of every pathway layer.
inline std::vector<MainPathwayStep> main_pathway(const PathwayResult& result, std::size_t k) {
  std::vector<MainPathwayStep> steps;
  for (const auto& agg : result.layers) {
    const PartAssignment pa = parts_topk(agg, std::min(k, agg.values.dim(2)));
    const auto order = pa.parts_by_area();
    MainPathwayStep s{agg.pathway_index, -1, 0.0, order.size()};
    if (!order.empty()) {
      s.channel = static_cast<std::int64_t>(order.front());
      s.area_ratio = pa.area_ratio(order.front());
    }
    steps.push_back(s);
  }
  return steps;
}

}  // namespace dpw
