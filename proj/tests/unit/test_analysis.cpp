#include <gtest/gtest.h>

#include "dpw/analysis.hpp"
#include "oracles.hpp"

using namespace dpw;

namespace {

LayerPathwayAggregate agg(std::size_t h, std::size_t w, std::size_t c, std::vector<double> v, std::size_t pos = 0) {
  return {pos, 0, "L", Tensor64({h, w, c}, std::move(v))};
}

LayerPathwayAggregate random_agg(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed, std::size_t pos = 0) {
  Rng rng(seed);
  std::vector<double> v(h * w * c);
  for (double& x : v) x = rng.uniform(-1, 2);
  return agg(h, w, c, v, pos);
}

}  // namespace

TEST(Parts, StrictWinnerTakesEveryPixel) {
  std::vector<double> v;
  for (int p = 0; p < 6; ++p) v.insert(v.end(), {1.0, 0.5, 3.0, 2.0});
  const auto pa = parts_topk(agg(2, 3, 4, v), 1);
  EXPECT_DOUBLE_EQ(pa.area_ratio(2), 1.0);
  for (std::size_t c : {0u, 1u, 3u}) EXPECT_EQ(pa.area_ratio(c), 0.0);
}

TEST(Parts, ZeroAggregateUnassigned) {
  const auto pa = parts_topk(agg(2, 2, 3, std::vector<double>(12, 0.0)), 2);
  for (const auto& l : pa.pixel_parts) EXPECT_TRUE(l.empty());
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(pa.area_ratio(c), 0.0);
}

TEST(Parts, TiesGoToLowerChannel) {
  const auto pa = parts_topk(agg(1, 1, 4, {2, 5, 5, 5}), 2);
  EXPECT_EQ(pa.pixel_parts[0], (std::vector<std::uint32_t>{1, 2}));
}

TEST(Parts, KOutOfRange) {
  const auto a = random_agg(2, 2, 3, 1);
  EXPECT_THROW(parts_topk(a, 0), Error);
  EXPECT_THROW(parts_topk(a, 4), Error);
}

TEST(Parts, InvariantsOnRandomAggregates) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_agg(5, 4, 6, seed);
    for (std::size_t k = 1; k <= 6; ++k) {
      const auto pa = parts_topk(a, k);
      std::size_t listed = 0;
      for (std::size_t p = 0; p < 20; ++p) {
        const auto& l = pa.pixel_parts[p];
        listed += l.size();
        EXPECT_LE(l.size(), k);
        for (std::size_t i = 0; i + 1 < l.size(); ++i) {
          const double x = a.values[p * 6 + l[i]], y = a.values[p * 6 + l[i + 1]];
          EXPECT_TRUE(x > y || (x == y && l[i] < l[i + 1]));
        }
        for (auto c : l) EXPECT_GT(a.values[p * 6 + c], 0.0);
      }
      std::size_t counted = 0;
      for (auto n : pa.part_pixels) counted += n;
      EXPECT_EQ(counted, listed);
      if (k == 1) {
        // Disjoint parts covering exactly the pixels with a positive entry.
        std::size_t positive_rows = 0;
        for (std::size_t p = 0; p < 20; ++p) {
          bool any = false;
          for (std::size_t c = 0; c < 6; ++c) any = any || a.values[p * 6 + c] > 0;
          positive_rows += any;
        }
        EXPECT_EQ(counted, positive_rows);
      }
    }
  }
}

TEST(Saliency, MaxOverChannels) {
  const auto s = saliency_map(agg(1, 2, 3, {3, 7, 5, -1, -4, -2}));
  EXPECT_EQ(s.heat[0], 7.0);
  EXPECT_EQ(s.heat[1], -1.0);
  EXPECT_FLOAT_EQ(s.normalized[0], 1.0f);
  EXPECT_FLOAT_EQ(s.normalized[1], 0.0f);
  const auto single = saliency_map(agg(1, 3, 1, {2, 4, 6}));
  EXPECT_EQ(single.heat.values(), (std::vector<double>{2, 4, 6}));
}

TEST(Saliency, EqualsWinningPartValueAndIsPermutationInvariant) {
  const auto a = random_agg(4, 4, 5, 3);
  const auto s = saliency_map(a);
  const auto pa = parts_topk(a, 1);
  for (std::size_t p = 0; p < 16; ++p) {
    if (!pa.pixel_parts[p].empty()) {
      EXPECT_EQ(s.heat[p], a.values[p * 5 + pa.pixel_parts[p][0]]);
    }
  }
  auto b = a;
  for (std::size_t p = 0; p < 16; ++p) std::reverse(b.values.data().begin() + p * 5, b.values.data().begin() + p * 5 + 5);
  EXPECT_EQ(saliency_map(b).heat, s.heat);
}

TEST(PortionHot, LengthRangeAndPartition) {
  PathwayResult r;
  r.layers = {random_agg(4, 4, 3, 1, 0), random_agg(4, 4, 5, 2, 1)};
  for (std::size_t k : {1u, 3u, 9u}) {
    const auto v = portion_hot(r, k);
    ASSERT_EQ(v.values.size(), 8u);
    for (double x : v.values) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
    if (k == 1) {
      double s0 = 0, s1 = 0;
      for (std::size_t i = 0; i < 3; ++i) s0 += v.values[i];
      for (std::size_t i = 3; i < 8; ++i) s1 += v.values[i];
      EXPECT_LE(s0, 1.0 + 1e-12);
      EXPECT_LE(s1, 1.0 + 1e-12);
    }
  }
  PathwayResult zero;
  zero.layers = {agg(2, 2, 2, std::vector<double>(8, 0.0))};
  for (double x : portion_hot(zero, 3).values) EXPECT_EQ(x, 0.0);
  PathwayResult gap;
  gap.layers = {random_agg(2, 2, 2, 1, 1)};
  EXPECT_THROW(portion_hot(gap, 1), Error);
}

TEST(Distance, Basics) {
  PortionHotVector a{{0, 3, 4}, 3}, z{{0, 0, 0}, 3};
  EXPECT_DOUBLE_EQ(l2_distance(a, z), 5.0);
  EXPECT_EQ(l2_distance(a, a), 0.0);
  EXPECT_THROW(l2_distance(a, PortionHotVector{{0, 0}, 3}), Error);
  EXPECT_THROW(l2_distance(a, PortionHotVector{{0, 0, 0}, 1}), Error);
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    PortionHotVector x{{}, 3}, y{{}, 3}, w{{}, 3};
    for (int i = 0; i < 10; ++i) {
      x.values.push_back(rng.uniform());
      y.values.push_back(rng.uniform());
      w.values.push_back(rng.uniform());
    }
    EXPECT_EQ(l2_distance(x, y), l2_distance(y, x));
    EXPECT_LE(l2_distance(x, w), l2_distance(x, y) + l2_distance(y, w) + 1e-12);
  }
}

TEST(Centers, StreamingMatchesTwoPass) {
  Rng rng(5);
  std::vector<PortionHotVector> v;
  std::vector<std::int64_t> labels;
  for (int i = 0; i < 57; ++i) {
    PortionHotVector p{{}, 3};
    for (int j = 0; j < 40; ++j) p.values.push_back(rng.uniform());
    v.push_back(p);
    labels.push_back(static_cast<std::int64_t>(rng.index(4)));
  }
  const auto cc = category_centers(v, labels);
  for (std::int64_t l = 0; l < 4; ++l) {
    std::vector<double> sum(40, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (labels[i] == l) {
        ++n;
        for (int j = 0; j < 40; ++j) sum[j] += v[i].values[j];
      }
    ASSERT_EQ(cc.counts.at(l), n);
    for (int j = 0; j < 40; ++j) EXPECT_NEAR(cc.per_label.at(l)[j], sum[j] / n, 1e-7);
  }
  const auto two = category_centers({PortionHotVector{{0}, 1}, PortionHotVector{{2}, 1}}, {0, 1});
  EXPECT_EQ(two.global, (std::vector<double>{1}));
  EXPECT_EQ(two.per_label.at(0), (std::vector<double>{0}));
  EXPECT_THROW(category_centers({}, {}), Error);
}

TEST(Scalarize, DistanceToGlobalCenter) {
  const std::vector<PortionHotVector> same(3, PortionHotVector{{0.2, 0.4}, 1});
  for (double s : scalarize(same)) EXPECT_NEAR(s, 0.0, 1e-15);
  const auto sym = scalarize({PortionHotVector{{0, 1}, 1}, PortionHotVector{{1, 0}, 1}});
  EXPECT_DOUBLE_EQ(sym[0], sym[1]);
  Rng rng(6);
  std::vector<PortionHotVector> v(9, PortionHotVector{{}, 1});
  for (auto& p : v)
    for (int j = 0; j < 7; ++j) p.values.push_back(rng.uniform());
  std::vector<double> center(7, 0.0);
  for (const auto& p : v)
    for (int j = 0; j < 7; ++j) center[j] += p.values[j] / 9;
  const auto s = scalarize(v);
  for (std::size_t i = 0; i < 9; ++i) {
    double d = 0;
    for (int j = 0; j < 7; ++j) d += (v[i].values[j] - center[j]) * (v[i].values[j] - center[j]);
    EXPECT_NEAR(s[i], std::sqrt(d), 1e-7);
  }
}

TEST(Overlap, Rankings) {
  const std::vector<std::size_t> a = {3, 1, 0, 2, 4}, b = {4, 2, 0, 1, 3};
  EXPECT_EQ(ranking_overlap(a, a, 3), 3u);
  EXPECT_EQ(ranking_overlap({0, 1, 2, 3}, {2, 3, 0, 1}, 2), 0u);
  EXPECT_EQ(ranking_overlap(a, b, 2), 0u);
  EXPECT_EQ(ranking_overlap(a, b, 2, true), 0u);
  EXPECT_EQ(ranking_overlap(a, b, 3, true), 1u);
  EXPECT_THROW(ranking_overlap(a, b, 6), Error);
}

TEST(Overlap, ModelLevelInRange) {
  Model m{tiny_spec({1, 8, 8}, 3, 4), {}};
  m.weights = init_weights(m.spec, 1);
  const auto t = forward_trace(m, oracle::random_image({1, 8, 8}, 2));
  const auto r = extract_pathways(m, build_diffusion_kernels(m), t);
  for (std::size_t p = 0; p < r.layers.size(); ++p) {
    const std::size_t n = std::min<std::size_t>(3, r.layers[p].values.dim(2));
    EXPECT_LE(ranking_overlap(r, m, t, p, n), n);
    EXPECT_EQ(ranking_overlap(r, m, t, p, r.layers[p].values.dim(2)), r.layers[p].values.dim(2));
  }
}

TEST(MainPathway, LargestPartPerLayer) {
  PathwayResult r;
  std::vector<double> v;
  for (int p = 0; p < 4; ++p) v.insert(v.end(), {1.0, p < 3 ? 2.0 : 0.0});
  r.layers = {agg(2, 2, 2, v, 0), agg(1, 1, 2, {0, 0}, 1)};
  const auto steps = main_pathway(r, 1);
  EXPECT_EQ(steps[0].channel, 1);
  EXPECT_DOUBLE_EQ(steps[0].area_ratio, 0.75);
  EXPECT_EQ(steps[0].part_count, 2u);
  EXPECT_EQ(steps[1].channel, -1);
}
