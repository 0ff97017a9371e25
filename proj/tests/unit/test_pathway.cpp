#include <gtest/gtest.h>

#include "dpw/pathway.hpp"
#include "oracles.hpp"

using namespace dpw;

namespace {

std::vector<double> flat(const Tensor64& t) { return {t.data().begin(), t.data().end()}; }

Model tiny_model(std::uint64_t seed, Shape in = {1, 7, 5}, std::size_t width = 2) {
  Model m{tiny_spec(in, 3, width), {}};
  m.weights = init_weights(m.spec, seed, 0.2);
  return m;
}

void expect_matches_enumeration(const Model& m, const Tensor& image, const ExtractOptions& opt = {}) {
  const auto trace = forward_trace(m, image);
  const auto result = extract_pathways(m, build_diffusion_kernels(m), trace, opt);
  const auto keep = channel_keep_sets(m, trace, opt);
  const auto ref = oracle::enumerate_paths(m, trace, opt.channel_topk ? &keep : nullptr);
  ASSERT_EQ(result.layers.size(), ref.aggregates.size());
  for (std::size_t p = 0; p < ref.aggregates.size(); ++p)
    EXPECT_LE(oracle::max_relative_error(flat(result.layers[p].values), ref.aggregates[p]), 1e-9) << "L" << p;
}

}  // namespace

TEST(DiffusionKernels, Rotate180) {
  Tensor w({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(rotate180(w).values(), (std::vector<float>{4, 3, 2, 1}));
  const Tensor r = oracle::random_image({3, 2, 3, 3}, 1);
  EXPECT_EQ(rotate180(rotate180(r)), r);
  Tensor sym({1, 1, 3, 3}, {1, 2, 3, 4, 5, 4, 3, 2, 1});
  EXPECT_EQ(rotate180(sym), sym);
}

TEST(DiffusionKernels, OnePerConvWithForwardShapes) {
  const Model m = tiny_model(2);
  const auto set = build_diffusion_kernels(m);
  ASSERT_EQ(set.kernels.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& l = m.spec.layers[set.conv_layers[i]];
    EXPECT_EQ(set.kernels[i].shape(), m.weight(l).shape());
    for (std::size_t j = 0; j < set.kernels[i].size(); j += 9)
      EXPECT_EQ(set.kernels[i][j], m.weight(l)[j + 8]);
  }
}

TEST(ConvDiffuse, SingleSourceConstantKernel) {
  PixelField f{0, 0, Tensor64({1, 1, 1}, {2.0}), 4, 4, 0};
  const auto out = conv_diffuse(f, Tensor({1, 1, 3, 3}, 0.5f));
  ASSERT_EQ(out.values.shape(), (Shape{1, 3, 3}));
  for (double v : out.values.data()) EXPECT_DOUBLE_EQ(v, 2.0 * 1.5);
  EXPECT_EQ(out.anchor_y, 3);
  EXPECT_EQ(out.anchor_x, 3);
}

TEST(ConvDiffuse, ZeroFieldGrows) {
  PixelField f{0, 0, Tensor64({1, 2, 2}), 0, 0, 0};
  const auto out = conv_diffuse(f, oracle::random_image({2, 1, 3, 3}, 3));
  EXPECT_EQ(out.values.shape(), (Shape{2, 4, 4}));
  for (double v : out.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(ConvDiffuse, TwoChannelsKernelOne) {
  PixelField f{0, 0, Tensor64({2, 1, 1}, {3.0, -2.0}), 0, 0, 0};
  const auto out = conv_diffuse(f, Tensor({1, 2, 1, 1}, {0.5f, -3.0f}));
  EXPECT_DOUBLE_EQ(out.values[0], 3.0 * 1.5 + -2.0 * -2.0);
  EXPECT_THROW(conv_diffuse(f, Tensor({1, 3, 1, 1})), Error);
}

TEST(ConvDiffuse, FullConvolutionDefinition) {
  // out(co,y,x) = sum field(ci, y-dy, x-dx) * (rw(co,ci,dy,dx) + 1)
  const Tensor64 vals = oracle::random_image({2, 2, 3}, 4).cast<double>();
  const Tensor rw = oracle::random_image({3, 2, 3, 3}, 5, -1, 1);
  const auto out = conv_diffuse(PixelField{0, 0, vals, 0, 0, 0}, rw);
  for (std::size_t co = 0; co < 3; ++co)
    for (long y = 0; y < 4; ++y)
      for (long x = 0; x < 5; ++x) {
        double s = 0;
        for (std::size_t ci = 0; ci < 2; ++ci)
          for (long dy = 0; dy < 3; ++dy)
            for (long dx = 0; dx < 3; ++dx) {
              const long sy = y - dy, sx = x - dx;
              if (sy < 0 || sx < 0 || sy >= 2 || sx >= 3) continue;
              s += vals.at(ci, sy, sx) * (rw.at(co, ci, dy, dx) + 1.0);
            }
        EXPECT_NEAR(out.values.at(co, y, x), s, 1e-12);
      }
}

TEST(ReluMask, IdentityZeroAndBoundary) {
  const Tensor64 vals = oracle::random_image({2, 3, 3}, 6).cast<double>();
  PixelField f{1, 1, vals, 0, 0, 0};
  EXPECT_EQ(apply_relu_mask(f, Tensor({2, 4, 4}, 1.0f), 4, 4).values, vals);
  const auto zeroed = apply_relu_mask(f, Tensor({2, 4, 4}), 4, 4);
  for (double v : zeroed.values.data()) EXPECT_EQ(v, 0.0);

  PixelField corner{0, 0, vals, -1, -1, 0};
  const auto clipped = apply_relu_mask(corner, Tensor({2, 4, 4}, 1.0f), 4, 4);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x)
        EXPECT_EQ(clipped.values.at(c, y, x), (y == 0 || x == 0) ? 0.0 : vals.at(c, y, x));
}

TEST(PoolMask, RoutingAndExtents) {
  // 4x4 map; window (0,0) wins at (0,0), window (0,1) at (1,3).
  Tensor in({1, 4, 4});
  in.at(0, 0, 0) = 5;
  in.at(0, 1, 3) = 5;
  in.at(0, 3, 0) = 5;
  in.at(0, 2, 2) = 5;
  const auto pr = maxpool2x2_forward(in);
  PixelField f{0, 0, Tensor64({1, 2, 2}, {1, 2, 3, 4}), 0, 0, 0};
  const auto out = apply_pool_mask(f, pr.argmax);
  ASSERT_EQ(out.values.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out.values[0], 1.0);

  // Field over rows/cols 0..1 but window (0,1) argmax (1,3) is outside it.
  PixelField g{0, 0, Tensor64({1, 2, 3}, {1, 2, 3, 4, 5, 6}), 0, 0, 0};
  const auto out2 = apply_pool_mask(g, pr.argmax);
  ASSERT_EQ(out2.values.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(out2.values[0], 1.0);
  EXPECT_EQ(out2.values[1], 0.0);

  // Even anchor, ph = 5 -> 3 = ceil(5/2).
  Tensor big({1, 10, 10});
  const auto pr2 = maxpool2x2_forward(big);
  PixelField h{0, 0, Tensor64({1, 5, 5}), 2, 2, 0};
  const auto out3 = apply_pool_mask(h, pr2.argmax);
  EXPECT_EQ(out3.ph(), 3u);
  EXPECT_EQ(out3.anchor_y, 1);
}

TEST(ChannelMask, KeepSets) {
  const Tensor64 vals = oracle::random_image({64, 2, 2}, 7, 0.1f, 1).cast<double>();
  PixelField f{0, 0, vals, 0, 0, 0};
  std::vector<std::size_t> all(64);
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(apply_channel_mask(f, all).values, vals);
  const auto none = apply_channel_mask(f, {});
  for (double v : none.values.data()) EXPECT_EQ(v, 0.0);
  const std::vector<std::size_t> ten = {0, 5, 9, 13, 22, 31, 40, 47, 58, 63};
  const auto out = apply_channel_mask(f, ten);
  std::size_t zero_planes = 0;
  for (std::size_t c = 0; c < 64; ++c) {
    bool z = true;
    for (std::size_t i = 0; i < 4; ++i) z = z && out.values[c * 4 + i] == 0.0;
    zero_planes += z;
  }
  EXPECT_EQ(zero_planes, 54u);
  EXPECT_THROW(apply_channel_mask(f, {64}), Error);
}

TEST(MaskIdempotence, ReluAndChannel) {
  const Model m = tiny_model(8);
  const auto t = forward_trace(m, oracle::random_image({1, 7, 5}, 9));
  const auto k = build_diffusion_kernels(m);
  PixelField f = conv_diffuse(initial_field(t.input, 3, 0), k.for_layer(0));
  const auto once = apply_relu_mask(f, m, t, 0);
  EXPECT_EQ(apply_relu_mask(once, m, t, 0).values, once.values);
  const auto c1 = apply_channel_mask(once, {1});
  EXPECT_EQ(apply_channel_mask(c1, {1}).values, c1.values);
}

TEST(Extract, ToyNetMatchesPathEnumeration) {
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    const Model m = oracle::toy_model(seed);
    expect_matches_enumeration(m, oracle::random_image({1, 6, 6}, seed + 100));
  }
}

TEST(Extract, TwoPoolNetWithOddExtentsMatchesPathEnumeration) {
  const Model m = tiny_model(5);
  expect_matches_enumeration(m, oracle::random_image({1, 7, 5}, 6, -0.5f, 1));
}

TEST(Extract, ChannelMaskedMatchesPathEnumeration) {
  const Model m = tiny_model(7, {2, 6, 5}, 3);
  ExtractOptions opt;
  opt.channel_topk = 2;
  expect_matches_enumeration(m, oracle::random_image({2, 6, 5}, 8), opt);
  opt.importance = ImportanceMethod::grad_x_activation;
  expect_matches_enumeration(m, oracle::random_image({2, 6, 5}, 8), opt);
}

TEST(Extract, FastPathEqualsPerPixelOperations) {
  const Model m = tiny_model(9, {2, 9, 8}, 3);
  const auto t = forward_trace(m, oracle::random_image({2, 9, 8}, 10));
  const auto k = build_diffusion_kernels(m);
  for (bool masks : {true, false}) {
    ExtractOptions opt;
    opt.relu_masks = masks;
    opt.chunk = 7;
    const auto r = extract_pathways(m, k, t, opt);
    for (std::size_t y = 0; y < 9; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const auto fields = trace_pixel(m, k, t, y, x, opt);
        for (std::size_t p = 0; p < fields.size(); ++p) {
          const auto sums = field_sums(fields[p]);
          for (std::size_t c = 0; c < sums.size(); ++c)
            EXPECT_NEAR(r.layers[p].values.at(y, x, c), sums[c], 1e-9 * (1 + std::fabs(sums[c])));
        }
      }
  }
}

TEST(Extract, ExtentScheduleFollowsRules) {
  const Model m = tiny_model(11, {1, 11, 9});
  const auto t = forward_trace(m, oracle::random_image({1, 11, 9}, 12));
  const auto k = build_diffusion_kernels(m);
  for (std::size_t y : {0u, 3u, 5u, 10u}) {
    const auto fields = trace_pixel(m, k, t, y, 4);
    const auto want = oracle::extent_schedule(m.spec, static_cast<long>(y));
    ASSERT_EQ(fields.size(), want.size());
    for (std::size_t p = 0; p < want.size(); ++p) EXPECT_EQ(fields[p].ph(), want[p]) << "y=" << y << " L" << p;
  }
}

TEST(Extract, ZeroImageZeroBiasGivesZeroAggregates) {
  Model m = tiny_model(13);
  for (auto& [name, t] : m.weights)
    if (name.ends_with(".bias")) t.fill(0.0f);
  const auto r = extract_pathways(m, Tensor({1, 7, 5}));
  for (const auto& l : r.layers)
    for (double v : l.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(Extract, LinearInSourcePixel) {
  const Model m = tiny_model(14);
  const auto t = forward_trace(m, oracle::random_image({1, 7, 5}, 15));
  const auto k = build_diffusion_kernels(m);
  const auto base = extract_pathways(m, k, t);
  auto scaled_trace = t;
  scaled_trace.input.at(0, 3, 2) *= -2.5f;
  const double ratio = static_cast<double>(scaled_trace.input.at(0, 3, 2)) / t.input.at(0, 3, 2);
  const auto scaled = extract_pathways(m, k, scaled_trace);
  for (std::size_t p = 0; p < base.layers.size(); ++p) {
    const std::size_t c = base.layers[p].values.dim(2);
    for (std::size_t y = 0; y < 7; ++y)
      for (std::size_t x = 0; x < 5; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double b = base.layers[p].values.at(y, x, ch), s = scaled.layers[p].values.at(y, x, ch);
          const double want = (y == 3 && x == 2) ? ratio * b : b;
          EXPECT_NEAR(s, want, 1e-9 * (1 + std::fabs(want)));
        }
  }
}

TEST(Extract, ChannelPermutationEquivariance) {
  const Model m = oracle::toy_model(16);
  const std::vector<std::size_t> perm = {1, 0};  // new channel c takes old perm[c]
  Model pm = m;
  Tensor& w1 = pm.weights.at("conv1.weight");
  Tensor& b1 = pm.weights.at("conv1.bias");
  Tensor& w2 = pm.weights.at("conv2.weight");
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < 9; ++i) w1[c * 9 + i] = m.weight(m.spec.layers[0])[perm[c] * 9 + i];
    b1[c] = m.bias(m.spec.layers[0])[perm[c]];
    for (std::size_t co = 0; co < 2; ++co)
      for (std::size_t i = 0; i < 9; ++i) w2.at(co, c, i / 3, i % 3) = m.weight(m.spec.layers[3]).at(co, perm[c], i / 3, i % 3);
  }
  const Tensor x = oracle::random_image({1, 6, 6}, 17);
  const auto a = extract_pathways(m, x), b = extract_pathways(pm, x);
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t i = 0; i < a.layers[p].values.size() / 2; ++i)
      for (std::size_t c = 0; c < 2; ++c)
        EXPECT_NEAR(b.layers[p].values[i * 2 + c], a.layers[p].values[i * 2 + perm[c]], 1e-9);
  for (std::size_t i = 0; i < a.layers[2].values.size(); ++i)
    EXPECT_NEAR(b.layers[2].values[i], a.layers[2].values[i], 1e-6 * (1 + std::fabs(a.layers[2].values[i])));
}

TEST(Extract, ChannelMaskZeroesUnkeptChannels) {
  const Model m = tiny_model(18, {1, 8, 8}, 4);
  ExtractOptions opt;
  opt.channel_topk = 3;
  const auto r = extract_pathways(m, oracle::random_image({1, 8, 8}, 19), opt);
  for (std::size_t p = 0; p < r.layers.size(); ++p) {
    if (m.spec.layers[r.layers[p].layer_index].kind != LayerKind::conv) continue;
    const auto& keep = r.kept_channels[p];
    EXPECT_EQ(keep.size(), 3u);
    const std::size_t c = r.layers[p].values.dim(2);
    for (std::size_t i = 0; i < r.layers[p].values.size(); ++i)
      if (std::find(keep.begin(), keep.end(), i % c) == keep.end()) {
        EXPECT_EQ(r.layers[p].values[i], 0.0);
      }
  }
}

TEST(Extract, DeterministicAcrossThreadsAndChunks) {
  const Model m = tiny_model(20, {3, 10, 10}, 4);
  const auto t = forward_trace(m, oracle::random_image({3, 10, 10}, 21));
  const auto k = build_diffusion_kernels(m);
  ExtractOptions a;
  const auto ra = extract_pathways(m, k, t, a);
  for (std::size_t threads : {2u, 4u})
    for (std::size_t chunk : {1u, 13u, 1000u}) {
      ExtractOptions b;
      b.threads = threads;
      b.chunk = chunk;
      const auto rb = extract_pathways(m, k, t, b);
      for (std::size_t p = 0; p < ra.layers.size(); ++p) EXPECT_EQ(ra.layers[p].values, rb.layers[p].values);
    }
}
