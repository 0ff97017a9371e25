#include <gtest/gtest.h>

#include "dpw/model.hpp"
#include "oracles.hpp"

using namespace dpw;

TEST(Model, ReferenceSpecStructure) {
  const ModelSpec s = vgg16_spec({3, 32, 32});
  ASSERT_EQ(s.pathway_layers.size(), 18u);
  EXPECT_EQ(s.pathway_channel_total(), 5696u);
  std::size_t convs = 0, pools = 0;
  for (std::size_t li : s.pathway_layers) (s.layers[li].kind == LayerKind::conv ? convs : pools)++;
  EXPECT_EQ(convs, 13u);
  EXPECT_EQ(pools, 5u);
  const std::vector<std::size_t> want = {64, 64, 64, 128, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512};
  for (std::size_t p = 0; p < 18; ++p) EXPECT_EQ(s.pathway_channels(p), want[p]) << "L" << p;
  EXPECT_EQ(s.output_shapes.back(), (Shape{10}));
  EXPECT_EQ(s.layers[s.feature_map_layer(0)].name, "relu1_1");
  EXPECT_EQ(s.layers[s.feature_map_layer(2)].name, "pool1");
}

TEST(Model, FinalizeRejectsBrokenChains) {
  ModelSpec s = oracle::toy_spec();
  s.layers[3].conv.cin = 3;
  EXPECT_THROW(s.finalize(), Error);
  s = oracle::toy_spec();
  s.classes = 4;
  EXPECT_THROW(s.finalize(), Error);
  s = oracle::toy_spec();
  s.layers[1].name = "conv1";
  try {
    s.finalize();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape_chain);
  }
}

TEST(Model, ForwardMatchesDoubleOracle) {
  Model m{tiny_spec({3, 9, 7}, 5, 4), {}};
  m.weights = init_weights(m.spec, 11);
  const Tensor x = oracle::random_image({3, 9, 7}, 12);
  const auto t = forward_trace(m, x);
  const auto ref = oracle::forward_from(m, 0, oracle::from_tensor(x));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(t.logits[i], ref.v[i], 1e-4);
  EXPECT_EQ(t.predicted, argmax_index(t.logits.data()));
  EXPECT_EQ(predict(m, x), t.predicted);
}

TEST(Model, InitWeightsDeterministic) {
  const ModelSpec s = oracle::toy_spec();
  EXPECT_EQ(init_weights(s, 3), init_weights(s, 3));
  EXPECT_NE(init_weights(s, 3), init_weights(s, 4));
}

TEST(Model, LossGradientMatchesFiniteDifferences) {
  Model m{tiny_spec({2, 6, 6}, 4, 3), {}};
  m.weights = init_weights(m.spec, 21, 0.3);
  const Tensor x = oracle::random_image({2, 6, 6}, 22);
  const auto t = forward_trace(m, x);
  const Tensor g = backward_to(m, t, 0, softmax_cross_entropy(t.logits, 2).grad_logits);
  auto f = [&](const std::vector<double>& v) { return oracle::cross_entropy(oracle::forward_from(m, 0, {x.shape(), v}).v, 2); };
  const auto fd = oracle::central_differences(f, oracle::from_tensor(x).v, 1e-5);
  EXPECT_LT(oracle::relative_l2({g.data().begin(), g.data().end()}, fd), 1e-3);
}

TEST(Model, MissingRecordIsTyped) {
  const Model m = oracle::toy_model(1);
  auto t = forward_trace(m, oracle::random_image({1, 6, 6}, 2));
  t.layers[1].relu_mask = Tensor();
  try {
    backward_to(m, t, 0, logit_onehot(3, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::missing_record);
  }
}

TEST(Model, ImportanceRanking) {
  EXPECT_EQ(rank_descending({1, 3, 3, 0}), (std::vector<std::size_t>{1, 2, 0, 3}));
  const Model m = oracle::toy_model(5);
  const auto t = forward_trace(m, oracle::random_image({1, 6, 6}, 6));
  const auto l1 = channel_scores(m, t, 0, ImportanceMethod::activation_l1);
  const Tensor& a = t.layers[1].output;
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 36; ++i) s += std::fabs(a[c * 36 + i]);
    EXPECT_NEAR(l1[c], s, 1e-9);
  }
  for (double v : channel_scores(m, t, 0, ImportanceMethod::grad_x_activation, 1)) EXPECT_GE(v, 0.0);
  EXPECT_THROW(channel_scores(m, t, 0, ImportanceMethod::grad_x_activation), Error);
}
