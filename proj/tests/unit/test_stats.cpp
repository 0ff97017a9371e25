#include <gtest/gtest.h>

#include "dpw/stats.hpp"
#include "dpw/rng.hpp"

using namespace dpw;

TEST(Anova, HandComputedExample) {
  // Means 0.5 and 2.5, grand 1.5: SSB = 2*1 + 2*1 = 4, SSW = 4*0.25 = 1,
  // F = (4/1) / (1/2) = 8.
  const auto r = anova_oneway({{0, 1}, {2, 3}});
  EXPECT_NEAR(r.f, 8.0, 1e-9);
  EXPECT_EQ(r.df_between, 1u);
  EXPECT_EQ(r.df_within, 2u);
  EXPECT_NEAR(r.ss_between, 4.0, 1e-12);
  EXPECT_NEAR(r.ss_within, 1.0, 1e-12);
}

TEST(Anova, ConstantGroupsGiveZero) {
  const auto r = anova_oneway({{2, 2}, {2, 2, 2}});
  EXPECT_EQ(r.f, 0.0);
  EXPECT_FALSE(r.f_infinite);
  EXPECT_FALSE(r.significant);
}

TEST(Anova, ZeroWithinVarianceFlagsInfinity) {
  const auto r = anova_oneway({{1, 1}, {2, 2}});
  EXPECT_TRUE(r.f_infinite);
  EXPECT_TRUE(std::isinf(r.f));
  EXPECT_TRUE(r.significant);
}

TEST(Anova, Preconditions) {
  EXPECT_THROW(anova_oneway({{1, 2}}), Error);
  EXPECT_THROW(anova_oneway({{1}, {}}), Error);
  EXPECT_THROW(anova_oneway({{1}, {2}}), Error);
}

TEST(Anova, ShiftAndScaleInvariance) {
  Rng rng(3);
  std::vector<std::vector<double>> g(4);
  for (auto& v : g)
    for (int i = 0; i < 12; ++i) v.push_back(rng.normal() + 0.3 * static_cast<double>(&v - g.data()));
  const double f = anova_oneway(g).f;
  for (auto [shift, scale] : {std::pair{5.0, 1.0}, {0.0, 3.7}, {-100.0, 0.01}}) {
    auto h = g;
    for (auto& v : h)
      for (double& x : v) x = x * scale + shift;
    EXPECT_NEAR(anova_oneway(h).f, f, 1e-9 * f);
  }
}

// Reference quantiles from scipy.stats.f.ppf and the F table.
TEST(FDistribution, CriticalValues) {
  EXPECT_NEAR(f_quantile(0.95, 9, 50), 2.08, 0.01);
  EXPECT_NEAR(f_quantile(0.95, 9, 50), 2.0733512, 1e-6);
  EXPECT_NEAR(f_quantile(0.95, 2, 1197), 3.0, 0.01);
  EXPECT_NEAR(f_quantile(0.95, 2, 1197), 3.0032422, 1e-6);
  EXPECT_NEAR(f_quantile(0.95, 1, 2), 18.5128205, 1e-6);
  EXPECT_NEAR(f_quantile(0.99, 5, 10), 5.6363262, 1e-6);
}

TEST(FDistribution, CdfClosedForms) {
  // df1 = df2 = 2: CDF = f / (1 + f).
  for (double f : {0.1, 1.0, 3.0, 20.0}) EXPECT_NEAR(f_cdf(f, 2, 2), f / (1 + f), 1e-12);
  // df1 = 2: CDF = 1 - (1 + 2f/df2)^(-df2/2).
  for (double f : {0.5, 2.0, 7.0}) EXPECT_NEAR(f_cdf(f, 2, 7), 1 - std::pow(1 + 2 * f / 7, -3.5), 1e-12);
  EXPECT_EQ(f_cdf(0, 3, 4), 0.0);
  for (double p : {0.01, 0.5, 0.95, 0.999}) EXPECT_NEAR(f_cdf(f_quantile(p, 4, 9), 4, 9), p, 1e-10);
}

TEST(Anova, PValueConsistentWithCritical) {
  const auto r = anova_oneway({{0, 1, 2}, {2, 3, 4}, {1, 5, 6}});
  EXPECT_EQ(r.significant, r.p_value < r.alpha);
  EXPECT_NEAR(r.p_value, 1 - f_cdf(r.f, 2, 6), 1e-12);
}
