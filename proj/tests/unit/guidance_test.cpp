#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "afflow/errors.hpp"
#include "afflow/guidance/gaussian.hpp"
#include "afflow/guidance/guided_inverse.hpp"
#include "afflow/rng.hpp"
#include "support/oracles.hpp"

using namespace afflow;
using namespace afflow::guidance;
using afflow::flow::FlowConfig;
using afflow::flow::FlowModel;
using afflow::ad::Tensor;

namespace {

double normal_pdf(double x, double mu, double sigma) {
  const double u = (x - mu) / sigma;
  return std::exp(-0.5 * u * u) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

double max_pointwise_rel_err(const Gaussian& g, const afflow::testing::GridTilt& tilt) {
  double worst = 0.0;
  for (std::size_t i = 0; i < tilt.x.size(); ++i) {
    const double p = normal_pdf(tilt.x[i], g.mu, g.sigma);
    worst = std::max(worst, std::abs(tilt.density[i] - p) / p);
  }
  return worst;
}

}  // namespace

TEST(GuidedGaussian, WorkedExampleMatchesGrid) {
  const Gaussian g = guided_gaussian(1.0, 1.0, 0.0, 2.0, 1.0);
  EXPECT_NEAR(g.mu, 8.0 / 7.0, 1e-12);
  EXPECT_NEAR(g.sigma, 1.0 / std::sqrt(1.75), 1e-12);
  const auto tilt = afflow::testing::grid_tilt(1.0, 1.0, 0.0, 2.0, 1.0);
  EXPECT_NEAR(tilt.mean, g.mu, 1e-6);
  EXPECT_NEAR(tilt.sd, g.sigma, 1e-6);
  EXPECT_LT(max_pointwise_rel_err(g, tilt), 1e-6);
}

TEST(GuidedGaussian, RandomCasesMatchGridTilt) {
  Rng rng(17);
  double worst = 0.0;
  for (int t = 0; t < 300; ++t) {
    const double sc = 0.2 + 2.0 * rng.uniform();
    const double su = sc * (1.0 + 2.0 * rng.uniform());  // s <= 1
    const double mc = 4.0 * rng.uniform() - 2.0;
    const double mu = 4.0 * rng.uniform() - 2.0;
    const double w = 10.0 * rng.uniform();
    const Gaussian g = guided_gaussian(mc, sc, mu, su, w);
    const auto tilt = afflow::testing::grid_tilt(mc, sc, mu, su, w);
    worst = std::max(worst, max_pointwise_rel_err(g, tilt));
    EXPECT_LE(g.sigma, sc);
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(GuidedGaussian, EqualScalesIsStandardCfgExactly) {
  for (double w : {0.0, 0.5, 3.0, 10.0}) {
    const Gaussian g = guided_gaussian(0.3, 0.7, -1.1, 0.7, w);
    EXPECT_EQ(g.mu, 0.3 + w * (0.3 - -1.1));
    EXPECT_EQ(g.sigma, 0.7);
  }
}

TEST(GuidedGaussian, RatioAboveOneIsClipped) {
  EXPECT_EQ(clipped_ratio(2.0, 1.0), 1.0);
  const Gaussian g = guided_gaussian(1.0, 2.0, 0.5, 1.0, 2.0);
  EXPECT_EQ(g.mu, 1.0 + 2.0 * (1.0 - 0.5));
  EXPECT_EQ(g.sigma, 2.0);
}

TEST(GuidedGaussian, ZeroOmegaUnchanged) {
  const Gaussian g = guided_gaussian(0.25, 0.4, 3.0, 1.5, 0.0);
  EXPECT_EQ(g.mu, 0.25);
  EXPECT_EQ(g.sigma, 0.4);
}

TEST(GuidedGaussian, PrecisionIdentity) {
  Rng rng(3);
  for (int t = 0; t < 1000; ++t) {
    const double sc = 0.5 + rng.uniform();
    const double su = sc * (1.0 + rng.uniform());
    const double w = 10.0 * rng.uniform();
    const Gaussian g = guided_gaussian(0.0, sc, 1.0, su, w);
    const double lhs = 1.0 / (g.sigma * g.sigma);
    const double rhs = (1.0 + w) / (sc * sc) - w / (su * su);
    ASSERT_NEAR(lhs, rhs, 1e-12);
  }
}

TEST(GuidedGaussian, ContinuousAtRatioOne) {
  const Gaussian a = guided_gaussian(1.0, 1.0, 0.0, 1.0, 4.0);
  const Gaussian b = guided_gaussian(1.0, 1.0, 0.0, 1.0 + 1e-9, 4.0);
  EXPECT_NEAR(a.mu, b.mu, 1e-7);
  EXPECT_NEAR(a.sigma, b.sigma, 1e-7);
}

TEST(GuidedGaussian, RejectsBadInputs) {
  EXPECT_THROW(guided_gaussian(0, 0.0, 0, 1, 1), DomainError);
  EXPECT_THROW(guided_gaussian(0, 1.0, 0, -1, 1), DomainError);
  EXPECT_THROW(guided_gaussian(0, 1.0, 0, 1, -0.5), DomainError);
}

TEST(LegacyGuidance, ZeroOmegaUnchanged) {
  const Gaussian g = legacy_linear_guidance(0.5, 0.8, 2.0, 1.3, 0.0);
  EXPECT_EQ(g.mu, 0.5);
  EXPECT_EQ(g.sigma, 0.8);
}

TEST(LegacyGuidance, NegativeScaleIsFlooredAndCounted) {
  GuidanceStats stats;
  const Gaussian g = legacy_linear_guidance(0.0, 1.0, 0.0, 2.0, 2.0, &stats);
  EXPECT_EQ(g.sigma, kLegacySigmaFloor);
  EXPECT_EQ(stats.floor_activations, 1u);
  EXPECT_EQ(stats.steps, 1u);
  legacy_linear_guidance(0.0, 1.0, 0.0, 1.1, 1.0, &stats);
  EXPECT_EQ(stats.floor_activations, 1u);
}

TEST(LegacyGuidance, AgreesWithProposedAtEqualScales) {
  const Gaussian a = legacy_linear_guidance(0.2, 0.9, -0.4, 0.9, 3.0);
  const Gaussian b = guided_gaussian(0.2, 0.9, -0.4, 0.9, 3.0);
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.sigma, b.sigma);
}

TEST(GuidanceMode, ParseRoundTrip) {
  for (auto m : {GuidanceMode::kNone, GuidanceMode::kProposed, GuidanceMode::kLegacy})
    EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_THROW(parse_mode("cfg"), ConfigError);
}

namespace {

FlowModel conditional_model(std::size_t classes = 3) {
  FlowConfig c;
  c.layers = {2, 1, 1};
  c.width = 32;
  c.head_dim = 16;
  c.channels = 2;
  c.grid_h = 2;
  c.grid_w = 3;
  c.num_classes = classes;
  return flow::init_flow(c, 21, flow::OutputInit::kRandom);
}

Tensor normal_batch(const FlowModel& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor z({n, m.config.positions(), m.config.channels});
  for (double& v : z.mutable_values()) v = rng.normal();
  return z;
}

void expect_bitwise(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.at(i), b.at(i)) << i;
}

}  // namespace

TEST(GuidedInverse, ZeroOmegaIsPlainConditional) {
  FlowModel m = conditional_model();
  Tensor z = normal_batch(m, 4, 1);
  std::vector<std::size_t> labels{0, 1, 2, 1};
  GuidanceStats stats;
  Tensor guided =
      guided_deep_inverse(m, z, labels, {0.0, GuidanceMode::kProposed, {}}, &stats);
  expect_bitwise(guided, flow::af_inverse(m, 0, z, labels));
  EXPECT_EQ(stats.steps, 4u * 6u * 2u);
}

TEST(GuidedInverse, ModeNoneSkipsUnconditionalPass) {
  FlowModel m = conditional_model();
  Tensor z = normal_batch(m, 3, 2);
  std::vector<std::size_t> labels{2, 0, 1};
  GuidanceStats none_stats, zero_stats;
  Tensor a = guided_deep_inverse(m, z, labels, {0.0, GuidanceMode::kNone, {}}, &none_stats);
  Tensor b = guided_deep_inverse(m, z, labels, {0.0, GuidanceMode::kProposed, {}}, &zero_stats);
  expect_bitwise(a, b);
  EXPECT_EQ(none_stats.steps, 0u);
  EXPECT_GT(zero_stats.steps, 0u);
}

TEST(GuidedInverse, GuidanceChangesDeepBlockOnly) {
  FlowModel m = conditional_model();
  std::vector<std::size_t> labels{0, 2};
  const GuidanceSpec spec{3.0, GuidanceMode::kProposed, {}};
  Tensor sampled = guided_sample(m, 2, 5, labels, spec);
  Tensor z = normal_batch(m, 2, 5);
  Tensor h = guided_deep_inverse(m, z, labels, spec);
  for (std::size_t k = 1; k < m.blocks.size(); ++k) h = flow::af_inverse(m, k, h);
  expect_bitwise(sampled, h);
  Tensor plain = guided_deep_inverse(m, z, labels, {0.0, GuidanceMode::kNone, {}});
  EXPECT_NE(plain.at(0), guided_deep_inverse(m, z, labels, spec).at(0));
}

TEST(GuidedInverse, GuidedRoundTripThroughForwardIsNotIdentity) {
  // guided samples come from a different density, so the conditional forward
  // pass does not return the original noise
  FlowModel m = conditional_model();
  std::vector<std::size_t> labels{1};
  Tensor z = normal_batch(m, 1, 8);
  Tensor x = guided_deep_inverse(m, z, labels, {2.0, GuidanceMode::kProposed, {}});
  Tensor back = flow::af_forward(m, 0, x, labels).z;
  double diff = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) diff = std::max(diff, std::abs(back.at(i) - z.at(i)));
  EXPECT_GT(diff, 1e-6);
}

TEST(GuidedInverse, RequiresConditionAndUnconditionalPath) {
  FlowModel m = conditional_model();
  Tensor z = normal_batch(m, 1, 3);
  EXPECT_THROW(guided_deep_inverse(m, z, {}, {1.0, GuidanceMode::kProposed, {}}), ConfigError);
  FlowModel uncond = conditional_model(0);
  std::vector<std::size_t> labels{0};
  EXPECT_THROW(guided_deep_inverse(uncond, z, labels, {1.0, GuidanceMode::kProposed, {}}),
               ConfigError);
}
