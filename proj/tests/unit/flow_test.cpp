#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/ops.hpp"
#include "afflow/errors.hpp"
#include "afflow/flow/model.hpp"
#include "support/fd_check.hpp"
#include "support/oracles.hpp"

using namespace afflow;
using namespace afflow::ad;
using namespace afflow::flow;
using afflow::testing::random_tensor;

namespace {

FlowConfig tiny_config(std::size_t grid_w = 3, std::size_t channels = 2) {
  FlowConfig c;
  c.layers = {2, 1, 1};
  c.width = 32;
  c.head_dim = 16;
  c.channels = channels;
  c.grid_h = 1;
  c.grid_w = grid_w;
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

// Makes every position emit the same (mu, sigma).
void make_constant(FlowModel& model, double mu, double sigma) {
  const auto& cfg = model.config;
  for (auto& b : model.blocks) {
    for (double& v : b.out_w.mutable_values()) v = 0.0;
    auto ob = b.out_b.mutable_values();
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      ob[c] = cfg.soft_clip * std::atanh(mu / cfg.soft_clip);
      ob[cfg.channels + c] = std::log(std::expm1(sigma - cfg.sigma_floor));
    }
  }
}

}  // namespace

TEST(FlowConfig, ShorthandRoundTrip) {
  FlowConfig c;
  apply_shorthand(c, "18(6)-2048");
  EXPECT_EQ(c.layers, (std::vector<std::size_t>{18, 2, 2, 2, 2, 2}));
  EXPECT_EQ(c.width, 2048u);
  EXPECT_EQ(shorthand(c), "18(6)-2048");
  EXPECT_THROW(apply_shorthand(c, "18-6"), ConfigError);
}

TEST(FlowConfig, JsonRejectsUnknownKeys) {
  FlowConfig c = tiny_config();
  auto j = to_json(c);
  FlowConfig back = flow_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  j["widht"] = 3;
  EXPECT_THROW(flow_config_from_json(j), ConfigError);
}

TEST(AfParams, ZeroInitOutputs) {
  FlowModel m = init_flow(tiny_config(), 1, OutputInit::kZero);
  auto g = af_params(m, 1, random_tensor({2, 3, 2}, 1));
  for (double v : g.mu.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.sigma.values()) EXPECT_NEAR(v, std::log(2.0), 2e-4);
}

TEST(AfParams, MuIsBounded) {
  FlowModel m = init_flow(tiny_config(), 2, OutputInit::kZero);
  m.blocks[0].out_b.mutable_values()[0] = 1e6;
  auto g = af_params(m, 0, random_tensor({1, 3, 2}, 2));
  EXPECT_LE(g.mu.at(0), 5.0);
  EXPECT_NEAR(g.mu.at(0), 5.0, 1e-12);
}

TEST(AfParams, Causality) {
  FlowModel m = init_flow(tiny_config(4), 3, OutputInit::kRandom);
  for (std::size_t blk = 0; blk < 2; ++blk) {
    const auto& order = m.blocks[blk].order;
    Tensor x = random_tensor({1, 4, 2}, 3);
    auto base = af_params(m, blk, x);
    for (std::size_t d = 0; d < 4; ++d) {
      Tensor x2 = x.clone();
      x2.mutable_values()[order[d] * 2] += 0.5;
      auto pert = af_params(m, blk, x2);
      for (std::size_t e = 0; e <= d; ++e)
        for (std::size_t c = 0; c < 2; ++c) {
          EXPECT_EQ(base.mu.at(order[e] * 2 + c), pert.mu.at(order[e] * 2 + c));
          EXPECT_EQ(base.sigma.at(order[e] * 2 + c), pert.sigma.at(order[e] * 2 + c));
        }
    }
  }
}

TEST(AfParams, ConditionOnUnconditionedBlockRejected) {
  FlowConfig c = tiny_config();
  c.num_classes = 2;
  FlowModel m = init_flow(c, 4, OutputInit::kRandom);
  const std::vector<std::size_t> labels{1};
  EXPECT_NO_THROW(af_params(m, 0, random_tensor({1, 3, 2}, 4), labels));
  EXPECT_THROW(af_params(m, 1, random_tensor({1, 3, 2}, 4), labels), ConfigError);
}

TEST(AfForward, ConstantNetwork) {
  FlowConfig c = tiny_config(2, 1);
  c.layers = {1};
  FlowModel m = init_flow(c, 5);
  make_constant(m, 0.5, 2.0);
  Tensor x({1, 2, 1}, {1.0, 2.0});
  auto f = af_forward(m, 0, x);
  EXPECT_NEAR(f.z.at(0), 0.25, 1e-12);
  EXPECT_NEAR(f.z.at(1), 0.75, 1e-12);
  EXPECT_NEAR(f.logdet.at(0), -2.0 * std::log(2.0), 1e-12);
  Tensor back = af_inverse(m, 0, Tensor({1, 2, 1}, 0.0));
  EXPECT_NEAR(back.at(0), 0.5, 1e-12);
  EXPECT_NEAR(back.at(1), 0.5, 1e-12);
}

TEST(AfForward, IdentityFlow) {
  FlowModel m = init_flow(tiny_config(), 6);
  Tensor x = random_tensor({2, 3, 2}, 6);
  auto f = af_forward(m, 0, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(f.z.at(i), x.at(i), 1e-6);
  EXPECT_NEAR(f.logdet.at(0), 0.0, 1e-5);
}

TEST(AfInverse, RoundTripAndNaiveBitwise) {
  FlowConfig c = tiny_config(4);
  c.num_classes = 3;
  FlowModel m = init_flow(c, 7, OutputInit::kRandom);
  const std::vector<std::size_t> labels{0, 2, 3};
  for (std::size_t blk = 0; blk < 3; ++blk) {
    std::span<const std::size_t> lab = blk == 0 ? std::span<const std::size_t>(labels)
                                                : std::span<const std::size_t>();
    Tensor x = random_tensor({3, 4, 2}, 10 + blk, -2, 2);
    Tensor z = af_forward(m, blk, x, lab).z;
    Tensor back = af_inverse(m, blk, z, lab);
    EXPECT_LT(max_abs_diff(back, x), 1e-10);
    Tensor naive = afflow::testing::naive_inverse(m, blk, z, lab);
    for (std::size_t i = 0; i < naive.size(); ++i) ASSERT_EQ(naive.at(i), back.at(i)) << i;
  }
}

TEST(Stack, RoundTripBothDirections) {
  FlowModel m = init_flow(tiny_config(5), 8, OutputInit::kRandom);
  Tensor x = random_tensor({4, 5, 2}, 8, -2, 2);
  Tensor z = stack_forward(m, x).z;
  EXPECT_LT(max_abs_diff(stack_inverse(m, z), x), 1e-8);
  Tensor z2 = random_tensor({4, 5, 2}, 9, -2, 2);
  EXPECT_LT(max_abs_diff(stack_forward(m, stack_inverse(m, z2)).z, z2), 1e-8);
}

TEST(Stack, LogDetMatchesDenseJacobian) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    FlowModel m = init_flow(tiny_config(3), seed, OutputInit::kRandom);
    Tensor x = random_tensor({1, 3, 2}, seed, -1.5, 1.5);
    auto jac = afflow::testing::stack_jacobian(m, x);
    const double brute = afflow::testing::log_abs_det(jac, 6);
    EXPECT_NEAR(stack_forward(m, x).logdet.item(), brute, 1e-6);
  }
}

TEST(Stack, IdentityNllIsGaussianEntropy) {
  FlowConfig c = tiny_config(8, 4);
  FlowModel m = init_flow(c, 14);
  Rng rng(14);
  Tensor x({256, 8, 4});
  for (double& v : x.mutable_values()) v = rng.normal();
  auto r = stack_nll(m, x);
  const double expect = 0.5 * std::log(2 * std::numbers::pi) + 0.5;
  double nll = 0.0;
  for (double v : r.nll_per_dim.values()) nll += v;
  nll /= 256.0;
  EXPECT_NEAR(nll, expect, 0.02);
  EXPECT_EQ(r.latents.size(), 2u);
}

TEST(Stack, LargerSigmaFloorRaisesNll) {
  FlowConfig c = tiny_config();
  FlowModel a = init_flow(c, 15, OutputInit::kZero);
  c.sigma_floor = 1e-2;
  FlowModel b = init_flow(c, 15, OutputInit::kZero);
  Tensor x = random_tensor({2, 3, 2}, 15, -0.1, 0.1);
  // tiny inputs: the log-det term dominates and grows with sigma
  EXPECT_GT(mean(stack_nll(b, x).nll_per_dim).item(), mean(stack_nll(a, x).nll_per_dim).item());
}

TEST(Stack, NllGradientFidelity) {
  FlowConfig c = tiny_config(3);
  c.num_classes = 2;
  FlowModel m = init_flow(c, 16, OutputInit::kRandom);
  auto params = named_params(m);
  const std::vector<std::size_t> labels{1, 2};
  std::vector<std::size_t> pick;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].name.find("wqkv") != std::string::npos ||
        params[i].name.find("out_") != std::string::npos ||
        params[i].name.find("class_emb") != std::string::npos ||
        params[i].name.find("sos") != std::string::npos)
      pick.push_back(i);
  std::vector<Tensor> inputs{random_tensor({2, 3, 2}, 16)};
  for (auto i : pick) inputs.push_back(params[i].tensor);
  const auto r = afflow::testing::check_gradients(
      [&](const std::vector<Tensor>& in) {
        FlowModel copy = m;
        auto cp = named_params(copy);
        for (std::size_t k = 0; k < pick.size(); ++k) {
          // rebind the tensor inside the copied model
          const std::string& name = cp[pick[k]].name;
          for (std::size_t blk = 0; blk < copy.blocks.size(); ++blk) {
            auto& b = copy.blocks[blk];
            const std::string p = "blocks." + std::to_string(blk) + ".";
            if (name == p + "out_w") b.out_w = in[k + 1];
            if (name == p + "out_b") b.out_b = in[k + 1];
            if (name == p + "sos") b.sos = in[k + 1];
            if (name == p + "class_emb") b.class_emb = in[k + 1];
            for (std::size_t l = 0; l < b.backbone.layers.size(); ++l)
              if (name == p + "backbone.layers." + std::to_string(l) + ".wqkv")
                b.backbone.layers[l].wqkv = in[k + 1];
          }
        }
        return stack_nll(copy, in[0], labels).loss;
      },
      inputs);
  EXPECT_LT(r.max_rel_err, 1e-4);
}

TEST(Stack, ShallowBlocksIgnoreCondition) {
  FlowConfig c = tiny_config();
  c.num_classes = 3;
  FlowModel m = init_flow(c, 17, OutputInit::kRandom);
  Tensor x1 = random_tensor({2, 3, 2}, 17);
  const std::vector<std::size_t> a{0, 1}, b{2, 3};
  // deep block responds to the label, shallow blocks never see it
  EXPECT_NE(af_forward(m, 0, x1, a).z.at(0), af_forward(m, 0, x1, b).z.at(0));
  Tensor zs_a = stack_forward(m, x1, a).z;
  Tensor zs_b = stack_forward(m, x1, b).z;
  Tensor h = af_forward(m, 2, x1).z;
  Tensor h2 = af_forward(m, 1, h).z;
  Tensor deep_a = af_forward(m, 0, h2, a).z;
  for (std::size_t i = 0; i < deep_a.size(); ++i) EXPECT_EQ(deep_a.at(i), zs_a.at(i));
  EXPECT_GT(max_abs_diff(zs_a, zs_b), 0.0);
}

TEST(Stack, SamplingDeterministicAndIdentityIsNormal) {
  FlowModel m = init_flow(tiny_config(8, 1), 18);
  Tensor a = stack_sample(m, 500, 42);
  Tensor b = stack_sample(m, 500, 42);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.at(i), b.at(i));
  double mean_v = 0.0;
  for (double v : a.values()) mean_v += v;
  mean_v /= static_cast<double>(a.size());
  EXPECT_LT(std::abs(mean_v), 4.0 / std::sqrt(static_cast<double>(a.size())));
}

TEST(Stack, LogProbMatchesNll) {
  FlowModel m = init_flow(tiny_config(), 19, OutputInit::kRandom);
  Tensor x = random_tensor({3, 3, 2}, 19);
  auto lp = log_prob(m, x);
  auto r = stack_nll(m, x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(-lp[i] / 6.0, r.nll_per_dim.at(i), 1e-12);
}

TEST(Ordering, AlternatesAndCanBeForcedEqual) {
  FlowModel m = init_flow(tiny_config(4), 20);
  EXPECT_EQ(m.blocks[0].order, (std::vector<std::size_t>{3, 2, 1, 0}));
  EXPECT_EQ(m.blocks[1].order, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(m.blocks[2].order, (std::vector<std::size_t>{3, 2, 1, 0}));
  FlowConfig c = tiny_config(4);
  c.alternate_orderings = false;
  FlowModel e = init_flow(c, 20);
  EXPECT_EQ(e.blocks[0].order, e.blocks[1].order);
}
