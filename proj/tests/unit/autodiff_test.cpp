#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <limits>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/kernels.hpp"
#include "afflow/autodiff/ops.hpp"
#include "afflow/autodiff/optim.hpp"
#include "afflow/errors.hpp"
#include "support/fd_check.hpp"

using namespace afflow;
using namespace afflow::ad;
using afflow::testing::check_gradients;
using afflow::testing::random_tensor;

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

// Reduces any tensor to a scalar with non-uniform weights so every output
// element gets a distinct upstream gradient.
Tensor weighted_sum(const Tensor& t) {
  Tensor w(t.shape());
  auto wv = w.mutable_values();
  for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return sum(mul(t, w));
}

void expect_grad_ok(const Fn& f, std::vector<Tensor> inputs) {
  const auto r = check_gradients(f, std::move(inputs));
  EXPECT_LT(r.max_rel_err, 1e-4);
}

}  // namespace

TEST(Ops, ClosedFormValues) {
  EXPECT_EQ(ad::tanh(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_NEAR(ad::softplus(Tensor::scalar(0.0)).item(), std::log(2.0), 1e-15);
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor a = random_tensor({3, 3}, 7);
  Tensor p = matmul(eye, a);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(p.at(i), a.at(i));
}

TEST(Ops, BroadcastingShapes) {
  EXPECT_EQ(broadcast_shapes({2, 1, 3}, {4, 3}), (Shape{2, 4, 3}));
  EXPECT_THROW(broadcast_shapes({2, 3}, {4, 3}), ShapeError);
  Tensor a({2, 1}, {1, 2});
  Tensor b({3}, {10, 20, 30});
  Tensor c = add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(c.at(4), 22.0);
}

TEST(Ops, DomainErrors) {
  EXPECT_THROW(ad::log(Tensor({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(ad::div(Tensor::scalar(1), Tensor::scalar(0)), DomainError);
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(Ops, NonFiniteResultNamesOp) {
  try {
    ad::exp(Tensor::scalar(1000.0));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("exp"), std::string::npos);
  }
}

TEST(Ops, SoftmaxRows) {
  Tensor s = softmax_rows(Tensor({1, 2}, {0, 0}));
  EXPECT_EQ(s.at(0), 0.5);
  EXPECT_EQ(s.at(1), 0.5);
  Tensor big = softmax_rows(Tensor({1, 2}, {1000, 0}));
  EXPECT_NEAR(big.at(0), 1.0, 1e-15);
  EXPECT_GE(big.at(1), 0.0);
  Tensor r = softmax_rows(random_tensor({5, 3}, 3, -4, 4));
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_NEAR(r.at(3 * i) + r.at(3 * i + 1) + r.at(3 * i + 2), 1.0, 1e-12);
}

TEST(Ops, SoftmaxMaskedRows) {
  ScoreMask causal = ScoreMask::causal(3);
  Tensor s = softmax_rows(random_tensor({2, 3, 3}, 5), &causal);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i + 1; j < 3; ++j) EXPECT_EQ(s.at(b * 9 + i * 3 + j), 0.0);
  ScoreMask all;
  all.rows = 1;
  all.cols = 2;
  all.bias.assign(2, -std::numeric_limits<double>::infinity());
  EXPECT_THROW(softmax_rows(Tensor({1, 2}), &all), DomainError);
}

TEST(Ops, RmsNorm) {
  Tensor ones({2, 4}, 1.0);
  Tensor gain({4}, 1.0);
  Tensor y = rmsnorm(ones, gain);
  for (double v : y.values()) EXPECT_NEAR(v, 1.0, 1e-6);
  Tensor x = random_tensor({3, 8}, 11);
  Tensor g8({8}, 1.0);
  Tensor y1 = rmsnorm(x, g8);
  Tensor y10 = rmsnorm(scale(x, 10.0), g8);
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_NEAR(y1.at(i), y10.at(i), 1e-5);
  for (std::size_t r = 0; r < 3; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < 8; ++j) ss += y1.at(r * 8 + j) * y1.at(r * 8 + j);
    EXPECT_NEAR(std::sqrt(ss / 8.0), 1.0, 1e-5);
  }
  EXPECT_THROW(rmsnorm(Tensor({2, 0}), Tensor({0})), ShapeError);
}

TEST(Backward, AnalyticCases) {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  {
    Graph g;
    g.backward(sum(square(x)));
  }
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);

  Tensor w = Tensor::scalar(0.0);
  w.set_requires_grad(true);
  {
    Graph g;
    g.backward(ad::log(ad::softplus(w)));
  }
  EXPECT_NEAR(w.grad()[0], 0.5 / std::log(2.0), 1e-12);
}

TEST(Backward, AccumulatesAcrossCalls) {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  for (int i = 0; i < 2; ++i) {
    Graph g;
    g.backward(sum(square(x)));
  }
  EXPECT_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Graph g;
  Tensor y = square(x);
  EXPECT_THROW(g.backward(y), ShapeError);
}

TEST(Backward, NoRecordingWithoutGraph) {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Tensor y = square(x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, DeterministicBitwise) {
  auto run = [] {
    Tensor a = random_tensor({4, 5}, 1);
    Tensor b = random_tensor({5, 3}, 2);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Graph g;
    Tensor loss = sum(ad::tanh(matmul(a, b)));
    g.backward(loss);
    std::vector<double> out(a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    out.push_back(loss.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradientFidelity, Elementwise) {
  const Tensor a = random_tensor({3, 4}, 21);
  const Tensor b = random_tensor({3, 4}, 22, 0.5, 2.0);
  const Tensor bcast = random_tensor({4}, 23, 0.5, 2.0);
  expect_grad_ok([](const auto& in) { return weighted_sum(add(in[0], in[1])); }, {a, b});
  expect_grad_ok([](const auto& in) { return weighted_sum(sub(in[0], in[1])); }, {a, bcast});
  expect_grad_ok([](const auto& in) { return weighted_sum(mul(in[0], in[1])); }, {a, bcast});
  expect_grad_ok([](const auto& in) { return weighted_sum(div(in[0], in[1])); }, {a, b});
  expect_grad_ok([](const auto& in) { return weighted_sum(div(in[0], in[1])); }, {a, bcast});
  expect_grad_ok([](const auto& in) { return weighted_sum(neg(in[0])); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(ad::exp(in[0])); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(ad::log(in[0])); }, {b});
  expect_grad_ok([](const auto& in) { return weighted_sum(ad::tanh(in[0])); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(ad::softplus(in[0])); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(gelu(in[0])); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(square(in[0])); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(scale(in[0], -1.7)); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(add_scalar(in[0], 0.4)); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(soft_clip(in[0], 0.5)); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(positive_scale(in[0], 1e-4)); }, {a});
}

TEST(GradientFidelity, Reductions) {
  const Tensor a = random_tensor({2, 3, 4}, 31);
  expect_grad_ok([](const auto& in) { return sum(in[0]); }, {a});
  expect_grad_ok([](const auto& in) { return mean(in[0]); }, {a});
  for (std::size_t ax = 0; ax < 3; ++ax) {
    expect_grad_ok([ax](const auto& in) { return weighted_sum(sum(in[0], ax)); }, {a});
    expect_grad_ok([ax](const auto& in) { return weighted_sum(mean(in[0], ax, true)); }, {a});
  }
}

TEST(GradientFidelity, MatmulShapes) {
  const Tensor a = random_tensor({2, 3, 4}, 41);
  const Tensor w = random_tensor({4, 5}, 42);
  const Tensor bb = random_tensor({2, 4, 5}, 43);
  expect_grad_ok([](const auto& in) { return weighted_sum(matmul(in[0], in[1])); }, {a, w});
  expect_grad_ok([](const auto& in) { return weighted_sum(matmul(in[0], in[1])); }, {a, bb});
}

TEST(GradientFidelity, ShapeOps) {
  const Tensor a = random_tensor({2, 3, 4}, 51);
  const Tensor b = random_tensor({2, 2, 4}, 52);
  expect_grad_ok([](const auto& in) { return weighted_sum(reshape(in[0], {6, 4})); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(transpose(in[0], 0, 2)); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(transpose(in[0], 1, 2)); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(slice(in[0], 1, 1, 3)); }, {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(concat({in[0], in[1]}, 1)); }, {a, b});
  expect_grad_ok(
      [](const auto& in) { return weighted_sum(broadcast_to(in[0], {5, 2, 3, 4})); }, {a});
  const std::vector<std::size_t> idx{2, 0, 2, 1};
  expect_grad_ok([&idx](const auto& in) { return weighted_sum(index_select(in[0], 1, idx)); },
                 {a});
}

TEST(GradientFidelity, SoftmaxAndNorm) {
  const Tensor a = random_tensor({2, 3, 3}, 61, -2, 2);
  const Tensor gain = random_tensor({3}, 62, 0.5, 1.5);
  ScoreMask causal = ScoreMask::causal(3);
  expect_grad_ok([](const auto& in) { return weighted_sum(softmax_rows(in[0])); }, {a});
  expect_grad_ok([&causal](const auto& in) { return weighted_sum(softmax_rows(in[0], &causal)); },
                 {a});
  expect_grad_ok([](const auto& in) { return weighted_sum(rmsnorm(in[0], in[1])); }, {a, gain});
}

TEST(AdamW, ZeroGradZeroDecayLeavesParams) {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<double> p{1.0, -2.0}, g{0.0, 0.0}, m(2, 0.0), v(2, 0.0);
  adamw_update(p, g, m, v, cfg, 1, cfg.lr, true);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -2.0);
}

TEST(AdamW, FirstStepMovesByLr) {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<double> p{0.0}, g{1.0}, m{0.0}, v{0.0};
  adamw_update(p, g, m, v, cfg, 1, cfg.lr, true);
  EXPECT_NEAR(p[0], -1e-4, 1e-11);
}

TEST(AdamW, DecayIsDecoupled) {
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  std::vector<double> p{2.0}, g{0.0}, m{0.0}, v{0.0};
  adamw_update(p, g, m, v, cfg, 1, 0.01, true);
  EXPECT_NEAR(p[0], 2.0 * (1.0 - 0.01 * 0.1), 1e-15);
  std::vector<double> q{2.0};
  m = {0.0};
  v = {0.0};
  adamw_update(q, g, m, v, cfg, 1, 0.01, false);
  EXPECT_EQ(q[0], 2.0);
}

TEST(AdamW, QuadraticDecreases) {
  Tensor theta = Tensor({1}, {1.0});
  theta.set_requires_grad(true);
  OptimState state;
  state.config.lr = 1e-2;
  std::vector<Tensor> params{theta};
  double prev = 1.0;
  for (int i = 0; i < 100; ++i) {
    theta.zero_grad();
    {
      Graph g;
      g.backward(scale(sum(square(theta)), 0.5));
    }
    adamw_step(params, {true}, state);
    const double now = std::abs(theta.at(0));
    EXPECT_LT(now, prev);
    prev = now;
  }
  EXPECT_EQ(state.step, 100u);
}

TEST(AdamW, ShapeMismatch) {
  AdamWConfig cfg;
  std::vector<double> p{0.0, 1.0}, g{1.0}, m(2), v(2);
  EXPECT_THROW(adamw_update(p, g, m, v, cfg, 1, cfg.lr, true), ShapeError);
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100), 1e-4);
  EXPECT_NEAR(cosine_lr(100, 100), 1e-6, 1e-20);
  EXPECT_NEAR(cosine_lr(50, 100), (1e-4 + 1e-6) / 2, 1e-18);
  EXPECT_THROW(cosine_lr(0, 0), DomainError);
}

TEST(Kernels, GemmMatchesDotChains) {
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 7, 5}, {9, 16, 17}, {17, 33, 40}}) {
    const Tensor a = random_tensor({m, k}, m + k);
    const Tensor b = random_tensor({k, n}, n);
    std::vector<double> c(m * n);
    kernels::gemm(a.values().data(), b.values().data(), c.data(), m, k, n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        EXPECT_EQ(c[i * n + j], kernels::dot_chain(a.values().data() + i * k, b.values().data() + j, k, n));
  }
}

TEST(Kernels, PackedGemmIsBitwiseEqual) {
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 5, 3}, {8, 16, 16}, {13, 24, 41}, {32, 64, 200}}) {
    const Tensor a = random_tensor({m, k}, 3 * m);
    const Tensor b = random_tensor({k, n}, 5 * n);
    std::vector<double> plain(m * n), packed(m * n, -1.0);
    kernels::gemm(a.values().data(), b.values().data(), plain.data(), m, k, n);
    const auto pb = kernels::pack_matrix(b.values().data(), k, n);
    kernels::gemm(a.values().data(), pb, packed.data(), m);
    EXPECT_EQ(plain, packed);
  }
}

