#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/ops.hpp"
#include "afflow/errors.hpp"
#include "afflow/latent/autoencoder.hpp"
#include "afflow/rng.hpp"
#include "support/fd_check.hpp"

using namespace afflow;
using namespace afflow::latent;
using afflow::ad::Tensor;
using afflow::testing::random_tensor;

namespace {

AutoencoderConfig patch2() {
  AutoencoderConfig c;
  c.image_h = 4;
  c.image_w = 6;
  c.patch = 2;
  c.channels = 5;
  c.hidden = 8;
  return c;
}

flow::FlowModel latent_flow(const AutoencoderConfig& ae, flow::OutputInit init) {
  flow::FlowConfig c;
  c.layers = {1, 1};
  c.width = 32;
  c.head_dim = 16;
  c.channels = ae.channels;
  c.grid_h = ae.grid_h();
  c.grid_w = ae.grid_w();
  return flow::init_flow(c, 6, init);
}

// +-1 pixels with a small jitter, like the bar and checker images
Tensor binary_images(std::size_t n, const AutoencoderConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, c.image_h, c.image_w});
  for (double& v : t.mutable_values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) + 0.02 * rng.normal();
  return t;
}

double checksum(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t.at(i) * static_cast<double>(i + 1);
  return s;
}

}  // namespace

TEST(Autoencoder, PatchifyRoundTripAndLayout) {
  const auto c = patch2();
  Tensor img = random_tensor({2, 4, 6}, 1);
  Tensor p = patchify(c, img);
  EXPECT_EQ(p.shape(), (ad::Shape{2, 6, 4}));
  // patch 1 is the top-middle 2x2 block
  EXPECT_EQ(p.at(1 * 4 + 0), img.at(2));
  EXPECT_EQ(p.at(1 * 4 + 3), img.at(6 + 3));
  Tensor back = unpatchify(c, p);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(back.at(i), img.at(i));
}

TEST(Autoencoder, RejectsIndivisibleShapes) {
  auto c = patch2();
  c.image_w = 5;
  EXPECT_THROW(make_autoencoder(c, 1), ShapeError);
  c = patch2();
  c.channels = 3;
  EXPECT_THROW(make_autoencoder(c, 1), ConfigError);
  EXPECT_THROW(patchify(patch2(), random_tensor({1, 4, 4}, 1)), ShapeError);
}

TEST(Autoencoder, EncoderRowsOrthonormalAndDecoderInitIsInverse) {
  const auto c = patch2();
  ToyAutoencoder ae = make_autoencoder(c, 3);
  Tensor gram = ad::matmul(ae.enc_w, ad::transpose(ae.enc_w, 0, 1));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(gram.at(i * 4 + j), i == j ? 1.0 : 0.0, 1e-12);
  Tensor img = random_tensor({3, 4, 6}, 2);
  Tensor rec = decode(ae, encode(ae, img));
  Tensor rec_id = decode_identity(ae, encode(ae, img));
  for (std::size_t i = 0; i < img.size(); ++i) {
    EXPECT_NEAR(rec.at(i), img.at(i), 1e-12);
    EXPECT_EQ(rec.at(i), rec_id.at(i));
  }
}

TEST(EncodeNoisy, ZeroSigmaIsExactEncoding) {
  ToyAutoencoder ae = make_autoencoder(patch2(), 3);
  Tensor img = random_tensor({2, 4, 6}, 4);
  Tensor a = encode(ae, img);
  Tensor b = encode_noisy(ae, img, 0.0, 99);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.at(i), b.at(i));
  EXPECT_THROW(encode_noisy(ae, img, -0.1, 1), DomainError);
}

TEST(EncodeNoisy, NoiseScaleAndSeeds) {
  AutoencoderConfig c;
  ToyAutoencoder ae = make_autoencoder(c, 5);
  Tensor img = random_tensor({400, 8, 8}, 5);  // 400 * 64 * 4 = 102400 draws
  Tensor clean = encode(ae, img);
  Tensor a = encode_noisy(ae, img, 0.3, 1);
  Tensor b = encode_noisy(ae, img, 0.3, 2);
  double s2 = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a.at(i) - clean.at(i);
    s2 += e * e;
    diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
  }
  EXPECT_NEAR(std::sqrt(s2 / static_cast<double>(a.size())), 0.3, 0.003);
  EXPECT_GT(diff, 0.1);
  Tensor a2 = encode_noisy(ae, img, 0.3, 1);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.at(i), a2.at(i));
}

TEST(ReconNll, PerfectDecoderIsConstantAndErrorIsQuadratic) {
  Tensor img = random_tensor({2, 4, 4}, 6);
  const double c = std::log(0.1) + 0.5 * std::log(2.0 * std::numbers::pi);
  EXPECT_NEAR(recon_nll(img, img).item(), c, 1e-15);
  Tensor err = random_tensor({2, 4, 4}, 7, -0.1, 0.1);
  const double q1 = recon_nll(ad::add(img, err), img).item() - c;
  const double q2 = recon_nll(ad::add(img, ad::scale(err, 2.0)), img).item() - c;
  EXPECT_NEAR(q2, 4.0 * q1, 1e-12);
}

TEST(Elbo, DecompositionAndGradientRouting) {
  const auto c = patch2();
  ToyAutoencoder ae = make_autoencoder(c, 8);
  flow::FlowModel f = latent_flow(c, flow::OutputInit::kRandom);
  Tensor img = random_tensor({3, 4, 6}, 9);
  auto fp = flow::named_params(f);
  auto dp = decoder_params(ae);
  for (auto& p : fp) p.tensor.set_requires_grad(true);
  for (auto& p : dp) p.tensor.set_requires_grad(true);
  const double enc_before = checksum(ae.enc_w);
  ElboTerms t;
  {
    ad::Graph g;
    t = elbo_objective(f, ae, img, 0.3, 11);
    g.backward(t.total);
  }
  EXPECT_NEAR(t.total.item(), t.flow_nll.item() + t.recon_nll.item(), 1e-12);
  const Tensor x_tilde = encode_noisy(ae, img, 0.3, 11);
  EXPECT_NEAR(t.flow_nll.item(), flow::stack_nll(f, x_tilde).loss.item(), 1e-12);
  EXPECT_NEAR(t.recon_nll.item(), recon_nll(decode(ae, x_tilde), img).item(), 1e-12);
  auto nonzero = [](const Tensor& x) {
    if (!x.has_grad()) return false;
    for (double v : x.grad())
      if (v != 0.0) return true;
    return false;
  };
  EXPECT_TRUE(nonzero(fp.back().tensor));
  EXPECT_TRUE(nonzero(ae.dec_w));
  EXPECT_FALSE(nonzero(ae.enc_w));
  EXPECT_EQ(checksum(ae.enc_w), enc_before);
}

TEST(Elbo, DecoderGradientFidelity) {
  const auto c = patch2();
  ToyAutoencoder ae = make_autoencoder(c, 8);
  ae.dec_w2 = random_tensor({8, 4}, 12, -0.3, 0.3);
  flow::FlowModel f = latent_flow(c, flow::OutputInit::kRandom);
  Tensor img = random_tensor({2, 4, 6}, 13);
  const auto r = afflow::testing::check_gradients(
      [&](const auto& in) {
        ToyAutoencoder a = ae;
        a.dec_w = in[0];
        a.dec_w1 = in[1];
        a.dec_w2 = in[2];
        return elbo_objective(f, a, img, 0.3, 14).total;
      },
      {ae.dec_w, ae.dec_w1, ae.dec_w2});
  EXPECT_LT(r.max_rel_err, 1e-4);
}

TEST(DecoderFinetune, ZeroNoiseIdentityDecoderHasZeroError) {
  const auto c = patch2();
  ToyAutoencoder ae = make_autoencoder(c, 2);
  ad::OptimState opt;
  const double mse = decoder_finetune_step(ae, opt, random_tensor({4, 4, 6}, 3), 0.0, 1, 1e-3);
  EXPECT_LT(mse, 1e-28);
}

TEST(DecoderFinetune, LearnsToDenoiseAndKeepsEncoderFrozen) {
  AutoencoderConfig c;
  c.image_h = c.image_w = 4;
  ToyAutoencoder ae = make_autoencoder(c, 2);
  const double enc_before = checksum(ae.enc_w);
  Tensor eval = binary_images(64, c, 100);
  const Tensor eval_lat = encode_noisy(ae, eval, 0.3, 555);
  const double before = pixel_mse(decode(ae, eval_lat), eval);
  EXPECT_NEAR(before, 0.09, 0.01);
  ad::OptimState opt;
  for (std::uint64_t s = 0; s < 600; ++s)
    decoder_finetune_step(ae, opt, binary_images(32, c, s), 0.3, 1000 + s, 1e-2);
  const double after = pixel_mse(decode(ae, eval_lat), eval);
  EXPECT_LT(after, before / 5.0);
  EXPECT_EQ(checksum(ae.enc_w), enc_before);
}

TEST(ScoreDenoise, StandardNormalFlowIsTweedieShrinkage) {
  AutoencoderConfig c;
  c.image_h = c.image_w = 4;
  flow::FlowModel f = latent_flow(c, flow::OutputInit::kIdentity);
  Tensor x = random_tensor({3, 16, 4}, 15, -2.0, 2.0);
  Tensor y = score_denoise_single_step(f, x, 0.3);
  // f32-snapped biases leave sigma within ~1e-8 of one
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.at(i), x.at(i) * (1.0 - 0.09), 1e-7);
  Tensor z = score_denoise_single_step(f, x, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(z.at(i), x.at(i));
}

TEST(ScoreDenoise, MatchesFiniteDifferenceScore) {
  AutoencoderConfig c;
  c.image_h = c.image_w = 2;
  flow::FlowModel f = latent_flow(c, flow::OutputInit::kRandom);
  Tensor x = random_tensor({1, 4, 4}, 16);
  Tensor y = score_denoise_single_step(f, x, 0.5);
  const double h = 1e-5;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x.clone(), xm = x.clone();
    xp.mutable_values()[i] += h;
    xm.mutable_values()[i] -= h;
    const double score = (flow::log_prob(f, xp)[0] - flow::log_prob(f, xm)[0]) / (2 * h);
    EXPECT_NEAR(y.at(i), x.at(i) + 0.25 * score, 1e-7);
  }
}
