#include "afflow/experiments/lab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "afflow/errors.hpp"
#include "afflow/experiments/synthetic.hpp"
#include "afflow/experiments/train.hpp"
#include "afflow/flow/checkpoint.hpp"
#include "afflow/guidance/guided_inverse.hpp"
#include "afflow/rng.hpp"

namespace afflow::experiments {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double log_normal(double x, double mu, double sigma) {
  const double u = (x - mu) / sigma;
  return -0.5 * u * u - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

double log_tilt(double x, double mu_c, double sigma_c, double mu_u, double sigma_u, double omega) {
  return (1.0 + omega) * log_normal(x, mu_c, sigma_c) - omega * log_normal(x, mu_u, sigma_u);
}

// Trapezoid sums on a uniform grid: log normalizer, mean, sd. For smooth
// densities that vanish at both ends the rule converges geometrically.
struct GridMoments {
  double log_z, mean, sd;
};

GridMoments grid_moments(double lo, double hi, std::size_t n, const std::vector<double>& lf) {
  const double h = (hi - lo) / static_cast<double>(n - 1);
  const double peak = *std::max_element(lf.begin(), lf.end());
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = (i == 0 || i + 1 == n) ? 0.5 : 1.0;
    const double x = lo + h * static_cast<double>(i);
    const double f = w * std::exp(lf[i] - peak);
    z += f;
    m1 += f * x;
    m2 += f * x * x;
  }
  const double mean = m1 / z;
  return {peak + std::log(z * h), mean, std::sqrt(std::max(0.0, m2 / z - mean * mean))};
}

std::vector<double> tilt_values(double lo, double hi, std::size_t n, double mu_c, double sigma_c,
                                double mu_u, double sigma_u, double omega) {
  std::vector<double> lf(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    lf[i] = log_tilt(x, mu_c, sigma_c, mu_u, sigma_u, omega);
  }
  return lf;
}

}  // namespace

TiltGrid normalized_tilt(double mu_c, double sigma_c, double mu_u, double sigma_u, double omega,
                         std::size_t points) {
  if (points < 3) throw ConfigError("verify-cfg: need at least 3 grid points");
  // locate the mass with a wide coarse grid, then resolve +-10 sd finely
  const double reach = (1.0 + omega) * std::abs(mu_c - mu_u) + 40.0 * sigma_c;
  const std::size_t coarse_n = 40001;
  const auto coarse = grid_moments(
      mu_c - reach, mu_c + reach, coarse_n,
      tilt_values(mu_c - reach, mu_c + reach, coarse_n, mu_c, sigma_c, mu_u, sigma_u, omega));
  const double lo = coarse.mean - 10.0 * coarse.sd;
  const double hi = coarse.mean + 10.0 * coarse.sd;
  const auto lf = tilt_values(lo, hi, points, mu_c, sigma_c, mu_u, sigma_u, omega);
  const auto fine = grid_moments(lo, hi, points, lf);
  TiltGrid g;
  g.x.resize(points);
  g.density.resize(points);
  for (std::size_t i = 0; i < points; ++i) {
    g.x[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    g.density[i] = std::exp(lf[i] - fine.log_z);
  }
  return g;
}

bool VerifyCfgReport::pass(double rel_tol, double precision_tol) const {
  return !cases.empty() && max_rel_err < rel_tol && max_precision_residual < precision_tol &&
         equal_scales_exact && sigma_bounded;
}

VerifyCfgReport cmd_verify_cfg(const VerifyCfgArgs& args) {
  using guidance::guided_gaussian;
  VerifyCfgReport rep;
  rep.sigma_bounded = true;
  Rng rng(args.seed);
  for (std::size_t t = 0; t < args.trials; ++t) {
    VerifyCase c{};
    c.sigma_c = 0.1 + 2.9 * rng.uniform();
    c.s = 0.05 + 0.95 * rng.uniform();
    c.sigma_u = c.sigma_c / std::sqrt(c.s);
    c.mu_c = 6.0 * rng.uniform() - 3.0;
    c.mu_u = 6.0 * rng.uniform() - 3.0;
    c.omega = 10.0 * rng.uniform();
    const auto g = guided_gaussian(c.mu_c, c.sigma_c, c.mu_u, c.sigma_u, c.omega);
    const TiltGrid tilt =
        normalized_tilt(c.mu_c, c.sigma_c, c.mu_u, c.sigma_u, c.omega, args.grid_points);
    for (std::size_t i = 0; i < tilt.x.size(); ++i) {
      const double p = std::exp(log_normal(tilt.x[i], g.mu, g.sigma));
      c.max_rel_err = std::max(c.max_rel_err, std::abs(tilt.density[i] - p) / p);
    }
    const double lhs = 1.0 / (g.sigma * g.sigma);
    const double rhs = (1.0 + c.omega) / (c.sigma_c * c.sigma_c) -
                       c.omega / (c.sigma_u * c.sigma_u);
    c.precision_residual = std::abs(lhs - rhs) / std::abs(rhs);
    rep.max_rel_err = std::max(rep.max_rel_err, c.max_rel_err);
    rep.max_precision_residual = std::max(rep.max_precision_residual, c.precision_residual);
    if (!(g.sigma <= c.sigma_c)) rep.sigma_bounded = false;
    rep.cases.push_back(c);
  }
  // s > 1 is clipped to 1: the scale must still not exceed sigma_c
  for (std::size_t t = 0; t < args.trials; ++t) {
    const double sc = 0.1 + 2.9 * rng.uniform();
    const double su = sc * (0.1 + 0.9 * rng.uniform());
    const auto g = guided_gaussian(rng.normal(), sc, rng.normal(), su, 10.0 * rng.uniform());
    if (!(g.sigma <= sc)) rep.sigma_bounded = false;
  }
  rep.equal_scales_exact = true;
  for (std::size_t t = 0; t < std::max<std::size_t>(args.trials, 1); ++t) {
    const double mc = 6.0 * rng.uniform() - 3.0;
    const double mu = 6.0 * rng.uniform() - 3.0;
    const double sc = 0.1 + 2.9 * rng.uniform();
    const double w = 10.0 * rng.uniform();
    const auto g = guided_gaussian(mc, sc, mu, sc, w);
    if (g.mu != mc + w * (mc - mu) || g.sigma != sc) rep.equal_scales_exact = false;
  }
  if (!args.out.empty()) {
    std::ofstream f(args.out);
    if (!f) throw ConfigError("verify-cfg: cannot write '" + args.out + "'");
    f.precision(17);
    f << "trial,mu_c,sigma_c,mu_u,sigma_u,omega,s,max_rel_err,precision_residual\n";
    for (std::size_t i = 0; i < rep.cases.size(); ++i) {
      const auto& c = rep.cases[i];
      f << i << ',' << c.mu_c << ',' << c.sigma_c << ',' << c.mu_u << ',' << c.sigma_u << ','
        << c.omega << ',' << c.s << ',' << c.max_rel_err << ',' << c.precision_residual << '\n';
    }
  }
  return rep;
}

std::vector<UniversalityRow> cmd_universality(const UniversalityArgs& args) {
  const Dataset train = gen_2d_mixture(canonical_target(), args.train_n, args.seed);
  const Dataset eval = gen_2d_mixture(canonical_target(), args.eval_n, mix_seed(args.seed, 1));
  const double truth = canonical_entropy_per_dim();
  std::vector<UniversalityRow> rows;
  for (std::size_t t : args.blocks) {
    if (t == 0 || args.total_layers % t != 0)
      throw ConfigError("universality: " + std::to_string(args.total_layers) +
                        " layers do not split evenly into " + std::to_string(t) + " blocks");
    RunConfig run;
    run.flow.layers.assign(t, args.total_layers / t);
    run.flow.width = args.width;
    run.flow.head_dim = args.head_dim;
    run.flow.channels = 1;
    run.flow.grid_h = 1;
    run.flow.grid_w = 2;
    run.flow.rope_split = {0.5, 0.5, 0.0};
    run.optim.lr = args.lr;
    run.optim.lr_min = args.lr * 1e-2;
    run.optim.grad_clip = 1.0;
    run.batch_size = args.batch;
    run.total_images = static_cast<std::uint64_t>(args.steps) * args.batch;
    run.seed = args.seed;
    run.noise_sigma = 0.0;
    UniversalityRow row;
    row.blocks = t;
    row.truth_per_dim = truth;
    Trainer trainer(run, train);
    row.params = flow::parameter_count(trainer.model());
    const auto t0 = Clock::now();
    try {
      while (!trainer.finished() && seconds_since(t0) < args.budget_s) trainer.step();
    } catch (const NumericError&) {
      row.diverged = true;
    }
    row.train_s = seconds_since(t0);
    row.steps = trainer.steps_done();
    if (row.diverged) {
      row.nll_per_dim = row.gap = std::numeric_limits<double>::infinity();
    } else {
      const auto lp = flow::log_prob(trainer.model(), rows_tensor(eval, 0, eval.n));
      double s = 0.0;
      for (double v : lp) s -= v;
      row.nll_per_dim = s / (2.0 * static_cast<double>(eval.n));
      row.gap = row.nll_per_dim - truth;
    }
    rows.push_back(row);
  }
  if (!args.out.empty()) {
    std::ofstream f(args.out);
    if (!f) throw ConfigError("universality: cannot write '" + args.out + "'");
    f.precision(17);
    f << "blocks,params,steps,train_s,nll_per_dim,truth_per_dim,gap,diverged\n";
    for (const auto& r : rows)
      f << r.blocks << ',' << r.params << ',' << r.steps << ',' << r.train_s << ','
        << r.nll_per_dim << ',' << r.truth_per_dim << ',' << r.gap << ',' << r.diverged << '\n';
  }
  return rows;
}

double BenchRun::total_ms() const {
  double s = 0.0;
  for (double v : block_ms) s += v;
  return s;
}

namespace {

// Per-block minimum over repeats; the minimum is the least noisy estimate
// of the cost on a shared machine.
struct Timed {
  const char* name;
  const flow::FlowModel* model;
  guidance::GuidanceSpec spec;
  std::vector<std::vector<double>> ms;
};

std::vector<BenchRun> time_sampling(std::vector<Timed> jobs, const BenchArgs& args) {
  std::vector<std::size_t> labels(args.batch, 0);
  // repeats are interleaved so slow phases of the machine hit every model
  for (std::size_t r = 0; r <= args.repeats; ++r)
    for (auto& job : jobs) {
      std::vector<double> ms;
      flow::stack_sample(*job.model, args.batch, mix_seed(args.seed, r), labels, &job.spec,
                         nullptr, &ms);
      if (r > 0) job.ms.push_back(ms);  // r = 0 warms up
    }
  std::vector<BenchRun> runs;
  for (const auto& job : jobs) {
    BenchRun run;
    run.model = job.name;
    run.layers = job.model->config.layers;
    for (std::size_t k = 0; k < run.layers.size(); ++k) {
      run.guided.push_back(job.spec.enabled_for(k) && job.model->blocks[k].conditioned());
      double best = std::numeric_limits<double>::infinity();
      for (const auto& ms : job.ms) best = std::min(best, ms[k]);
      run.block_ms.push_back(best);
    }
    runs.push_back(std::move(run));
  }
  return runs;
}

}  // namespace

BenchReport cmd_bench(const BenchArgs& args) {
  if (args.batch == 0 || args.repeats == 0) throw ConfigError("bench: batch and repeats must be positive");
  const flow::FlowModel ds = flow::model_from_checkpoint(flow::read_checkpoint(args.ckpt_deep_shallow));
  const flow::FlowModel eq = flow::model_from_checkpoint(flow::read_checkpoint(args.ckpt_equal));
  if (ds.config.num_classes == 0 || eq.config.num_classes == 0)
    throw ConfigError("bench: both checkpoints must be class-conditional");
  BenchReport rep;
  rep.params_deep_shallow = flow::parameter_count(ds);
  rep.params_equal = flow::parameter_count(eq);
  const double a = static_cast<double>(rep.params_deep_shallow);
  const double b = static_cast<double>(rep.params_equal);
  if (std::abs(a - b) > args.param_tolerance * std::max(a, b))
    throw ConfigError("bench: parameter counts " + std::to_string(rep.params_deep_shallow) +
                      " and " + std::to_string(rep.params_equal) + " differ by more than " +
                      std::to_string(args.param_tolerance * 100.0) + "%");
  const guidance::GuidanceSpec deep{args.omega, guidance::GuidanceMode::kProposed, {true}};
  std::vector<bool> conditioned;
  for (const auto& blk : eq.blocks) conditioned.push_back(blk.conditioned());
  const guidance::GuidanceSpec all_cond{args.omega, guidance::GuidanceMode::kProposed, conditioned};
  const guidance::GuidanceSpec none{};
  rep.runs = time_sampling({{"deep_shallow", &ds, deep, {}},
                            {"equal", &eq, all_cond, {}},
                            {"equal_unguided", &eq, none, {}}},
                           args);
  rep.ratio = rep.runs[0].total_ms() / rep.runs[1].total_ms();
  if (!args.out.empty()) {
    std::ofstream f(args.out);
    if (!f) throw ConfigError("bench: cannot write '" + args.out + "'");
    f.precision(6);
    f << "model,block,layers,guided,ms\n";
    for (const auto& r : rep.runs) {
      for (std::size_t k = 0; k < r.block_ms.size(); ++k)
        f << r.model << ',' << k << ',' << r.layers[k] << ',' << (r.guided[k] ? 1 : 0) << ','
          << r.block_ms[k] << '\n';
      f << r.model << ",total,,," << r.total_ms() << '\n';
    }
  }
  return rep;
}

}  // namespace afflow::experiments
