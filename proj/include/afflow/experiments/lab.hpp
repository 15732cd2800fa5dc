#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afflow/experiments/run_config.hpp"

namespace afflow::experiments {

// ---- guidance verifier ----

struct VerifyCfgArgs {
  std::size_t grid_points = 2001;
  std::size_t trials = 1000;
  std::uint64_t seed = 0;
  std::string out;  // CSV path; empty skips the file
};

struct VerifyCase {
  double mu_c, sigma_c, mu_u, sigma_u, omega, s;
  double max_rel_err;        // closed form vs normalized grid tilt
  double precision_residual;  // 1/sigma~^2 - [(1+w)/sigma_c^2 - w/sigma_u^2], relative
};

struct VerifyCfgReport {
  std::vector<VerifyCase> cases;
  double max_rel_err = 0.0;
  double max_precision_residual = 0.0;
  bool equal_scales_exact = false;  // s = 1 gives mu_c + w (mu_c - mu_u), sigma_c bit for bit
  bool sigma_bounded = false;       // sigma~ <= sigma_c on every case, clipped ones included
  bool pass(double rel_tol = 1e-6, double precision_tol = 1e-12) const;
};

// Density of p_c^(1+w) p_u^(-w) normalized numerically on a grid. Returns
// the grid and the normalized density.
struct TiltGrid {
  std::vector<double> x;
  std::vector<double> density;
};
TiltGrid normalized_tilt(double mu_c, double sigma_c, double mu_u, double sigma_u, double omega,
                         std::size_t points);

VerifyCfgReport cmd_verify_cfg(const VerifyCfgArgs& args);

// ---- universality lab ----

struct UniversalityArgs {
  std::vector<std::size_t> blocks{1, 2, 3};
  std::size_t total_layers = 6;  // split evenly across blocks
  std::size_t width = 32;
  std::size_t head_dim = 16;
  std::size_t steps = 3000;
  std::size_t batch = 256;
  double lr = 2e-3;
  double budget_s = 600.0;  // per T; training stops early when exceeded
  std::size_t train_n = 50000;
  std::size_t eval_n = 20000;
  std::uint64_t seed = 0;
  std::string out;  // CSV path; empty skips the file
};

struct UniversalityRow {
  std::size_t blocks = 0;
  std::size_t params = 0;
  std::size_t steps = 0;
  double train_s = 0.0;
  double nll_per_dim = 0.0;
  double truth_per_dim = 0.0;
  double gap = 0.0;
  bool diverged = false;
};

std::vector<UniversalityRow> cmd_universality(const UniversalityArgs& args);

// ---- deep-shallow timing ----

struct BenchArgs {
  std::string ckpt_deep_shallow;
  std::string ckpt_equal;
  std::size_t batch = 16;
  std::size_t repeats = 5;
  double omega = 1.0;
  std::uint64_t seed = 0;
  double param_tolerance = 0.05;
  std::string out;  // CSV path; empty skips the file
};

struct BenchRun {
  std::string model;  // deep_shallow | equal | equal_unguided
  std::vector<std::size_t> layers;
  std::vector<bool> guided;
  std::vector<double> block_ms;  // minimum over repeats
  double total_ms() const;
};

struct BenchReport {
  std::size_t params_deep_shallow = 0;
  std::size_t params_equal = 0;
  std::vector<BenchRun> runs;
  double ratio = 0.0;  // deep_shallow total / equal total
};

BenchReport cmd_bench(const BenchArgs& args);

}  // namespace afflow::experiments
