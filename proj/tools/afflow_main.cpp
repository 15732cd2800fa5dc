#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "afflow/errors.hpp"
#include "afflow/experiments/commands.hpp"
#include "afflow/experiments/lab.hpp"
#include "afflow/experiments/synthetic.hpp"
#include "afflow/experiments/train.hpp"

namespace ex = afflow::experiments;

namespace {

struct Shared {
  std::string config;
  std::string ckpt;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_shared(CLI::App* cmd, Shared& s, bool config, bool ckpt) {
  if (config) cmd->add_option("--config", s.config, "run configuration (JSON)");
  if (ckpt) cmd->add_option("--ckpt", s.ckpt, "checkpoint file");
  cmd->add_option("--out", s.out, "output directory or file");
  cmd->add_option("--seed", s.seed, "random seed");
}

// File outputs may name a directory that does not exist yet.
std::string output_file(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!path.empty() && !parent.empty()) std::filesystem::create_directories(parent);
  return path;
}

}  // namespace

int main(int argc, char** argv) {
  ex::configure_allocator();
  CLI::App app{"autoregressive flow toolkit"};
  app.require_subcommand(1);

  // train
  Shared tr;
  std::string tr_data;
  std::optional<std::uint64_t> tr_max_steps;
  bool tr_verbose = false;
  auto* train = app.add_subcommand("train", "train a flow; --ckpt resumes");
  add_shared(train, tr, true, true);
  train->add_option("--data", tr_data, "AFDS dataset")->required();
  train->add_option("--max-steps", tr_max_steps, "stop after this many steps in this call");
  train->add_flag("--verbose", tr_verbose);
  train->callback([&] {
    if (tr.config.empty() && tr.ckpt.empty()) throw afflow::ConfigError("train: --config or --ckpt required");
    ex::RunConfig run;
    if (!tr.config.empty()) run = ex::load_run_config(tr.config);
    if (tr.seed) run.seed = *tr.seed;
    ex::TrainOptions opt;
    opt.out_dir = tr.out.empty() ? run.out_dir : tr.out;
    if (!tr.ckpt.empty()) opt.resume = tr.ckpt;
    opt.max_steps = tr_max_steps;
    opt.verbose = tr_verbose;
    ex::train_to_dir(run, ex::load_dataset(tr_data), opt);
  });

  // sample
  Shared sa;
  ex::SampleArgs sargs;
  std::optional<std::size_t> s_class;
  std::string s_mode = "none";
  bool s_no_pgm = false;
  auto* sample = app.add_subcommand("sample", "draw samples from a checkpoint");
  add_shared(sample, sa, false, true);
  sample->add_option("-n,--count", sargs.n, "number of samples");
  sample->add_option("--class", s_class, "class label");
  sample->add_option("--omega", sargs.omega, "guidance weight");
  sample->add_option("--mode", s_mode, "guidance mode: none | proposed | legacy");
  sample->add_flag("--no-pgm", s_no_pgm, "skip decoded images");
  sample->callback([&] {
    sargs.ckpt = sa.ckpt;
    sargs.label = s_class;
    sargs.mode = afflow::guidance::parse_mode(s_mode);
    sargs.seed = sa.seed.value_or(0);
    sargs.out_dir = sa.out.empty() ? "." : sa.out;
    sargs.pgm = !s_no_pgm;
    const auto ds = ex::cmd_sample(sargs);
    std::printf("wrote %zu samples to %s/samples.afds\n", ds.n, sargs.out_dir.c_str());
  });

  // nll
  Shared nl;
  ex::NllArgs nargs;
  auto* nll = app.add_subcommand("nll", "exact negative log-likelihood of a dataset");
  add_shared(nll, nl, false, true);
  nll->add_option("--data", nargs.data, "AFDS dataset")->required();
  nll->add_option("--batch", nargs.batch, "rows per evaluation chunk");
  nll->callback([&] {
    nargs.ckpt = nl.ckpt;
    nargs.seed = nl.seed.value_or(0);
    const auto r = ex::cmd_nll(nargs);
    std::printf("n=%zu nats_per_dim=%.17g bits_per_dim=%.17g\n", r.n, r.nats_per_dim,
                r.bits_per_dim);
  });

  // inpaint
  Shared ip;
  ex::InpaintArgs iargs;
  auto* inp = app.add_subcommand("inpaint", "Metropolis-Hastings inpainting of one dataset row");
  add_shared(inp, ip, false, true);
  inp->add_option("--data", iargs.data, "AFDS dataset")->required();
  inp->add_option("--index", iargs.index, "dataset row");
  inp->add_option("--mask", iargs.mask,
                  "none | all | left-half | right-half | top-half | bottom-half | "
                  "rect:x0,y0,x1,y1 | pos:i,j,...");
  inp->add_option("--chains", iargs.chains);
  inp->add_option("--iters", iargs.iters);
  inp->add_option("--init-sigma", iargs.init_sigma);
  inp->add_option("--prop-sigma", iargs.prop_sigma);
  inp->callback([&] {
    iargs.ckpt = ip.ckpt;
    iargs.seed = ip.seed.value_or(0);
    iargs.out_dir = ip.out.empty() ? "." : ip.out;
    const auto acc = ex::cmd_inpaint(iargs);
    for (std::size_t c = 0; c < acc.size(); ++c) std::printf("chain %zu acceptance %.4f\n", c, acc[c]);
  });

  // verify-cfg
  Shared vc;
  ex::VerifyCfgArgs vargs;
  auto* verify = app.add_subcommand("verify-cfg", "check the guided Gaussian against a grid");
  add_shared(verify, vc, false, false);
  verify->add_option("--grid-points", vargs.grid_points);
  verify->add_option("--trials", vargs.trials);
  int verify_status = 0;
  verify->callback([&] {
    vargs.seed = vc.seed.value_or(0);
    vargs.out = output_file(vc.out);
    const auto r = ex::cmd_verify_cfg(vargs);
    std::printf("max_rel_err=%.3g max_precision_residual=%.3g equal_scales_exact=%d "
                "sigma_bounded=%d -> %s\n",
                r.max_rel_err, r.max_precision_residual, r.equal_scales_exact, r.sigma_bounded,
                r.pass() ? "PASS" : "FAIL");
    verify_status = r.pass() ? 0 : 1;
  });

  // universality
  Shared un;
  ex::UniversalityArgs uargs;
  auto* uni = app.add_subcommand("universality", "fit T = 1, 2, 3 stacks to the canonical 2D target");
  add_shared(uni, un, false, false);
  uni->add_option("--steps", uargs.steps);
  uni->add_option("--budget", uargs.budget_s, "seconds of training per T");
  uni->add_option("--width", uargs.width);
  uni->add_option("--layers", uargs.total_layers, "total layers split across blocks");
  uni->add_option("--blocks", uargs.blocks, "block counts to train");
  uni->callback([&] {
    uargs.seed = un.seed.value_or(0);
    uargs.out = output_file(un.out);
    for (const auto& r : ex::cmd_universality(uargs))
      std::printf("T=%zu params=%zu steps=%zu nll=%.4f truth=%.4f gap=%.4f%s\n", r.blocks,
                  r.params, r.steps, r.nll_per_dim, r.truth_per_dim, r.gap,
                  r.diverged ? " diverged" : "");
  });

  // bench
  Shared be;
  ex::BenchArgs bargs;
  auto* bench = app.add_subcommand("bench", "per-block sampling time, deep-shallow vs equal-sized");
  add_shared(bench, be, false, false);
  bench->add_option("--deep-shallow", bargs.ckpt_deep_shallow)->required();
  bench->add_option("--equal", bargs.ckpt_equal)->required();
  bench->add_option("--batch", bargs.batch);
  bench->add_option("--repeats", bargs.repeats);
  bench->add_option("--omega", bargs.omega);
  bench->callback([&] {
    bargs.seed = be.seed.value_or(0);
    bargs.out = output_file(be.out);
    const auto r = ex::cmd_bench(bargs);
    for (const auto& run : r.runs) std::printf("%s total_ms=%.2f\n", run.model.c_str(), run.total_ms());
    std::printf("ratio=%.4f\n", r.ratio);
  });

  // gen-data
  Shared gd;
  ex::GenDataArgs gargs;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic AFDS dataset");
  add_shared(gen, gd, false, false);
  gen->add_option("--kind", gargs.kind, "canonical | correlated | bars | checker | gaussians");
  gen->add_option("-n,--count", gargs.n);
  gen->add_option("--classes", gargs.classes);
  gen->add_option("--size", gargs.size);
  gen->add_option("--patch", gargs.patch);
  gen->add_option("--rho", gargs.rho);
  gen->callback([&] {
    gargs.seed = gd.seed.value_or(0);
    if (!gd.out.empty()) gargs.out = gd.out;
    output_file(gargs.out);
    const auto ds = ex::cmd_gen_data(gargs);
    std::printf("wrote %zu rows (D=%zu, C=%zu) to %s\n", ds.n, ds.positions, ds.channels,
                gargs.out.c_str());
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const afflow::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return verify_status;
}
