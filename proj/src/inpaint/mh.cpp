#include "afflow/inpaint/mh.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <iomanip>
#include <ostream>
#include <string>
#include <tuple>

#include "afflow/errors.hpp"
#include "afflow/rng.hpp"

namespace afflow::inpaint {

std::vector<std::size_t> FlowDensity::labels(std::size_t rows) const {
  if (!label_) return {};
  return std::vector<std::size_t>(rows, *label_);
}

std::pair<Tensor, std::vector<double>> FlowDensity::forward(const Tensor& x) const {
  const auto lab = labels(x.extent(0));
  flow::AfForward f = flow::stack_forward(model_, x, lab);
  const std::size_t per = model_.config.dims();
  const double log_norm = -0.5 * static_cast<double>(per) * std::log(2.0 * std::numbers::pi);
  const auto zv = f.z.values();
  std::vector<double> logp(x.extent(0));
  for (std::size_t r = 0; r < logp.size(); ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < per; ++i) sq += zv[r * per + i] * zv[r * per + i];
    logp[r] = -0.5 * sq + log_norm + f.logdet.at(r);
  }
  return {f.z, logp};
}

Tensor FlowDensity::inverse(const Tensor& z) const {
  const auto lab = labels(z.extent(0));
  return flow::stack_inverse(model_, z, lab);
}

void validate(const InpaintTask& task) {
  if (task.x_obs.rank() != 2) throw ShapeError("inpaint: x_obs must be [D, C]");
  if (task.mask.size() != task.x_obs.size())
    throw ShapeError("inpaint: mask has " + std::to_string(task.mask.size()) +
                     " entries for " + std::to_string(task.x_obs.size()) + " values");
  for (uint8_t m : task.mask)
    if (m > 1) throw DomainError("inpaint: mask entries must be 0 or 1");
  if (!(task.init_sigma >= 0.0) || !(task.prop_sigma >= 0.0))
    throw DomainError("inpaint: proposal scales must be nonnegative");
}

namespace {

// x_obs outside the mask, fill(r, i) inside
template <class Fill>
Tensor with_context(const InpaintTask& task, std::size_t rows, Fill fill) {
  const std::size_t per = task.x_obs.size();
  Tensor x({rows, task.x_obs.extent(0), task.x_obs.extent(1)});
  auto xv = x.mutable_values();
  const auto obs = task.x_obs.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < per; ++i)
      xv[r * per + i] = task.mask[i] ? fill(r, i) : obs[i];
  return x;
}

void copy_row(const Tensor& src, Tensor& dst, std::size_t r) {
  const std::size_t per = src.size() / src.extent(0);
  const auto s = src.values();
  auto d = dst.mutable_values();
  std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(r * per), per,
              d.begin() + static_cast<std::ptrdiff_t>(r * per));
}

}  // namespace

ChainState mh_init(const InpaintTask& task, const DensityModel& model, std::vector<Rng>& rngs) {
  validate(task);
  const std::size_t rows = rngs.size();
  ChainState s;
  s.x = with_context(task, rows,
                     [&](std::size_t r, std::size_t) { return task.init_sigma * rngs[r].normal(); });
  for (int attempt = 0;; ++attempt) {
    auto [z, logp] = model.forward(s.x);
    s.z = z;
    s.logp = logp;
    std::vector<std::size_t> bad;
    for (std::size_t r = 0; r < rows; ++r)
      if (!std::isfinite(s.logp[r])) bad.push_back(r);
    if (bad.empty()) return s;
    if (attempt == kMaxInitRetries)
      throw NumericError("mh_init: non-finite log-likelihood after " +
                         std::to_string(kMaxInitRetries) + " retries");
    Tensor fresh = with_context(task, rows, [&](std::size_t r, std::size_t) {
      return task.init_sigma * rngs[r].normal();
    });
    for (std::size_t r : bad) copy_row(fresh, s.x, r);
  }
}

Proposal mh_propose(const ChainState& state, const InpaintTask& task, const DensityModel& model,
                    std::vector<Rng>& rngs) {
  const std::size_t rows = rngs.size();
  const std::size_t per = task.x_obs.size();
  Tensor z = state.z.clone();
  auto zv = z.mutable_values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < per; ++i)
      if (task.mask[i]) zv[r * per + i] = zv[r * per + i] + task.prop_sigma * rngs[r].normal();
  const Tensor x = model.inverse(z);
  const auto xv = x.values();
  Proposal p;
  p.x = with_context(task, rows, [&](std::size_t r, std::size_t i) { return xv[r * per + i]; });
  std::tie(p.z, p.logp) = model.forward(p.x);
  return p;
}

double acceptance_probability(double logp_new, double logp_old) {
  if (!std::isfinite(logp_new)) return 0.0;
  return std::exp(std::min(0.0, logp_new - logp_old));
}

bool mh_accept(double logp_new, double logp_old, double u) {
  return u < acceptance_probability(logp_new, logp_old);
}

InpaintResult inpaint(const InpaintTask& task, const DensityModel& model, std::uint64_t base_seed,
                      std::size_t chains) {
  validate(task);
  if (chains == 0) throw DomainError("inpaint: at least one chain required");
  std::vector<Rng> rngs;
  rngs.reserve(chains);
  for (std::size_t c = 0; c < chains; ++c) rngs.emplace_back(base_seed + c);
  ChainState state = mh_init(task, model, rngs);
  std::vector<std::size_t> accepted(chains, 0);
  std::vector<std::vector<TraceRow>> per_chain(chains);
  const bool any_missing = std::find(task.mask.begin(), task.mask.end(), 1) != task.mask.end();
  for (std::size_t it = 1; it <= task.iters; ++it) {
    std::vector<bool> take(chains, false);
    Proposal p;
    if (any_missing) {
      p = mh_propose(state, task, model, rngs);
      for (std::size_t c = 0; c < chains; ++c)
        take[c] = mh_accept(p.logp[c], state.logp[c], rngs[c].uniform());
    }
    for (std::size_t c = 0; c < chains; ++c) {
      if (take[c]) {
        copy_row(p.x, state.x, c);
        copy_row(p.z, state.z, c);
        state.logp[c] = p.logp[c];
        ++accepted[c];
      }
      per_chain[c].push_back({c, it, state.logp[c], take[c],
                              static_cast<double>(accepted[c]) / static_cast<double>(it)});
    }
  }
  InpaintResult out;
  out.samples = state.x;
  for (std::size_t c = 0; c < chains; ++c) {
    out.acceptance.push_back(task.iters ? static_cast<double>(accepted[c]) /
                                              static_cast<double>(task.iters)
                                        : 0.0);
    out.trace.insert(out.trace.end(), per_chain[c].begin(), per_chain[c].end());
  }
  return out;
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  out << "chain,iter,logp,accepted,acceptance_rate_cum\n";
  out << std::setprecision(17);
  for (const auto& r : trace)
    out << r.chain << ',' << r.iter << ',' << r.logp << ',' << (r.accepted ? 1 : 0) << ','
        << r.acceptance_rate_cum << '\n';
}

}  // namespace afflow::inpaint
