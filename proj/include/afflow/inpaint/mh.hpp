#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "afflow/autodiff/tensor.hpp"
#include "afflow/flow/model.hpp"
#include "afflow/rng.hpp"

namespace afflow::inpaint {

using ad::Tensor;

// Invertible density over [B, D, C] rows. Rows must be independent.
class DensityModel {
 public:
  virtual ~DensityModel() = default;
  // z and exact log p(x) per row
  virtual std::pair<Tensor, std::vector<double>> forward(const Tensor& x) const = 0;
  virtual Tensor inverse(const Tensor& z) const = 0;
};

// Wraps a flow; an optional class label conditions every row.
class FlowDensity : public DensityModel {
 public:
  explicit FlowDensity(const flow::FlowModel& model, std::optional<std::size_t> label = {})
      : model_(model), label_(label) {}
  std::pair<Tensor, std::vector<double>> forward(const Tensor& x) const override;
  Tensor inverse(const Tensor& z) const override;

 private:
  std::vector<std::size_t> labels(std::size_t rows) const;
  const flow::FlowModel& model_;
  std::optional<std::size_t> label_;
};

struct InpaintTask {
  Tensor x_obs;                // [D, C]; values under the mask are ignored
  std::vector<uint8_t> mask;   // D*C entries, 1 = missing
  double init_sigma = 1.0;
  double prop_sigma = 1.0;
  std::size_t iters = 20;
};

void validate(const InpaintTask& task);

inline constexpr int kMaxInitRetries = 10;

// One chain per batch row; every row carries its own generator.
struct ChainState {
  Tensor x;                  // [B, D, C], context equals x_obs
  Tensor z;                  // f(x)
  std::vector<double> logp;  // log p(x)
};

// Row r draws from rngs[r]. Rows with non-finite logp are redrawn up to
// kMaxInitRetries times; NumericError after that.
ChainState mh_init(const InpaintTask& task, const DensityModel& model, std::vector<Rng>& rngs);

struct Proposal {
  Tensor x;
  Tensor z;
  std::vector<double> logp;
};

Proposal mh_propose(const ChainState& state, const InpaintTask& task, const DensityModel& model,
                    std::vector<Rng>& rngs);

// Metropolis rule: accept iff u < exp(min(0, logp_new - logp_old)).
// A non-finite logp_new is a rejection.
bool mh_accept(double logp_new, double logp_old, double u);
double acceptance_probability(double logp_new, double logp_old);

struct TraceRow {
  std::size_t chain = 0;
  std::size_t iter = 0;
  double logp = 0.0;
  bool accepted = false;
  double acceptance_rate_cum = 0.0;
};

struct InpaintResult {
  Tensor samples;                   // [chains, D, C]
  std::vector<double> acceptance;   // per chain
  std::vector<TraceRow> trace;      // chain-major, iters rows per chain
};

// Runs `chains` chains in lockstep; chain i uses seed base_seed + i.
InpaintResult inpaint(const InpaintTask& task, const DensityModel& model,
                      std::uint64_t base_seed, std::size_t chains = 1);

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace);

}  // namespace afflow::inpaint
