#include "afflow/guidance/guided_inverse.hpp"

#include "afflow/errors.hpp"

namespace afflow::guidance {

namespace {

GuidanceSpec deep_only(const GuidanceSpec& spec) {
  if (!(spec.omega >= 0.0)) throw DomainError("guidance: omega must be nonnegative");
  GuidanceSpec s = spec;
  s.blocks = {true};
  return s;
}

}  // namespace

ad::Tensor guided_deep_inverse(const flow::FlowModel& model, const ad::Tensor& z,
                               std::span<const std::size_t> labels, const GuidanceSpec& spec,
                               GuidanceStats* stats) {
  if (model.blocks.empty()) throw ConfigError("guided_deep_inverse: model has no blocks");
  if (labels.empty()) throw ConfigError("guided_deep_inverse: a condition is required");
  const GuidanceSpec s = deep_only(spec);
  return flow::af_inverse(model, 0, z, labels, &s, stats);
}

ad::Tensor guided_sample(const flow::FlowModel& model, std::size_t n, std::uint64_t seed,
                         std::span<const std::size_t> labels, const GuidanceSpec& spec,
                         GuidanceStats* stats, std::vector<double>* block_ms) {
  if (labels.empty()) throw ConfigError("guided_sample: a condition is required");
  const GuidanceSpec s = deep_only(spec);
  return flow::stack_sample(model, n, seed, labels, &s, stats, block_ms);
}

}  // namespace afflow::guidance
