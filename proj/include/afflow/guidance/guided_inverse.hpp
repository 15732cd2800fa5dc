#pragma once

#include <span>

#include "afflow/flow/model.hpp"
#include "afflow/guidance/gaussian.hpp"

namespace afflow::guidance {

// Inverts the deep block (index 0) with guidance restricted to it. Labels are
// required. With mode kNone this is the plain conditional inverse and runs a
// single backbone pass per step.
ad::Tensor guided_deep_inverse(const flow::FlowModel& model, const ad::Tensor& z,
                               std::span<const std::size_t> labels, const GuidanceSpec& spec,
                               GuidanceStats* stats = nullptr);

// Full sampling pass where only the deep block is guided.
ad::Tensor guided_sample(const flow::FlowModel& model, std::size_t n, std::uint64_t seed,
                         std::span<const std::size_t> labels, const GuidanceSpec& spec,
                         GuidanceStats* stats = nullptr,
                         std::vector<double>* block_ms = nullptr);

}  // namespace afflow::guidance
