#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "afflow/autodiff/optim.hpp"
#include "afflow/autodiff/tensor.hpp"
#include "afflow/flow/model.hpp"

namespace afflow::flow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Tensor tensor;
};

// AFCK container: magic, u32 version, u32 length + JSON text, then tensor
// records (u32 name length, name, u32 rank, u32 extents, f32 LE payload).
// All integers little-endian.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> records;

  const Tensor* find(const std::string& name) const;
  const Tensor& require(const std::string& name) const;  // FormatError if absent
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

// meta["flow"] holds the config; parameters use their named_params names and
// optimizer moments go under "opt.m." / "opt.v.". meta["opt_step"] keeps the
// step count.
Checkpoint flow_checkpoint(FlowModel& model, const ad::OptimState* opt = nullptr);
FlowModel model_from_checkpoint(const Checkpoint& ckpt);
// Restores moments for the tensors of named_params(model), in that order.
ad::OptimState optimizer_from_checkpoint(const Checkpoint& ckpt, FlowModel& model,
                                         const ad::AdamWConfig& config);

}  // namespace afflow::flow
