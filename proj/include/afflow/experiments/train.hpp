#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "afflow/autodiff/optim.hpp"
#include "afflow/experiments/dataset.hpp"
#include "afflow/experiments/run_config.hpp"
#include "afflow/flow/checkpoint.hpp"
#include "afflow/flow/model.hpp"
#include "afflow/latent/autoencoder.hpp"

namespace afflow::experiments {

struct StepMetrics {
  std::uint64_t step = 0;
  double nll_nats_per_dim = 0.0;
  double bits_per_dim = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

// Checks that the dataset rows fit the run: pixel images for latent runs,
// flow-shaped rows otherwise, labels for class-conditional flows.
void check_dataset(const RunConfig& run, const Dataset& data);

// Batch for 1-based step t: rows, noisy flow inputs and (possibly dropped)
// labels. Depends only on (seed, t) so resumed runs see the same batches.
struct Batch {
  ad::Tensor x;
  std::vector<std::size_t> labels;
};
Batch make_batch(const RunConfig& run, const Dataset& data, const latent::ToyAutoencoder* ae,
                 std::uint64_t step);

// Flow inputs for the whole dataset with fresh noise from seed.
ad::Tensor flow_inputs(const RunConfig& run, const Dataset& data, const latent::ToyAutoencoder* ae,
                       std::size_t begin, std::size_t end, std::uint64_t seed);

class Trainer {
 public:
  Trainer(const RunConfig& run, const Dataset& data);
  // Restores params, moments, step and decoder from a checkpoint.
  Trainer(const flow::Checkpoint& ckpt, const Dataset& data);

  StepMetrics step();
  bool finished() const { return step_ >= run_.total_steps(); }
  // Runs decoder finetuning (latent runs); returns per-step MSE.
  std::vector<double> finetune_decoder();

  flow::Checkpoint checkpoint();
  const RunConfig& run() const { return run_; }
  std::uint64_t steps_done() const { return step_; }
  flow::FlowModel& model() { return model_; }
  const std::optional<latent::ToyAutoencoder>& autoencoder() const { return ae_; }
  bool decoder_finetuned() const { return decoder_done_; }

 private:
  RunConfig run_;
  const Dataset& data_;
  flow::FlowModel model_;
  ad::OptimState opt_;
  std::optional<latent::ToyAutoencoder> ae_;
  std::uint64_t step_ = 0;
  bool decoder_done_ = false;
};

// Autoencoder stored in a checkpoint (enc.* and dec.* records), if any.
std::optional<latent::ToyAutoencoder> autoencoder_from_checkpoint(const flow::Checkpoint& ckpt);
RunConfig run_from_checkpoint(const flow::Checkpoint& ckpt);

struct TrainOptions {
  std::string out_dir;
  std::optional<std::string> resume;
  std::optional<std::uint64_t> max_steps;  // steps to run in this invocation
  bool verbose = false;
};

// Writes metrics.csv, timing.csv, config.json and checkpoint.afck under
// out_dir. On a non-finite loss the last checkpoint is kept and the
// NumericError propagates.
void train_to_dir(const RunConfig& run, const Dataset& data, const TrainOptions& options);

}  // namespace afflow::experiments
