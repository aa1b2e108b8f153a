#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spcl/encoder.hpp"
#include "spcl/partition.hpp"
#include "spcl/patching.hpp"
#include "spcl/tsp_loss.hpp"

namespace spcl {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;   // images per micro-batch
  std::size_t accum_steps = 1;   // micro-batches per optimizer step
  double lr_peak = 1.5e-4 * 32.0 / 256.0;
  std::int64_t warmup_steps = -1;  // -1: 5% of total_steps
  std::int64_t total_steps = -1;   // -1: epochs × steps per epoch
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double mask_ratio = 0.6;
  double kappa = 1.0;
  double tau_init = 10.0;
  double tau_min = 1.0;
  double tau_max = 100.0;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t threads = 1;           // 1: sequential, bit-reproducible

  void validate() const;
  // Optimizer steps per epoch over a dataset of `dataset_size` images.
  std::size_t steps_per_epoch(std::size_t dataset_size) const;
  // Copy with warmup_steps/total_steps filled in.
  TrainConfig resolved(std::size_t dataset_size) const;
  LossParams loss_params() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// First/second moment buffers aligned with trainable_refs() order.
struct OptState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  friend bool operator==(const OptState&, const OptState&) = default;
};

struct StreamState {
  std::string name;
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  friend bool operator==(const StreamState&, const StreamState&) = default;
};

/// Everything needed to continue a run: the contents of a checkpoint.
struct TrainState {
  EncoderConfig encoder;
  TrainConfig train;
  EncoderParams params;
  LossParams loss;
  OptState opt;
  std::uint64_t step = 0;
  std::vector<StreamState> streams;

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

/// Encoder parameters followed by theta_tau: the full trainable set.
struct Gradients {
  std::vector<Tensor> encoder;
  float theta_tau = 0.0f;
};

struct LossSummary {
  double total = 0.0;
  std::vector<double> per_anchor;
  double mean_pos_sim = 0.0;
  double mean_neg_sim = 0.0;
  double tau = 0.0;
  double collapse_value = 0.0;  // total at the all-identical point, ln(2N−1)
};

struct ObjectiveResult {
  LossSummary loss;
  Gradients grads;
};

struct StepReport {
  std::uint64_t step = 0;
  LossSummary loss;
  double lr = 0.0;
};

TrainState init_state(const EncoderConfig& encoder, const TrainConfig& train);

// Trainable tensor count: one encoder plus theta_tau.
std::size_t trainable_parameter_count(const TrainState& state);

/// Linear warmup from 0 to lr_peak, then cosine decay to 0 at total_steps.
/// `cfg` must be resolved.
double lr_at(std::int64_t step, const TrainConfig& cfg);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One decoupled-weight-decay Adam update. `step` is 1-based (bias
/// correction). Throws NumericalError on a non-finite gradient without
/// touching anything.
void adamw_update(std::span<float> param, std::span<const float> grad, std::span<float> m,
                  std::span<float> v, double lr, const AdamWHyper& hyper, std::uint64_t step,
                  bool decay);
void adamw_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, double lr,
                  const AdamWHyper& hyper, std::uint64_t step, bool decay);

/// Plan for image `image_id` at optimizer step `step`.
PartitionPlan plan_for(std::uint64_t seed, std::uint64_t step, std::uint64_t image_id,
                       std::size_t num_tokens, double mask_ratio);

/// Builds the whole objective on one graph: tokenize → partition → shared
/// encoder → L2 normalize → batch_loss. Rows of Z are (z1, z2) per image.
BatchLossReport build_objective(const BoundEncoder& enc, Var theta, const LossParams& loss,
                                std::span<const ImageGray> images,
                                std::span<const PartitionPlan> plans);

/// Loss and gradients of build_objective, computed in stages: per-worker
/// encoder graphs, a separate loss graph over the gathered embeddings, then
/// per-worker backward passes seeded with the embedding gradients.
/// threads == 1 is the sequential, bit-reproducible path.
ObjectiveResult compute_objective(const EncoderConfig& cfg, const EncoderParams& params,
                                  const LossParams& loss, std::span<const ImageGray> images,
                                  std::span<const PartitionPlan> plans, std::size_t threads = 1);

/// Applies gradient `g` to the trainable set with lr_at(state.opt.step).
/// Returns the learning rate used.
double apply_update(TrainState& state, const Gradients& g);

/// One optimizer step over `batch` (split into accum_steps micro-batches,
/// gradients averaged). `ids` are dataset indices used to derive plans.
StepReport train_step(TrainState& state, std::span<const ImageGray> batch,
                      std::span<const std::uint64_t> ids);

struct MetricsRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double tau = 0.0;
  double mean_pos_sim = 0.0;
  double mean_neg_sim = 0.0;
  double lr = 0.0;
};

std::string format_metrics_row(const MetricsRow& row);
inline constexpr const char* kMetricsHeader = "step\tloss\ttau\tmean_pos_sim\tmean_neg_sim\tlr";

struct PretrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics + checkpoints; none: in-memory
  std::optional<std::uint64_t> stop_at_step;     // stop before this step
  std::function<void(const std::string&)> log;   // progress/warnings
};

struct PretrainResult {
  TrainState state;
  std::vector<MetricsRow> metrics;
  bool collapse_warned = false;
};

/// Runs (or resumes, when state.step > 0) pre-training until total_steps.
/// Writes metrics.tsv, checkpoint-<step>.spcl every checkpoint_every steps
/// and checkpoint-last.spcl. A non-finite loss throws NumericalError and
/// leaves the last good checkpoint in place.
PretrainResult pretrain(std::span<const ImageGray> dataset, TrainState state,
                        const PretrainOptions& options = {});

// Consecutive near-collapse steps before a warning is raised.
inline constexpr std::size_t kCollapseWindow = 50;

}  // namespace spcl
