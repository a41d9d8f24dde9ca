#pragma once

// Optimization recipe: Adam with an inverse-square-root schedule, the joint
// objective per batch, checkpoints (parameters + optimizer state) and
// selection of the best recent checkpoints.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "slmt/checkpoint.hpp"
#include "slmt/corpus.hpp"
#include "slmt/model.hpp"
#include "slmt/objectives.hpp"
#include "slmt/rng.hpp"

namespace slmt::train {

using objectives::LossBreakdown;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Linear ramp to `peak` at `warmup`, then peak * sqrt(warmup / step). step >= 1.
double lr_at(std::uint64_t step, double peak, std::uint64_t warmup);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// Dense Adam with bias correction. A parameter without a gradient this step is
// updated as if its gradient were zero, so one that never receives a gradient
// never moves. Moments are kept in double.
template <typename T>
class Adam {
 public:
  explicit Adam(ParameterSet<T>& params, AdamOptions options = {});

  void step(double lr);
  std::uint64_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }

  // Entries optim.step, optim.m.<param>, optim.v.<param>.
  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  ParameterSet<T>* params_;
  AdamOptions options_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// Rescales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm);

template <typename T>
double grad_norm(const ParameterSet<T>& params);

struct TrainRunConfig {
  double peak_lr = 7e-4;
  std::uint64_t warmup = 400;
  std::uint64_t total_steps = 4000;
  std::size_t max_tokens = 1024;
  std::uint64_t seed = 1;
  std::uint64_t checkpoint_interval = 500;
  double clip_norm = 0.0;  // 0 disables clipping
  std::size_t keep_last = 6;
  std::size_t select_top = 3;
  std::string select_metric = "valid_ce";  // or "valid_bleu"
  AdamOptions adam;

  void validate() const;
  std::string to_text() const;
  // Applies a recognized key; returns false for keys it does not own.
  bool apply(const std::string& key, const std::string& value);
};

template <typename T>
struct StepLosses {
  ad::Tensor<T> joint;
  LossBreakdown breakdown;
  std::size_t language_skipped = 0;
};

// Forward pass and every loss term for one batch. Dropout and sampling draw
// from per-step sub-streams of `streams`, so step s is reproducible on its own.
template <typename T>
StepLosses<T> compute_losses(const TranslationModel<T>& model, const corpus::Batch& batch,
                             const RngStreams& streams, std::uint64_t step, bool training);

struct StepResult {
  std::uint64_t step = 0;
  LossBreakdown losses;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::size_t language_skipped = 0;
};

// One forward, one backward on l_joint, one Adam update. `step` is the 1-based
// index of this update. Throws NumericalError on a non-finite loss.
template <typename T>
StepResult train_step(TranslationModel<T>& model, Adam<T>& optimizer, const corpus::Batch& batch,
                      const TrainRunConfig& config, std::uint64_t step);

// Token-weighted mean cross-entropy over batches, eval mode.
template <typename T>
double validation_ce(const TranslationModel<T>& model, const std::vector<corpus::Batch>& batches);

template <typename T>
void save_parameters(const ParameterSet<T>& params, Checkpoint& ckpt);
// Every parameter must be present with its exact shape; unknown parameter
// entries (anything outside the meta./optim. namespaces) are rejected.
template <typename T>
void load_parameters(ParameterSet<T>& params, const Checkpoint& ckpt);

// Model checkpoint: meta.config, optional meta.manifest / meta.train,
// parameters, optional optimizer state.
template <typename T>
Checkpoint make_checkpoint(const TranslationModel<T>& model, const Adam<T>* optimizer,
                           const std::string& corpus_manifest, const std::string& train_config);

ModelConfig config_from_checkpoint(const Checkpoint& ckpt);

// Feeds batches in epoch order (reshuffled per epoch from the data stream) and
// owns the optimizer. Position in the stream is a pure function of the step.
template <typename T>
class Trainer {
 public:
  Trainer(TranslationModel<T>& model, TrainRunConfig config, std::vector<corpus::ParallelExample> train);

  StepResult step();
  std::uint64_t steps_done() const { return optimizer_.steps(); }
  const TrainRunConfig& config() const { return config_; }
  Adam<T>& optimizer() { return optimizer_; }
  std::uint64_t epoch() const { return epoch_; }

  // Restores parameters and optimizer state and repositions the batch stream.
  void restore(const Checkpoint& ckpt);

 private:
  void seek(std::uint64_t done);
  const corpus::Batch& next_batch();

  TranslationModel<T>* model_;
  TrainRunConfig config_;
  std::vector<corpus::ParallelExample> train_;
  Adam<T> optimizer_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<corpus::Batch> batches_;
};

struct CheckpointScore {
  std::uint64_t step = 0;
  double metric = 0.0;
};

struct Selection {
  std::vector<CheckpointScore> selected;  // best first
  double mean_metric = 0.0;
};

// Ranks the last `last_k` entries (by step) and keeps the best `top_n`; ties go
// to the later step. Throws when fewer than top_n checkpoints are available.
Selection checkpoint_select(std::vector<CheckpointScore> scores, std::size_t last_k, std::size_t top_n,
                            bool higher_is_better);

}  // namespace slmt::train
