#pragma once
// Multi-task loss, Adam, the batch-size-1 training loop with its checkpoint
// cadence (every 50 steps, every 5 once fine-tuning starts), and selection of
// the checkpoint with the lowest validation regression MSE.

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "puuma/dataset.hpp"
#include "puuma/model.hpp"

namespace puuma {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- differentiable loss pieces ----------------------------------------

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);
Tensor soft_dice_loss(const Tensor& logits, const Tensor& targets,
                      float smooth = 1e-5f);
Tensor cce_with_logits(const Tensor& logits, int target_class);

// ---- composite loss -----------------------------------------------------

struct LossWeights {
  float w_mse = 1.0f;   // regression is the main task, must stay positive
  float w_dice = 1.0f;
  float w_bce = 1.0f;
  float w_cce = 0.5f;
  void validate() const;
};

struct TrainTarget {
  float ga_birth_weeks = 0.0f;
  PretermCategory category = PretermCategory::Term;
  Tensor mask;  // [1,D,H,W], binary
};

struct LossBreakdown {
  Tensor total;
  float mse = 0, dice = 0, bce = 0, cce = 0;  // unweighted parts
};

// total = w_mse*(ga_final-ga)^2 + w_dice*(1-softDice) + w_bce*BCE
//       + w_cce*CCE (averaged over both branch heads when present).
// Throws NumericalError with diagnostics if any part is non-finite.
LossBreakdown composite_loss(const ModelOutput& output, const TrainTarget& target,
                             const LossWeights& weights);

// ---- Adam ----------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<std::vector<float>> m, v;
};

void adam_init(AdamState& state,
               std::span<const std::pair<std::string, Tensor>> params);
// standard bias-corrected update; empty gradients count as zero
void adam_step(std::span<const std::pair<std::string, Tensor>> params,
               AdamState& state, double lr);

// ---- training loop --------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-4;  // initial; annealed by the scheduler
  double lr_floor = 1e-6;
  int total_steps = 100;
  int fine_tune_start_step = 80;
  int checkpoint_every = 50;
  int fine_tune_checkpoint_every = 5;
  int val_every = 0;  // 0: validation only during select_best
  uint64_t seed = 0;
  LossWeights loss_weights;
  AugmentConfig augment;
  int sw_stride = 4;  // sliding-window stride for validation MSE

  void validate() const;
};

// cosine annealing from learning_rate at t=0 to lr_floor at t=total_steps
double scheduled_lr(const TrainConfig& cfg, int t);

// init checkpoint at step 0, then per step s: every `checkpoint_every` steps
// until fine_tune_start_step, every `fine_tune_checkpoint_every` after it
bool checkpoint_due(const TrainConfig& cfg, int step);

struct HistoryRow {
  int step = 0;
  double lr = 0;
  float total = 0, mse = 0, dice = 0, bce = 0, cce = 0;
  std::optional<float> val_mse;
};

struct TrainResult {
  std::vector<std::string> checkpoint_paths;
  std::vector<int> checkpoint_steps;
  std::vector<HistoryRow> history;
  bool finite = true;  // false when a non-finite loss aborted training
};

// One case per step drawn class-balanced, augmented, one placental patch;
// forward, composite loss, backprop, Adam with the scheduled rate.
TrainResult train(Model& model, const Dataset& dataset, const TrainConfig& cfg,
                  const std::string& out_dir);

// step,lr,total_loss,mse,dice,bce,cce,val_mse (blank when not evaluated)
void write_history_csv(const std::string& path,
                       std::span<const HistoryRow> history);

// Re-evaluates every checkpoint's validation MSE of ga_final via sliding
// window inference; returns the argmin, ties broken by the later step.
Model select_best(std::span<const std::string> checkpoint_paths,
                  std::span<const int> checkpoint_steps, const Dataset& dataset,
                  std::span<const size_t> val_indices, int stride,
                  double* best_mse = nullptr, int* best_step = nullptr);

}  // namespace puuma
