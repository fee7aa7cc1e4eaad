#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dirnet/data.hpp"
#include "dirnet/network.hpp"

namespace dirnet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double alpha0 = 1e-4;
  AdamConfig adam;
  double lr_floor = 1e-12;
  std::size_t plateau_window = 3;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 64;
  std::size_t prefetch_capacity = 4;
  bool log_every_iteration = false;
  bool use_roi = true;

  void validate() const;
};

struct Metrics {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  double lr = 0.0;
};

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
  double loss = 0.0;
  Tensor<float> grad;  // d loss / d probabilities
};

/// Per-class binary cross-entropy averaged over classes and over the batch,
/// on probabilities clamped to [1e-7, 1 - 1e-7]. Rows of `probs` are samples.
double cross_entropy(const Tensor<double>& probs, const std::vector<std::size_t>& labels);
LossResult cross_entropy_with_grad(const Tensor<float>& probs, const std::vector<std::size_t>& labels);

/// Same loss on explicit target rows; each row must be one-hot.
double cross_entropy(const Tensor<double>& probs, const Tensor<double>& targets);

inline constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its gradient.
void adam_step(const std::vector<Param<float>*>& params, AdamState& state, double alpha,
               const AdamConfig& cfg = {});

/// Learning rate for the next epoch given the validation-loss history.
/// Decays by 0.1 when none of the last `window - 1` losses improved on the
/// one before them; holds when the decayed value would reach `floor`.
double lr_update(std::span<const double> history, double alpha, std::size_t window = 3,
                 double floor = 1e-12);

std::size_t batches_per_epoch(std::size_t samples, std::size_t batch_size);

/// Visit order for one epoch; depends only on (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t samples, std::uint64_t seed, std::size_t epoch);

// ---------------------------------------------------------------------------
// Evaluation

/// Position of `label` when classes are sorted by decreasing probability,
/// equal probabilities ordered by class index.
std::size_t class_rank(const float* probs, std::size_t classes, std::size_t label);

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t samples = 0;
};

/// Top-k fractions and mean loss for probability rows (n, classes, 1, 1).
EvalResult score_probabilities(const Tensor<float>& probs, const std::vector<std::size_t>& labels);

EvalResult evaluate(Network<float>& net, const DatasetSplit& split, std::size_t batch_size = 64,
                    bool use_roi = true);

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  std::vector<Metrics> epochs;  // one row per epoch
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;
  std::filesystem::path csv_path;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
};

using ProgressFn = std::function<void(const Metrics&)>;

/// Trains `net` on `train`, validating on `val` after every epoch. Writes
/// metrics.csv, best.ckpt (lowest validation loss) and last.ckpt to `out_dir`.
TrainResult train(Network<float>& net, const DatasetSplit& train, const DatasetSplit& val,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const ProgressFn& progress = {});

inline constexpr const char* kMetricsHeader = "iteration,epoch,train_loss,val_loss,top1,top5,lr";

}  // namespace dirnet
