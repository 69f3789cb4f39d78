#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spotlight/checkpoint.hpp"
#include "spotlight/model.hpp"
#include "spotlight/pathway.hpp"

namespace spotlight {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  double train_fraction = 0.8;
  // Free-running accuracy on the training split each epoch (one extra
  // forward pass per item).
  bool train_accuracy = true;
  // After each epoch, reset batch-norm running statistics to population
  // statistics over the training split.
  bool recalibrate_bn = true;

  // Throws ConfigError unless 0 < train_fraction < 1 and epochs, batch
  // size, rates and clip norm are sensible.
  void validate() const;
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct Split {
  std::vector<std::size_t> train;  // item indices, ascending
  std::vector<std::size_t> test;
};

// Splits items so that no patient id lands on both sides. When strata are
// given (one per item), each stratum with at least two patients gets a test
// member when the test size allows it. Throws SplitError when either side
// would be empty.
Split split_dataset(std::span<const std::string> patient_ids, std::span<const std::string> strata,
                    double train_fraction, std::uint64_t seed);

// L2 norm over all parameter gradients.
double gradient_norm(std::span<const Tensor> params);
// Scales gradients so their global norm is at most max_norm; returns the
// factor applied (1 when no clipping happened).
double clip_gradients(std::span<const Tensor> params, double max_norm);

OptimizerState make_optimizer_state(std::span<const Tensor> params);

// Clips, then applies one bias-corrected Adam step using each parameter's
// gradient. Throws DivergenceError on a non-finite gradient; parameters are
// left untouched in that case.
void update_parameters(std::span<Tensor> params, OptimizerState& state, const TrainConfig& config);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double test_loss = 0.0;       // NaN without a test split
  double train_accuracy = 0.0;  // NaN when not computed
  double test_accuracy = 0.0;   // NaN without a test split
};

struct TrainingState {
  ParameterSet params;
  OptimizerState optimizer;
};

struct FitResult {
  TrainingState final_state;
  ParameterSet best_params;
  std::size_t best_epoch = 0;  // 0: the initial parameters
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&, const TrainingState&, bool improved)>;

// Exact-sequence accuracy of free-running predictions.
double sequence_accuracy(const ModelConfig& config, const ParameterSet& params,
                         std::span<const LabeledInput> items);
// Mean teacher-forced loss with eval-mode batch norm.
double evaluate_loss(const ModelConfig& config, const ParameterSet& params,
                     std::span<const LabeledInput> items, std::size_t batch_size);

// Epochs of shuffled mini-batches (train-mode batch norm). Shuffling for
// epoch e uses mix_seed(seed, e), so resuming from a saved state replays
// the uninterrupted run. `start` resumes training; otherwise parameters are
// initialized from the seed. Throws DivergenceError on a non-finite loss or
// gradient; the callback has already seen every completed epoch.
FitResult fit(const ModelConfig& model, const TrainConfig& config, std::span<const LabeledInput> train,
              std::span<const LabeledInput> test, std::optional<TrainingState> start = std::nullopt,
              const EpochCallback& on_epoch = {});

// epoch,train_loss,test_loss,seq_accuracy (test accuracy, or train accuracy
// without a test split).
std::string epoch_log_csv(std::span<const EpochLog> log);

// Labeled inputs for every image; images with an empty condition row are
// skipped and their ids returned through `skipped` when given.
std::vector<LabeledInput> prepare_inputs(std::span<const PathwayImage> images, const DimensionConfig& dims,
                                         const LabelSpace& labels, std::size_t max_len,
                                         std::vector<std::string>* skipped = nullptr);

}  // namespace spotlight
