#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dsta/checkpoint.hpp"
#include "dsta/data.hpp"
#include "dsta/inference.hpp"
#include "dsta/model.hpp"

namespace dsta {

// SGD recipe. Epochs are 1-indexed; the learning rate is divided by
// decay_factor at the start of every epoch listed in decay_epochs.
struct TrainConfig {
  std::size_t epochs = 15;
  double base_lr = 0.005;
  std::vector<std::size_t> decay_epochs{11, 14};
  double decay_factor = 10.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // Crop policy of the per-epoch validation ensemble.
  CropMode val_crops = CropMode::Random;

  void validate() const;
  // Shortened run: the schedule is cut after `n` epochs, dropping decay
  // points that fall beyond it.
  TrainConfig truncated(std::size_t n) const;
};

// Throws ContractError outside [1, epochs].
double lr_at(std::size_t epoch, const TrainConfig& tc);

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::vector<std::vector<double>> momentum;  // mirrors the parameter list
  std::mt19937_64 rng;
  double running_loss = 0.0;
  double running_accuracy = 0.0;

  static TrainState for_parameters(const std::vector<NamedTensor>& params, std::uint64_t seed);
};

// g' = g + wd * p;  buf = momentum * buf + g';  p -= lr * buf.
// Throws ContractError naming a parameter without a gradient.
void sgd_step(const std::vector<NamedTensor>& params, TrainState& state, double lr, const TrainConfig& tc);

// Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized.
// logits are [B x C] (or [C] for a single sample). Throws DataError on a label
// outside [0, C).
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = -1.0;  // negative when there is no validation split
};

// "epoch=3 step=189 lr=0.005 loss=0.41 train_acc=0.81 val_acc=0.9"
std::string format_metrics(const EpochMetrics& m);

struct TrainResult {
  Checkpoint best;         // highest validation accuracy (last epoch without a val split)
  double best_val_accuracy = -1.0;
  std::vector<EpochMetrics> log;
};

// Epoch loop: seeded shuffle, one random training clip per item, per-sample
// forward/backward, gradients summed in sample order and averaged over the
// batch, then sgd_step at lr_at(epoch). The model is updated in place.
// Throws NumericError with the step number when the loss stops being finite.
TrainResult train(Model& model, const Dataset& dataset, const TrainConfig& tc, std::ostream* log = nullptr);

}  // namespace dsta
