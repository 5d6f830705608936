#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dsta/data.hpp"
#include "dsta/model.hpp"

namespace dsta {

struct Prediction {
  std::vector<std::vector<double>> clip_probabilities;  // one softmax per clip
  std::vector<double> probabilities;                    // their mean
  std::size_t predicted = 0;
  int label = 0;
};

std::vector<double> softmax_probabilities(std::span<const double> logits);
// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);

// Mean of the per-clip probability vectors and its argmax.
Prediction average_predictions(std::vector<std::vector<double>> clip_probabilities, int label);

// Maps a model-sized clip to class logits. Must be safe to call concurrently
// when evaluating with more than one thread.
using ClipClassifier = std::function<std::vector<double>(const VideoClip&)>;

ClipClassifier model_classifier(const Model& model);

// Nine-clip ensemble: 3 temporal windows x 3 crops, softmax per clip,
// probabilities averaged. Numeric errors are rethrown with the clip index.
Prediction predict(const VideoClip& video, const ClipClassifier& classify, const ModelConfig& cfg,
                   std::mt19937_64& rng, CropMode mode = CropMode::Random);
Prediction predict(const VideoClip& video, const Model& model, std::mt19937_64& rng,
                   CropMode mode = CropMode::Random);

struct EvalRecord {
  std::string id;
  int label = 0;
  std::size_t predicted = 0;
  std::vector<double> probabilities;
  std::vector<std::vector<double>> clip_probabilities;
  std::string tag;  // TP/FP/TN/FN for two-class tasks (class 1 positive)
};

struct EvalReport {
  double accuracy = 0.0;
  std::vector<EvalRecord> records;
};

struct EvalOptions {
  std::uint64_t seed = 0;
  CropMode crops = CropMode::Random;
  std::size_t threads = 1;
};

// Item i of the split is sampled with an rng derived from (seed, i), so the
// report does not depend on the thread count. Throws DataError on an empty
// split.
EvalReport evaluate(const Dataset& dataset, Split split, const ClipClassifier& classify, const ModelConfig& cfg,
                    const EvalOptions& options = {});
EvalReport evaluate(const Dataset& dataset, Split split, const Model& model, const EvalOptions& options = {});

// One "item ..." line per record, then a final "accuracy=<value>" line.
void write_report(const EvalReport& report, std::ostream& out);

}  // namespace dsta
