#include "dsta/inference.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "dsta/errors.hpp"
#include "parallel.hpp"

namespace dsta {

std::vector<double> softmax_probabilities(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax of an empty logit vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - mx);
  for (auto& v : p) v /= total;
  return p;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Prediction average_predictions(std::vector<std::vector<double>> clip_probabilities, int label) {
  if (clip_probabilities.empty()) throw ContractError("average_predictions: no clips");
  const auto classes = clip_probabilities.front().size();
  Prediction pred;
  pred.label = label;
  pred.probabilities.assign(classes, 0.0);
  for (const auto& p : clip_probabilities) {
    if (p.size() != classes) throw DimensionError("average_predictions: clips disagree on the class count");
    for (std::size_t c = 0; c < classes; ++c) pred.probabilities[c] += p[c];
  }
  for (auto& v : pred.probabilities) v /= static_cast<double>(clip_probabilities.size());
  pred.predicted = argmax(pred.probabilities);
  pred.clip_probabilities = std::move(clip_probabilities);
  return pred;
}

ClipClassifier model_classifier(const Model& model) {
  return [&model](const VideoClip& clip) {
    Tape tape(false);
    auto logits = forward(tape, model, clip.pixels);
    return std::vector<double>(logits.data().begin(), logits.data().end());
  };
}

Prediction predict(const VideoClip& video, const ClipClassifier& classify, const ModelConfig& cfg,
                   std::mt19937_64& rng, CropMode mode) {
  const auto clips = sample_inference_clips(video, cfg, rng, mode);
  std::vector<std::vector<double>> probs;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    try {
      probs.push_back(softmax_probabilities(classify(clips[i])));
    } catch (const NumericError& e) {
      throw NumericError("clip " + std::to_string(i) + " of " + video.source_id + ": " + e.what());
    }
  }
  return average_predictions(std::move(probs), video.label);
}

Prediction predict(const VideoClip& video, const Model& model, std::mt19937_64& rng, CropMode mode) {
  return predict(video, model_classifier(model), model.config, rng, mode);
}

namespace {

std::mt19937_64 item_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x65u};
  return std::mt19937_64(seq);
}

}  // namespace

EvalReport evaluate(const Dataset& dataset, Split split, const ClipClassifier& classify, const ModelConfig& cfg,
                    const EvalOptions& options) {
  const auto items = dataset.split(split);
  if (items.empty()) throw DataError("evaluate: the " + std::string(split_name(split)) + " split is empty");

  EvalReport report;
  report.records.resize(items.size());
  detail::parallel_for(items.size(), options.threads, [&](std::size_t i, std::size_t) {
    auto rng = item_rng(options.seed, i);
    auto pred = predict(items[i]->video, classify, cfg, rng, options.crops);
    auto& r = report.records[i];
    r.id = items[i]->video.source_id;
    r.label = pred.label;
    r.predicted = pred.predicted;
    r.probabilities = std::move(pred.probabilities);
    r.clip_probabilities = std::move(pred.clip_probabilities);
    if (r.probabilities.size() == 2) {
      const bool positive = r.predicted == 1;
      const bool correct = static_cast<int>(r.predicted) == r.label;
      r.tag = std::string(correct ? "T" : "F") + (positive ? "P" : "N");
    }
  });
  std::size_t correct = 0;
  for (const auto& r : report.records) correct += static_cast<int>(r.predicted) == r.label;
  report.accuracy = static_cast<double>(correct) / static_cast<double>(report.records.size());
  return report;
}

EvalReport evaluate(const Dataset& dataset, Split split, const Model& model, const EvalOptions& options) {
  return evaluate(dataset, split, model_classifier(model), model.config, options);
}

void write_report(const EvalReport& report, std::ostream& out) {
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::setprecision(17);
  auto list = [&](const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
  };
  for (const auto& r : report.records) {
    out << "item id=" << r.id << " label=" << r.label << " predicted=" << r.predicted << " probs=";
    list(r.probabilities);
    if (!r.tag.empty()) out << " tag=" << r.tag;
    out << " clips=";
    for (std::size_t c = 0; c < r.clip_probabilities.size(); ++c) {
      if (c) out << ';';
      list(r.clip_probabilities[c]);
    }
    out << '\n';
  }
  out << std::fixed << std::setprecision(6) << "accuracy=" << report.accuracy << '\n';
  out.flags(flags);
  out.precision(precision);
}

}  // namespace dsta
