#include "dsta/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "dsta/errors.hpp"
#include "parallel.hpp"

namespace dsta {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (epochs < 1) fail("need at least one epoch");
  if (!(base_lr >= 0.0)) fail("learning rate must be non-negative");
  if (!(decay_factor > 0.0)) fail("decay factor must be positive");
  if (!(momentum >= 0.0) || !(weight_decay >= 0.0)) fail("momentum and weight decay must be non-negative");
  if (batch_size < 1) fail("batch size must be at least 1");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] < 1 || decay_epochs[i] > epochs) {
      fail("decay epoch " + std::to_string(decay_epochs[i]) + " outside [1, " + std::to_string(epochs) + "]");
    }
    if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]) fail("decay epochs must be strictly increasing");
  }
}

TrainConfig TrainConfig::truncated(std::size_t n) const {
  TrainConfig out = *this;
  out.epochs = n;
  std::erase_if(out.decay_epochs, [n](std::size_t e) { return e > n; });
  return out;
}

double lr_at(std::size_t epoch, const TrainConfig& tc) {
  if (epoch < 1 || epoch > tc.epochs) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(tc.epochs) + "]");
  }
  double lr = tc.base_lr;
  for (auto e : tc.decay_epochs) {
    if (epoch >= e) lr /= tc.decay_factor;
  }
  return lr;
}

TrainState TrainState::for_parameters(const std::vector<NamedTensor>& params, std::uint64_t seed) {
  TrainState s;
  for (const auto& [name, t] : params) s.momentum.emplace_back(t.numel(), 0.0);
  s.rng.seed(seed);
  return s;
}

void sgd_step(const std::vector<NamedTensor>& params, TrainState& state, double lr, const TrainConfig& tc) {
  if (state.momentum.size() != params.size()) throw ContractError("sgd_step: momentum buffers do not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    if (!p.has_grad()) throw ContractError("sgd_step: parameter " + params[i].first + " has no gradient");
    auto& buf = state.momentum[i];
    if (buf.size() != p.numel()) throw ContractError("sgd_step: momentum buffer of " + params[i].first + " is stale");
    auto values = p.data();
    auto grad = p.grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j] + tc.weight_decay * values[j];
      buf[j] = tc.momentum * buf[j] + g;
      values[j] -= lr * buf[j];
    }
  }
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  const Tensor x = logits.rank() == 1 ? logits.reshaped({1, logits.dim(0)}) : logits;
  if (x.rank() != 2) throw DimensionError("cross_entropy: logits must be [B x C], got " + shape_to_string(x.shape()));
  const auto B = x.dim(0), C = x.dim(1);
  if (labels.size() != B) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) +
                         " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    }
  }
  auto in = x.data();
  std::vector<double> probs(B * C);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = in.data() + b * C;
    const double mx = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += probs[b * C + c] = std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] /= s;
    total += mx + std::log(s) - row[labels[b]];
  }
  auto out = Tensor::scalar(total / static_cast<double>(B));
  if (tape.wants({&logits})) {
    std::vector<int> ys(labels.begin(), labels.end());
    tape.record({logits}, out, [logits, out, probs = std::move(probs), ys = std::move(ys), B, C]() mutable {
      const double scale = out.grad()[0] / static_cast<double>(B);
      auto g = logits.grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const double target = static_cast<std::size_t>(ys[b]) == c ? 1.0 : 0.0;
          g[b * C + c] += scale * (probs[b * C + c] - target);
        }
    });
  }
  return out;
}

std::string format_metrics(const EpochMetrics& m) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch=" << m.epoch << " step=" << m.step << " lr=" << m.lr << " loss=" << m.loss
     << " train_acc=" << m.train_accuracy << " val_acc=";
  if (m.val_accuracy < 0.0) {
    os << "na";
  } else {
    os << m.val_accuracy;
  }
  return os.str();
}

TrainResult train(Model& model, const Dataset& dataset, const TrainConfig& tc, std::ostream* log) {
  tc.validate();
  const auto items = dataset.split(Split::Train);
  if (items.empty()) throw DataError("train: the training split is empty");
  if (tc.batch_size > items.size()) {
    throw ConfigError("train: batch size " + std::to_string(tc.batch_size) + " exceeds the " +
                      std::to_string(items.size()) + " training items");
  }
  const auto& cfg = model.config;
  const bool has_val = dataset.count(Split::Val) > 0;
  const auto threads = std::max<std::size_t>(1, tc.threads);

  const auto params = model.parameters();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& [name, t] : params) {
    offsets.push_back(total);
    total += t.numel();
  }

  std::vector<Model> workers;
  std::vector<std::vector<NamedTensor>> worker_params;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.push_back(model.clone());
    worker_params.push_back(workers.back().parameters());
  }

  auto state = TrainState::for_parameters(params, tc.seed);
  std::vector<std::vector<double>> sample_grads(tc.batch_size, std::vector<double>(total));
  std::vector<double> losses(tc.batch_size);
  std::vector<int> hits(tc.batch_size);
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    state.epoch = epoch;
    const double lr = lr_at(epoch, tc);
    std::shuffle(order.begin(), order.end(), state.rng);
    double epoch_loss = 0.0;
    std::size_t epoch_hits = 0;

    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const auto B = std::min(tc.batch_size, order.size() - start);
      std::vector<VideoClip> clips;
      for (std::size_t i = 0; i < B; ++i) {
        clips.push_back(sample_training_clip(items[order[start + i]]->video, cfg, state.rng));
      }
      for (auto& wp : worker_params) {
        for (std::size_t j = 0; j < params.size(); ++j) {
          auto src = params[j].second.data();
          std::copy(src.begin(), src.end(), wp[j].second.data().begin());
        }
      }

      detail::parallel_for(B, threads, [&](std::size_t i, std::size_t w) {
        auto& wp = worker_params[w];
        for (auto& [name, t] : wp) t.zero_grad();
        Tape tape;
        Tensor logits;
        try {
          logits = forward(tape, workers[w], clips[i].pixels);
        } catch (const NumericError& e) {
          throw NumericError("step " + std::to_string(state.step) + ": " + e.what());
        }
        const int label = clips[i].label;
        auto loss = cross_entropy(tape, logits, std::span<const int>(&label, 1));
        tape.backward(loss);
        losses[i] = loss.item();
        hits[i] = static_cast<int>(argmax(logits.data())) == label;
        auto& g = sample_grads[i];
        for (std::size_t j = 0; j < wp.size(); ++j) {
          auto src = wp[j].second.grad();
          std::copy(src.begin(), src.end(), g.begin() + static_cast<std::ptrdiff_t>(offsets[j]));
        }
      });

      for (std::size_t i = 0; i < B; ++i) {
        if (!std::isfinite(losses[i])) {
          throw NumericError("non-finite loss at step " + std::to_string(state.step) + " (epoch " +
                             std::to_string(epoch) + ")");
        }
        epoch_loss += losses[i];
        epoch_hits += hits[i];
      }
      const double inv_b = 1.0 / static_cast<double>(B);
      for (std::size_t j = 0; j < params.size(); ++j) {
        Tensor p = params[j].second;
        auto g = p.grad();
        std::fill(g.begin(), g.end(), 0.0);
        for (std::size_t i = 0; i < B; ++i) {
          const double* src = sample_grads[i].data() + offsets[j];
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
        }
        for (auto& v : g) v *= inv_b;
      }
      sgd_step(params, state, lr, tc);
      ++state.step;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.step = state.step;
    m.lr = lr;
    m.loss = epoch_loss / static_cast<double>(items.size());
    m.train_accuracy = static_cast<double>(epoch_hits) / static_cast<double>(items.size());
    state.running_loss = m.loss;
    state.running_accuracy = m.train_accuracy;
    if (has_val) {
      EvalOptions eo;
      eo.seed = tc.seed;
      eo.crops = tc.val_crops;
      eo.threads = threads;
      m.val_accuracy = evaluate(dataset, Split::Val, model, eo).accuracy;
    }
    if (!has_val || m.val_accuracy > result.best_val_accuracy || result.log.empty()) {
      result.best = Checkpoint::of(model);
      result.best_val_accuracy = m.val_accuracy;
    }
    result.log.push_back(m);
    if (log) *log << format_metrics(m) << std::endl;
  }
  return result;
}

}  // namespace dsta
