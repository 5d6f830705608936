#include "dsta/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "dsta/errors.hpp"
#include "dsta/ops.hpp"

namespace dsta {

void KeySets::add_query(std::span<const std::size_t> keys) {
  keys_.insert(keys_.end(), keys.begin(), keys.end());
  offsets_.push_back(keys_.size());
}

namespace {

void require_scheme(const TokenGrid& grid, AttentionStep step) {
  const auto s = grid.scheme;
  bool ok = false;
  switch (step) {
    case AttentionStep::Temporal:
      ok = s == AttentionScheme::DividedSpaceTime;
      break;
    case AttentionStep::Spatial:
      ok = s == AttentionScheme::DividedSpaceTime || s == AttentionScheme::SpaceOnly;
      break;
    case AttentionStep::Joint:
      ok = s == AttentionScheme::JointSpaceTime;
      break;
  }
  if (!ok) {
    static constexpr const char* names[] = {"temporal", "spatial", "joint"};
    throw ContractError(std::string(names[static_cast<int>(step)]) + " attention is not part of the " +
                        std::string(scheme_name(s)) + " scheme");
  }
}

}  // namespace

KeySets key_sets(const TokenGrid& grid, AttentionStep step) {
  require_scheme(grid, step);
  const auto F = grid.frames, N = grid.patches;
  KeySets sets;
  std::vector<std::size_t> keys;

  if (grid.per_frame_cls()) {
    // Space-only: each frame is an independent image with its own class token.
    for (std::size_t t = 0; t < F; ++t) {
      keys.clear();
      keys.push_back(grid.cls_index(t));
      for (std::size_t p = 0; p < N; ++p) keys.push_back(grid.patch_index(p, t));
      for (std::size_t q = 0; q <= N; ++q) sets.add_query(keys);
    }
    return sets;
  }

  const auto tokens = grid.token_count();
  // Class-token query.
  keys.clear();
  if (step != AttentionStep::Temporal) {
    keys.resize(tokens);
    std::iota(keys.begin(), keys.end(), std::size_t{0});
  }
  sets.add_query(keys);

  for (std::size_t t = 0; t < F; ++t) {
    for (std::size_t p = 0; p < N; ++p) {
      keys.clear();
      keys.push_back(grid.cls_index());
      switch (step) {
        case AttentionStep::Temporal:
          for (std::size_t tt = 0; tt < F; ++tt) keys.push_back(grid.patch_index(p, tt));
          break;
        case AttentionStep::Spatial:
          for (std::size_t pp = 0; pp < N; ++pp) keys.push_back(grid.patch_index(pp, t));
          break;
        case AttentionStep::Joint:
          for (std::size_t i = 1; i < tokens; ++i) keys.push_back(i);
          break;
      }
      sets.add_query(keys);
    }
  }
  return sets;
}

void QKVProjection::validate() const {
  const auto d = query.dim(0);
  for (const Tensor* w : {&query, &key, &value, &output}) {
    if (w->shape() != Shape{d, d}) {
      throw DimensionError("attention projection " + shape_to_string(w->shape()) + " is not " +
                           shape_to_string({d, d}));
    }
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
}

std::span<const double> AttentionWeights::row(std::size_t head, std::size_t query) const {
  const auto keys_of = keys.keys(query);
  const auto begin = head * keys.total() + static_cast<std::size_t>(keys_of.data() - keys.keys(0).data());
  return {alpha.data() + begin, keys_of.size()};
}

Tensor scaled_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(1) != v.dim(1) ||
      k.dim(0) != v.dim(0)) {
    throw DimensionError("scaled_attention: q " + shape_to_string(q.shape()) + ", k " + shape_to_string(k.shape()) +
                         ", v " + shape_to_string(v.shape()) + " are incompatible");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  auto scores = ops::scale(tape, ops::matmul(tape, q, ops::transpose(tape, k)), s);
  return ops::matmul(tape, ops::softmax(tape, scores, 1), v);
}

namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const KeySets& keys, std::size_t heads) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: q " + shape_to_string(q.shape()) + ", k " + shape_to_string(k.shape()) + ", v " +
                         shape_to_string(v.shape()) + " must share one [T x D] shape");
  }
  if (heads == 0 || q.dim(1) % heads != 0) {
    throw ConfigError("attention width " + std::to_string(q.dim(1)) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (keys.queries() != q.dim(0)) {
    throw DimensionError("attention: " + std::to_string(keys.queries()) + " key sets for " +
                         std::to_string(q.dim(0)) + " query rows");
  }
}

}  // namespace

Tensor keyset_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, const KeySets& keys,
                        std::size_t heads, MacCounter* counter, AttentionWeights* weights) {
  check_qkv(q, k, v, keys, heads);
  const auto T = q.dim(0), D = q.dim(1), dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto total = keys.total();

  auto out = Tensor::zeros({T, D});
  std::vector<double> alpha(heads * total);
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  const double* vv = v.data().data();
  double* y = out.data().data();

  std::size_t entry = 0;
  for (std::size_t row = 0; row < T; ++row) {
    const auto ks = keys.keys(row);
    for (std::size_t h = 0; h < heads; ++h) {
      if (ks.empty()) continue;
      double* a = alpha.data() + h * total + entry;
      const double* qrow = qv + row * D + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < ks.size(); ++j) {
        const double* krow = kv + ks[j] * D + h * dh;
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d) s += qrow[d] * krow[d];
        a[j] = s * scale;
        mx = std::max(mx, a[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < ks.size(); ++j) {
        a[j] = std::exp(a[j] - mx);
        sum += a[j];
      }
      double* yrow = y + row * D + h * dh;
      for (std::size_t j = 0; j < ks.size(); ++j) {
        a[j] /= sum;
        const double* vrow = vv + ks[j] * D + h * dh;
        for (std::size_t d = 0; d < dh; ++d) yrow[d] += a[j] * vrow[d];
      }
      if (counter) {
        counter->score += ks.size() * dh;
        counter->weighted_sum += ks.size() * dh;
      }
    }
    entry += ks.size();
  }

  if (weights) {
    weights->heads = heads;
    weights->keys = keys;
    weights->alpha = alpha;
  }

  if (tape.wants({&q, &k, &v})) {
    tape.record({q, k, v}, out, [q, k, v, out, keys, heads, alpha = std::move(alpha), scale]() mutable {
      const auto T = q.dim(0), D = q.dim(1), dh = D / heads;
      const auto total = keys.total();
      const double* qv = q.data().data();
      const double* kv = k.data().data();
      const double* vv = v.data().data();
      const double* dy = out.grad().data();
      double* dq = q.requires_grad() ? q.grad().data() : nullptr;
      double* dk = k.requires_grad() ? k.grad().data() : nullptr;
      double* dv = v.requires_grad() ? v.grad().data() : nullptr;
      std::vector<double> dalpha;
      std::size_t entry = 0;
      for (std::size_t row = 0; row < T; ++row) {
        const auto ks = keys.keys(row);
        dalpha.resize(ks.size());
        for (std::size_t h = 0; h < heads && !ks.empty(); ++h) {
          const double* a = alpha.data() + h * total + entry;
          const double* dyrow = dy + row * D + h * dh;
          const double* qrow = qv + row * D + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < ks.size(); ++j) {
            const double* vrow = vv + ks[j] * D + h * dh;
            double s = 0.0;
            for (std::size_t d = 0; d < dh; ++d) s += dyrow[d] * vrow[d];
            dalpha[j] = s;
            dot += a[j] * s;
          }
          for (std::size_t j = 0; j < ks.size(); ++j) {
            const double ds = a[j] * (dalpha[j] - dot) * scale;
            const std::size_t kr = ks[j] * D + h * dh;
            if (dq) {
              double* dqrow = dq + row * D + h * dh;
              for (std::size_t d = 0; d < dh; ++d) dqrow[d] += ds * kv[kr + d];
            }
            if (dk) {
              for (std::size_t d = 0; d < dh; ++d) dk[kr + d] += ds * qrow[d];
            }
            if (dv) {
              for (std::size_t d = 0; d < dh; ++d) dv[kr + d] += a[j] * dyrow[d];
            }
          }
        }
        entry += ks.size();
      }
    });
  }
  return out;
}

Tensor masked_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, const KeySets& keys,
                        std::size_t heads) {
  check_qkv(q, k, v, keys, heads);
  const auto T = q.dim(0), D = q.dim(1), dh = D / heads;
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<double> mask(T * T, -inf);
  std::vector<double> live(T * dh, 1.0);
  bool any_empty = false;
  for (std::size_t row = 0; row < T; ++row) {
    const auto ks = keys.keys(row);
    if (ks.empty()) {
      any_empty = true;
      std::fill_n(mask.begin() + row * T, T, 0.0);
      std::fill_n(live.begin() + row * dh, dh, 0.0);
    }
    for (auto key : ks) mask[row * T + key] = 0.0;
  }
  const auto mask_t = Tensor::from({T, T}, std::move(mask));
  const auto live_t = Tensor::from({T, dh}, std::move(live));
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Tensor> outputs;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = ops::slice_cols(tape, q, h * dh, dh);
    auto kh = ops::slice_cols(tape, k, h * dh, dh);
    auto vh = ops::slice_cols(tape, v, h * dh, dh);
    auto scores = ops::scale(tape, ops::matmul(tape, qh, ops::transpose(tape, kh)), s);
    auto probs = ops::softmax(tape, ops::add(tape, scores, mask_t), 1);
    auto o = ops::matmul(tape, probs, vh);
    if (any_empty) o = ops::mul(tape, o, live_t);
    outputs.push_back(o);
  }
  return heads == 1 ? outputs.front() : ops::concat_cols(tape, outputs);
}

namespace {

Tensor single_head(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, std::size_t head,
                   AttentionStep step) {
  proj.validate();
  if (head >= proj.heads) {
    throw ContractError("head " + std::to_string(head) + " out of range for " + std::to_string(proj.heads) + " heads");
  }
  auto sets = key_sets(grid, step);
  const auto dh = proj.head_dim();
  const Tensor none;
  auto q = ops::slice_cols(tape, ops::linear(tape, grid.tokens, proj.query, none), head * dh, dh);
  auto k = ops::slice_cols(tape, ops::linear(tape, grid.tokens, proj.key, none), head * dh, dh);
  auto v = ops::slice_cols(tape, ops::linear(tape, grid.tokens, proj.value, none), head * dh, dh);
  return keyset_attention(tape, q, k, v, sets, 1);
}

}  // namespace

Tensor temporal_attention(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, std::size_t head) {
  return single_head(tape, grid, proj, head, AttentionStep::Temporal);
}

Tensor spatial_attention(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, std::size_t head) {
  return single_head(tape, grid, proj, head, AttentionStep::Spatial);
}

Tensor joint_attention(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, std::size_t head) {
  return single_head(tape, grid, proj, head, AttentionStep::Joint);
}

Tensor multi_head(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, AttentionStep step,
                  const AttentionOptions& options) {
  proj.validate();
  if (grid.tokens.rank() != 2 || grid.tokens.dim(0) != grid.token_count() || grid.tokens.dim(1) != proj.width()) {
    throw DimensionError("multi_head: tokens " + shape_to_string(grid.tokens.shape()) + " do not match a grid of " +
                         std::to_string(grid.token_count()) + " tokens of width " + std::to_string(proj.width()));
  }
  const auto sets = key_sets(grid, step);
  const Tensor none;
  auto q = ops::linear(tape, grid.tokens, proj.query, none);
  auto k = ops::linear(tape, grid.tokens, proj.key, none);
  auto v = ops::linear(tape, grid.tokens, proj.value, none);
  auto mixed = options.masked ? masked_attention(tape, q, k, v, sets, proj.heads)
                              : keyset_attention(tape, q, k, v, sets, proj.heads, options.counter, options.weights);
  return ops::linear(tape, mixed, proj.output, none);
}

AttentionStep single_step(AttentionScheme scheme) {
  switch (scheme) {
    case AttentionScheme::SpaceOnly:
      return AttentionStep::Spatial;
    case AttentionScheme::JointSpaceTime:
      return AttentionStep::Joint;
    case AttentionScheme::DividedSpaceTime:
      break;
  }
  throw ContractError("divided space-time attention runs a temporal and a spatial step");
}

AttentionCost attention_cost(const ModelConfig& cfg, AttentionScheme scheme) {
  const std::uint64_t F = cfg.frames, N = cfg.patches_per_frame(), D = cfg.dim;
  std::uint64_t query_key_pairs = 0;
  switch (scheme) {
    case AttentionScheme::JointSpaceTime:
      query_key_pairs = (F * N + 1) * (F * N + 1);
      break;
    case AttentionScheme::SpaceOnly:
      query_key_pairs = F * (N + 1) * (N + 1);
      break;
    case AttentionScheme::DividedSpaceTime:
      // temporal: F+1 keys per patch; spatial: N+1 keys per patch and F*N+1
      // for the class token
      query_key_pairs = F * N * (F + 1) + F * N * (N + 1) + (F * N + 1);
      break;
  }
  // Every query-key pair costs D multiply-adds (summed over heads) for the
  // score and D for accumulating the value.
  return {query_key_pairs * D, query_key_pairs * D};
}

std::uint64_t attention_flops(const ModelConfig& cfg, AttentionScheme scheme) {
  return attention_cost(cfg, scheme).total();
}

}  // namespace dsta
