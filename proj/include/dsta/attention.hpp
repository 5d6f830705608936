#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dsta/config.hpp"
#include "dsta/tensor.hpp"

namespace dsta {

// Token sequence of one clip.
//
// Joint and divided schemes: row 0 is the shared classification token and row
// 1 + t * N + p is patch p of frame t (both 0-based). Space-only: every frame
// carries its own classification token, frame t occupies rows
// t * (N + 1) .. t * (N + 1) + N with its classification copy first.
struct TokenGrid {
  Tensor tokens;
  std::size_t frames = 0;
  std::size_t patches = 0;
  AttentionScheme scheme = AttentionScheme::DividedSpaceTime;

  bool per_frame_cls() const { return scheme == AttentionScheme::SpaceOnly; }
  std::size_t token_count() const { return per_frame_cls() ? frames * (patches + 1) : frames * patches + 1; }
  std::size_t patch_index(std::size_t p, std::size_t t) const {
    return per_frame_cls() ? t * (patches + 1) + 1 + p : 1 + t * patches + p;
  }
  std::size_t cls_index(std::size_t t = 0) const { return per_frame_cls() ? t * (patches + 1) : 0; }

  TokenGrid with_tokens(Tensor t) const { return {std::move(t), frames, patches, scheme}; }
};

enum class AttentionStep { Temporal, Spatial, Joint };

// For every query row, the rows it may attend to. Compressed row storage.
class KeySets {
 public:
  void add_query(std::span<const std::size_t> keys);
  std::size_t queries() const { return offsets_.size() - 1; }
  std::span<const std::size_t> keys(std::size_t query) const {
    return {keys_.data() + offsets_[query], offsets_[query + 1] - offsets_[query]};
  }
  std::size_t total() const { return keys_.size(); }

 private:
  std::vector<std::size_t> offsets_{0};
  std::vector<std::size_t> keys_;
};

// Key sets of one attention step on this grid.
//  Temporal (divided only): patch (p,t) sees {(p,t') : t'} plus the class
//    token; the class-token query has no keys and is left untouched.
//  Spatial (divided or space-only): patch (p,t) sees {(p',t) : p'} plus the
//    class token. The shared class token sees every token; a per-frame copy
//    sees its own frame.
//  Joint (joint only): every token sees every token.
// Throws ContractError when the step does not belong to the grid's scheme.
KeySets key_sets(const TokenGrid& grid, AttentionStep step);

// Query, key, value and output projections of one multi-head attention layer,
// each [D x D] applied as x . W^T (no biases).
struct QKVProjection {
  Tensor query;
  Tensor key;
  Tensor value;
  Tensor output;
  std::size_t heads = 1;

  std::size_t width() const { return query.dim(0); }
  std::size_t head_dim() const { return width() / heads; }
  // Throws ConfigError if heads does not divide the width, DimensionError on
  // non-square weights.
  void validate() const;
};

// Multiply-adds spent on attention scores and on the weighted value sum.
struct MacCounter {
  std::uint64_t score = 0;
  std::uint64_t weighted_sum = 0;
  std::uint64_t total() const { return score + weighted_sum; }
};

// Softmax weights captured from a keyset_attention call, one row per (head,
// query) laid out as weights[head][entry of the query's key set].
struct AttentionWeights {
  std::size_t heads = 0;
  KeySets keys;
  std::vector<double> alpha;

  std::span<const double> row(std::size_t head, std::size_t query) const;
};

// softmax(q . k^T / sqrt(d)) . v for q [Q x d], k,v [K x d], built from
// primitive ops.
Tensor scaled_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v);

// Multi-head attention restricted to key sets, as one fused op. q, k, v are
// [T x D] with head h occupying columns [h*D/heads, (h+1)*D/heads). Queries
// with an empty key set produce zero rows.
Tensor keyset_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, const KeySets& keys,
                        std::size_t heads, MacCounter* counter = nullptr, AttentionWeights* weights = nullptr);

// Same result as keyset_attention, computed as dense attention over all T keys
// with an additive -inf mask. O(T^2) per head; the reference form.
Tensor masked_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, const KeySets& keys,
                        std::size_t heads);

// Single-head outputs [T x D_h] of each step for the given head, before the
// output projection.
Tensor temporal_attention(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, std::size_t head);
Tensor spatial_attention(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, std::size_t head);
Tensor joint_attention(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, std::size_t head);

struct AttentionOptions {
  MacCounter* counter = nullptr;
  AttentionWeights* weights = nullptr;
  bool masked = false;  // use masked_attention instead of the gathered path
};

// All heads of one step followed by the output projection. Returns [T x D].
Tensor multi_head(Tape& tape, const TokenGrid& grid, const QKVProjection& proj, AttentionStep step,
                  const AttentionOptions& options = {});

// The single attention step used by a one-step scheme (space-only, joint).
// Throws ContractError for the divided scheme, which runs two steps.
AttentionStep single_step(AttentionScheme scheme);

struct AttentionCost {
  std::uint64_t score = 0;
  std::uint64_t weighted_sum = 0;
  std::uint64_t total() const { return score + weighted_sum; }
};

// Analytic multiply-add count of one transformer block's attention (scores
// plus weighted sums, all heads, all steps of the scheme).
AttentionCost attention_cost(const ModelConfig& cfg, AttentionScheme scheme);
std::uint64_t attention_flops(const ModelConfig& cfg, AttentionScheme scheme);

}  // namespace dsta
