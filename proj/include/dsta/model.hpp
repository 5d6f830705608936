#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dsta/attention.hpp"
#include "dsta/config.hpp"
#include "dsta/tensor.hpp"

namespace dsta {

using NamedTensor = std::pair<std::string, Tensor>;

struct PatchEmbed {
  Tensor weight;  // [D x C*P*P]
  Tensor bias;    // [D]
};

struct PositionalEmbedding {
  Tensor spatial;   // [N x D]
  Tensor temporal;  // [F x D], undefined when the config does not use it
  Tensor cls;       // [1 x D]
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct Mlp {
  Tensor fc1_weight;  // [M x D]
  Tensor fc1_bias;
  Tensor fc2_weight;  // [D x M]
  Tensor fc2_bias;
};

// Pre-norm block. Divided blocks run norm_temporal/temporal first; the other
// schemes leave those two undefined.
struct TransformerBlock {
  LayerNormParams norm_temporal;
  QKVProjection temporal;
  LayerNormParams norm_attn;
  QKVProjection attn;
  LayerNormParams norm_mlp;
  Mlp mlp;
};

enum class ParamKind { Weight, Bias, Embedding, NormScale, NormShift };

struct Model {
  ModelConfig config;
  PatchEmbed patch_embed;
  PositionalEmbedding pos;
  std::vector<TransformerBlock> blocks;
  LayerNormParams norm;
  Tensor head_weight;  // [classes x D]
  Tensor head_bias;

  // Uniform(+-1/sqrt(fan_in)) weights, N(0, 0.02) embeddings, zero biases,
  // unit norm scales; fully determined by seed.
  static Model initialize(const ModelConfig& cfg, std::uint64_t seed);
  // Throws ConfigError naming the first missing or mis-shaped parameter.
  static Model from_parameters(const ModelConfig& cfg, const std::vector<NamedTensor>& params);

  // Handles to every parameter in canonical order. They alias the model.
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;
  Model clone() const;
};

// Canonical (name, shape) list for a configuration without allocating.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg);

struct ForwardOptions {
  MacCounter* counter = nullptr;
  bool masked_attention = false;
  // Receives the normalized class-token rows fed to the head (one per frame
  // for space-only, before averaging).
  std::vector<Tensor>* class_tokens = nullptr;
  // Receives the token grid after every block.
  std::vector<TokenGrid>* block_outputs = nullptr;
};

// pixels [H x W x C x F] -> [F x N x C*P*P]. Patches are taken in raster order
// and flattened as (channel, row, column).
Tensor patchify(const Tensor& pixels, const ModelConfig& cfg);

// Linear patch projection plus positional embeddings, class token(s) added.
TokenGrid embed(Tape& tape, const Tensor& patches, const PatchEmbed& pe, const PositionalEmbedding& pos,
                const ModelConfig& cfg);

TokenGrid block_forward(Tape& tape, const TransformerBlock& block, const TokenGrid& grid, const ModelConfig& cfg,
                        const ForwardOptions& options = {});

// Final norm and linear head on the class token(s); returns [num_classes].
Tensor classify(Tape& tape, const Model& model, const TokenGrid& grid, const ForwardOptions& options = {});

// Full forward pass. Throws NumericError naming the block on non-finite
// activations.
Tensor forward(Tape& tape, const Model& model, const Tensor& pixels, const ForwardOptions& options = {});

}  // namespace dsta
