#include "dsta/model.hpp"

#include <cmath>
#include <map>
#include <random>
#include <string>

#include "dsta/errors.hpp"
#include "dsta/ops.hpp"

namespace dsta {

std::string_view scheme_name(AttentionScheme scheme) {
  switch (scheme) {
    case AttentionScheme::SpaceOnly:
      return "space";
    case AttentionScheme::JointSpaceTime:
      return "joint";
    case AttentionScheme::DividedSpaceTime:
      return "divided";
  }
  return "unknown";
}

AttentionScheme parse_scheme(std::string_view name) {
  if (name == "space") return AttentionScheme::SpaceOnly;
  if (name == "joint") return AttentionScheme::JointSpaceTime;
  if (name == "divided") return AttentionScheme::DividedSpaceTime;
  throw ConfigError("unknown attention scheme '" + std::string(name) + "' (expected space, joint or divided)");
}

ModelConfig ModelConfig::base() {
  ModelConfig cfg;
  cfg.height = 224;
  cfg.width = 224;
  cfg.frames = 8;
  cfg.patch = 16;
  cfg.dim = 768;
  cfg.heads = 12;
  cfg.depth = 12;
  cfg.mlp_dim = 3072;
  return cfg;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (height == 0 || width == 0 || frames == 0 || channels == 0 || patch == 0) fail("sizes must be positive");
  if (height % patch != 0 || width % patch != 0) {
    fail("patch size " + std::to_string(patch) + " does not tile a " + std::to_string(height) + "x" +
         std::to_string(width) + " frame");
  }
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    fail("width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (depth < 1) fail("depth must be at least 1");
  if (mlp_dim == 0) fail("mlp width must be positive");
  if (num_classes < 2) fail("need at least 2 classes");
  if (!(ln_eps > 0.0)) fail("layernorm eps must be positive");
}

namespace {

struct Slot {
  std::string name;
  Tensor* tensor;
  Shape shape;
  ParamKind kind;
};

// Single source of parameter names, shapes and order.
std::vector<Slot> slots(Model& m) {
  const auto& c = m.config;
  const auto D = c.dim, N = c.patches_per_frame(), M = c.mlp_dim;
  std::vector<Slot> out;
  out.push_back({"patch_embed.weight", &m.patch_embed.weight, {D, c.patch_width()}, ParamKind::Weight});
  out.push_back({"patch_embed.bias", &m.patch_embed.bias, {D}, ParamKind::Bias});
  out.push_back({"pos_embed.spatial", &m.pos.spatial, {N, D}, ParamKind::Embedding});
  if (c.uses_temporal_embedding()) {
    out.push_back({"pos_embed.temporal", &m.pos.temporal, {c.frames, D}, ParamKind::Embedding});
  }
  out.push_back({"cls_token", &m.pos.cls, {1, D}, ParamKind::Embedding});

  m.blocks.resize(c.depth);
  for (std::size_t i = 0; i < c.depth; ++i) {
    auto& b = m.blocks[i];
    const auto prefix = "blocks." + std::to_string(i) + ".";
    auto norm = [&](const std::string& n, LayerNormParams& p) {
      out.push_back({prefix + n + ".gamma", &p.gamma, {D}, ParamKind::NormScale});
      out.push_back({prefix + n + ".beta", &p.beta, {D}, ParamKind::NormShift});
    };
    auto attn = [&](const std::string& n, QKVProjection& p) {
      p.heads = c.heads;
      out.push_back({prefix + n + ".query", &p.query, {D, D}, ParamKind::Weight});
      out.push_back({prefix + n + ".key", &p.key, {D, D}, ParamKind::Weight});
      out.push_back({prefix + n + ".value", &p.value, {D, D}, ParamKind::Weight});
      out.push_back({prefix + n + ".output", &p.output, {D, D}, ParamKind::Weight});
    };
    if (c.scheme == AttentionScheme::DividedSpaceTime) {
      norm("norm_t", b.norm_temporal);
      attn("attn_t", b.temporal);
    }
    norm("norm1", b.norm_attn);
    attn("attn", b.attn);
    norm("norm2", b.norm_mlp);
    out.push_back({prefix + "mlp.fc1.weight", &b.mlp.fc1_weight, {M, D}, ParamKind::Weight});
    out.push_back({prefix + "mlp.fc1.bias", &b.mlp.fc1_bias, {M}, ParamKind::Bias});
    out.push_back({prefix + "mlp.fc2.weight", &b.mlp.fc2_weight, {D, M}, ParamKind::Weight});
    out.push_back({prefix + "mlp.fc2.bias", &b.mlp.fc2_bias, {D}, ParamKind::Bias});
  }
  out.push_back({"norm.gamma", &m.norm.gamma, {D}, ParamKind::NormScale});
  out.push_back({"norm.beta", &m.norm.beta, {D}, ParamKind::NormShift});
  out.push_back({"head.weight", &m.head_weight, {c.num_classes, D}, ParamKind::Weight});
  out.push_back({"head.bias", &m.head_bias, {c.num_classes}, ParamKind::Bias});
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  Model skeleton;
  skeleton.config = cfg;
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& s : slots(skeleton)) out.emplace_back(s.name, s.shape);
  return out;
}

Model Model::initialize(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  std::mt19937_64 rng(seed);
  for (auto& s : slots(m)) {
    std::vector<double> values(shape_numel(s.shape), 0.0);
    switch (s.kind) {
      case ParamKind::Weight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.shape[1]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : values) v = dist(rng);
        break;
      }
      case ParamKind::Embedding: {
        std::normal_distribution<double> dist(0.0, 0.02);
        for (auto& v : values) v = dist(rng);
        break;
      }
      case ParamKind::NormScale:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case ParamKind::Bias:
      case ParamKind::NormShift:
        break;
    }
    *s.tensor = Tensor::from(s.shape, std::move(values), true);
  }
  return m;
}

Model Model::from_parameters(const ModelConfig& cfg, const std::vector<NamedTensor>& params) {
  cfg.validate();
  std::map<std::string, Tensor> by_name(params.begin(), params.end());
  Model m;
  m.config = cfg;
  for (auto& s : slots(m)) {
    auto it = by_name.find(s.name);
    if (it == by_name.end()) throw ConfigError("missing parameter " + s.name);
    if (it->second.shape() != s.shape) {
      throw ConfigError("parameter " + s.name + " has shape " + shape_to_string(it->second.shape()) + ", expected " +
                        shape_to_string(s.shape));
    }
    *s.tensor = it->second;
    s.tensor->set_requires_grad(true);
    by_name.erase(it);
  }
  if (!by_name.empty()) throw ConfigError("unexpected parameter " + by_name.begin()->first);
  return m;
}

std::vector<NamedTensor> Model::parameters() const {
  Model& self = const_cast<Model&>(*this);
  const auto blocks_before = blocks.size();
  auto list = slots(self);
  if (blocks.size() != blocks_before) throw ContractError("parameters() on a model with the wrong block count");
  std::vector<NamedTensor> out;
  out.reserve(list.size());
  for (auto& s : list) out.emplace_back(s.name, *s.tensor);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

Model Model::clone() const {
  std::vector<NamedTensor> copies;
  for (const auto& [name, t] : parameters()) copies.emplace_back(name, t.clone());
  return from_parameters(config, copies);
}

Tensor patchify(const Tensor& pixels, const ModelConfig& cfg) {
  const auto H = cfg.height, W = cfg.width, C = cfg.channels, F = cfg.frames, P = cfg.patch;
  if (pixels.shape() != Shape{H, W, C, F}) {
    throw ConfigError("clip of shape " + shape_to_string(pixels.shape()) + " does not match configured " +
                      shape_to_string({H, W, C, F}));
  }
  const auto cols = W / P, N = cfg.patches_per_frame(), width = cfg.patch_width();
  std::vector<double> out(F * N * width);
  auto px = pixels.data();
  for (std::size_t t = 0; t < F; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      const auto top = (n / cols) * P, left = (n % cols) * P;
      double* dst = out.data() + (t * N + n) * width;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < P; ++y)
          for (std::size_t x = 0; x < P; ++x) {
            *dst++ = px[(((top + y) * W + (left + x)) * C + c) * F + t];
          }
    }
  }
  return Tensor::from({F, N, width}, std::move(out));
}

TokenGrid embed(Tape& tape, const Tensor& patches, const PatchEmbed& pe, const PositionalEmbedding& pos,
                const ModelConfig& cfg) {
  const auto F = cfg.frames, N = cfg.patches_per_frame();
  if (patches.rank() != 3 || patches.dim(0) != F || patches.dim(1) != N) {
    throw DimensionError("embed: patches " + shape_to_string(patches.shape()) + " do not match " +
                         std::to_string(F) + " frames of " + std::to_string(N) + " patches");
  }
  if (patches.dim(2) != pe.weight.dim(1)) {
    throw DimensionError("embed: patch width " + std::to_string(patches.dim(2)) + " does not match projection " +
                         shape_to_string(pe.weight.shape()));
  }
  auto flat = patches.reshaped({F * N, patches.dim(2)});
  auto tokens = ops::linear(tape, flat, pe.weight, pe.bias);

  std::vector<std::size_t> spatial_rows, temporal_rows;
  for (std::size_t t = 0; t < F; ++t)
    for (std::size_t p = 0; p < N; ++p) {
      spatial_rows.push_back(p);
      temporal_rows.push_back(t);
    }
  tokens = ops::add(tape, tokens, ops::index_rows(tape, pos.spatial, std::move(spatial_rows)));
  if (cfg.uses_temporal_embedding()) {
    tokens = ops::add(tape, tokens, ops::index_rows(tape, pos.temporal, std::move(temporal_rows)));
  }

  TokenGrid grid{{}, F, N, cfg.scheme};
  auto all = ops::concat_rows(tape, pos.cls, tokens);
  if (grid.per_frame_cls()) {
    std::vector<std::size_t> layout;
    for (std::size_t t = 0; t < F; ++t) {
      layout.push_back(0);
      for (std::size_t p = 0; p < N; ++p) layout.push_back(1 + t * N + p);
    }
    grid.tokens = ops::index_rows(tape, all, std::move(layout));
  } else {
    grid.tokens = all;
  }
  return grid;
}

namespace {

Tensor norm(Tape& tape, const Tensor& x, const LayerNormParams& p, double eps) {
  return ops::layernorm(tape, x, p.gamma, p.beta, eps);
}

Tensor attention_hop(Tape& tape, const TokenGrid& grid, const LayerNormParams& ln, const QKVProjection& proj,
                     AttentionStep step, const ModelConfig& cfg, const ForwardOptions& options) {
  auto normed = grid.with_tokens(norm(tape, grid.tokens, ln, cfg.ln_eps));
  AttentionOptions ao;
  ao.counter = options.counter;
  ao.masked = options.masked_attention;
  return ops::add(tape, grid.tokens, multi_head(tape, normed, proj, step, ao));
}

void require_finite(const Tensor& t, const std::string& where) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError("non-finite activation in " + where);
  }
}

}  // namespace

TokenGrid block_forward(Tape& tape, const TransformerBlock& block, const TokenGrid& grid, const ModelConfig& cfg,
                        const ForwardOptions& options) {
  Tensor x = grid.tokens;
  if (cfg.scheme == AttentionScheme::DividedSpaceTime) {
    x = attention_hop(tape, grid, block.norm_temporal, block.temporal, AttentionStep::Temporal, cfg, options);
    x = attention_hop(tape, grid.with_tokens(x), block.norm_attn, block.attn, AttentionStep::Spatial, cfg, options);
  } else {
    x = attention_hop(tape, grid, block.norm_attn, block.attn, single_step(cfg.scheme), cfg, options);
  }
  auto h = norm(tape, x, block.norm_mlp, cfg.ln_eps);
  h = ops::linear(tape, ops::gelu(tape, ops::linear(tape, h, block.mlp.fc1_weight, block.mlp.fc1_bias)),
                  block.mlp.fc2_weight, block.mlp.fc2_bias);
  return grid.with_tokens(ops::add(tape, x, h));
}

Tensor classify(Tape& tape, const Model& model, const TokenGrid& grid, const ForwardOptions& options) {
  std::vector<std::size_t> rows;
  const auto copies = grid.per_frame_cls() ? grid.frames : 1;
  for (std::size_t t = 0; t < copies; ++t) rows.push_back(grid.cls_index(t));
  auto cls = norm(tape, ops::index_rows(tape, grid.tokens, rows), model.norm, model.config.ln_eps);
  if (options.class_tokens) {
    options.class_tokens->clear();
    const auto D = cls.dim(1);
    for (std::size_t t = 0; t < copies; ++t) {
      options.class_tokens->push_back(Tensor::from(
          {1, D}, std::vector<double>(cls.data().begin() + t * D, cls.data().begin() + (t + 1) * D)));
    }
  }
  if (copies > 1) cls = ops::mean_rows(tape, cls);
  auto logits = ops::linear(tape, cls, model.head_weight, model.head_bias);
  return ops::reshape(tape, logits, {model.config.num_classes});
}

Tensor forward(Tape& tape, const Model& model, const Tensor& pixels, const ForwardOptions& options) {
  const auto& cfg = model.config;
  if (model.blocks.size() != cfg.depth) throw ConfigError("model has " + std::to_string(model.blocks.size()) +
                                                          " blocks, config says " + std::to_string(cfg.depth));
  auto grid = embed(tape, patchify(pixels, cfg), model.patch_embed, model.pos, cfg);
  require_finite(grid.tokens, "patch embedding");
  if (options.block_outputs) options.block_outputs->clear();
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    grid = block_forward(tape, model.blocks[i], grid, cfg, options);
    require_finite(grid.tokens, "block " + std::to_string(i));
    if (options.block_outputs) options.block_outputs->push_back(grid);
  }
  auto logits = classify(tape, model, grid, options);
  require_finite(logits, "classification head");
  return logits;
}

}  // namespace dsta
