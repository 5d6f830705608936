#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "dsta/checkpoint.hpp"
#include "dsta/errors.hpp"
#include "dsta/gradcheck.hpp"
#include "dsta/model.hpp"
#include "dsta/ops.hpp"
#include "dsta/training.hpp"
#include "helpers.hpp"

using namespace dsta;
using dsta::test::max_abs_diff;
using dsta::test::random_pixels;
using dsta::test::toy_config;

namespace fs = std::filesystem;

namespace {

// Plain row-major matrices for the straight-line oracle.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

Mat zeros(std::size_t r, std::size_t c) { return {r, c, std::vector<double>(r * c, 0.0)}; }

Mat of(const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0), {t.data().begin(), t.data().end()}};
  return {t.dim(0), t.dim(1), {t.data().begin(), t.data().end()}};
}

// x . w^T + b
Mat affine(const Mat& x, const Tensor& w, const Tensor& b) {
  Mat out = zeros(x.rows, w.dim(0));
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      double s = b.defined() ? b[o] : 0.0;
      for (std::size_t c = 0; c < x.cols; ++c) s += x(i, c) * w.at(o, c);
      out(i, o) = s;
    }
  return out;
}

Mat layer_norm(const Mat& x, const LayerNormParams& p, double eps) {
  Mat out = zeros(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) mean += x(i, c);
    mean /= static_cast<double>(x.cols);
    for (std::size_t c = 0; c < x.cols; ++c) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= static_cast<double>(x.cols);
    for (std::size_t c = 0; c < x.cols; ++c) out(i, c) = (x(i, c) - mean) / std::sqrt(var + eps) * p.gamma[c] + p.beta[c];
  }
  return out;
}

Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

// Token bookkeeping for the oracle: each row is either a class token (frame
// -1 for the shared one) or patch (p, t).
struct Role {
  bool cls;
  int frame;
  std::size_t patch;
};

Mat attend(const Mat& x, const QKVProjection& proj, const std::vector<Role>& roles, char step) {
  const Tensor none;
  const Mat q = affine(x, proj.query, none), k = affine(x, proj.key, none), v = affine(x, proj.value, none);
  const auto D = x.cols, dh = D / proj.heads;
  auto allowed = [&](std::size_t i, std::size_t j) {
    const Role &a = roles[i], &b = roles[j];
    switch (step) {
      case 'j':
        return true;
      case 't':
        return !a.cls && (b.cls || b.patch == a.patch);
      case 's':
        if (a.frame >= 0 && a.cls) return b.frame == a.frame;  // per-frame copy
        if (a.cls) return true;
        return b.cls ? b.frame < 0 || b.frame == a.frame : b.frame == a.frame;
    }
    return false;
  };
  Mat mixed = zeros(x.rows, D);
  for (std::size_t h = 0; h < proj.heads; ++h)
    for (std::size_t i = 0; i < x.rows; ++i) {
      std::vector<double> w(x.rows, 0.0);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < x.rows; ++j) {
        if (!allowed(i, j)) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q(i, h * dh + c) * k(j, h * dh + c);
        w[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[j]);
      }
      for (std::size_t j = 0; j < x.rows; ++j) {
        w[j] = allowed(i, j) ? std::exp(w[j] - mx) : 0.0;
        z += w[j];
      }
      if (z == 0.0) continue;
      for (std::size_t j = 0; j < x.rows; ++j)
        for (std::size_t c = 0; c < dh; ++c) mixed(i, h * dh + c) += w[j] / z * v(j, h * dh + c);
    }
  return affine(mixed, proj.output, none);
}

// The whole forward pass written from the model definition with loops only.
std::vector<double> oracle_forward(const Model& m, const Tensor& pixels) {
  const auto& cfg = m.config;
  const auto H = cfg.height, W = cfg.width, C = cfg.channels, F = cfg.frames, P = cfg.patch, D = cfg.dim;
  const auto cols = W / P, N = cfg.patches_per_frame();
  auto px = [&](std::size_t y, std::size_t x, std::size_t c, std::size_t t) {
    return pixels[((y * W + x) * C + c) * F + t];
  };

  std::vector<Role> roles;
  Mat x = zeros(0, D);
  auto push = [&](const std::vector<double>& row, Role r) {
    x.v.insert(x.v.end(), row.begin(), row.end());
    ++x.rows;
    roles.push_back(r);
  };
  const std::vector<double> cls(m.pos.cls.data().begin(), m.pos.cls.data().end());
  const bool per_frame = cfg.scheme == AttentionScheme::SpaceOnly;
  if (!per_frame) push(cls, {true, -1, 0});
  for (std::size_t t = 0; t < F; ++t) {
    if (per_frame) push(cls, {true, static_cast<int>(t), 0});
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<double> row(D);
      for (std::size_t d = 0; d < D; ++d) {
        double s = m.patch_embed.bias[d];
        std::size_t k = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y < P; ++y)
            for (std::size_t xx = 0; xx < P; ++xx, ++k)
              s += m.patch_embed.weight.at(d, k) * px((n / cols) * P + y, (n % cols) * P + xx, c, t);
        s += m.pos.spatial.at(n, d);
        if (cfg.uses_temporal_embedding()) s += m.pos.temporal.at(t, d);
        row[d] = s;
      }
      push(row, {false, static_cast<int>(t), n});
    }
  }

  for (const auto& b : m.blocks) {
    if (cfg.scheme == AttentionScheme::DividedSpaceTime) {
      x = plus(x, attend(layer_norm(x, b.norm_temporal, cfg.ln_eps), b.temporal, roles, 't'));
      x = plus(x, attend(layer_norm(x, b.norm_attn, cfg.ln_eps), b.attn, roles, 's'));
    } else {
      x = plus(x, attend(layer_norm(x, b.norm_attn, cfg.ln_eps), b.attn, roles,
                         cfg.scheme == AttentionScheme::JointSpaceTime ? 'j' : 's'));
    }
    Mat h = affine(layer_norm(x, b.norm_mlp, cfg.ln_eps), b.mlp.fc1_weight, b.mlp.fc1_bias);
    for (auto& v : h.v) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    x = plus(x, affine(h, b.mlp.fc2_weight, b.mlp.fc2_bias));
  }

  Mat pooled = zeros(1, D);
  Mat cls_rows = zeros(0, D);
  for (std::size_t i = 0; i < x.rows; ++i) {
    if (!roles[i].cls) continue;
    cls_rows.v.insert(cls_rows.v.end(), x.v.begin() + i * D, x.v.begin() + (i + 1) * D);
    ++cls_rows.rows;
  }
  const Mat normed = layer_norm(cls_rows, m.norm, cfg.ln_eps);
  for (std::size_t i = 0; i < normed.rows; ++i)
    for (std::size_t d = 0; d < D; ++d) pooled(0, d) += normed(i, d) / static_cast<double>(normed.rows);
  return affine(pooled, m.head_weight, m.head_bias).v;
}

const AttentionScheme kSchemes[] = {AttentionScheme::SpaceOnly, AttentionScheme::JointSpaceTime,
                                    AttentionScheme::DividedSpaceTime};

Tensor permute_frames(const Tensor& pixels, const std::vector<std::size_t>& order) {
  const auto F = pixels.dim(3);
  auto out = pixels.clone();
  for (std::size_t i = 0; i < pixels.numel() / F; ++i)
    for (std::size_t t = 0; t < F; ++t) out[i * F + t] = pixels[i * F + order[t]];
  return out;
}

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("dsta_test_" + name); }

}  // namespace

TEST_CASE("configuration constraints") {
  auto cfg = ModelConfig::desk();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.patches_per_frame() == 16);
  auto base = ModelConfig::base();
  CHECK(base.patches_per_frame() == 196);
  CHECK(base.head_dim() == 64);
  CHECK(base.mlp_dim == 3072);
  cfg.height = 30;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig::desk();
  cfg.heads = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig::desk();
  cfg.num_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig::desk();
  cfg.depth = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_scheme("divided") == AttentionScheme::DividedSpaceTime);
  CHECK_THROWS_AS(parse_scheme("axial"), ConfigError);
}

TEST_CASE("patchify matches a strided copy") {
  std::mt19937_64 rng(30);
  auto cfg = toy_config(AttentionScheme::JointSpaceTime);
  cfg.width = 12;
  const auto pixels = random_pixels(cfg, rng);
  const auto patches = patchify(pixels, cfg);
  REQUIRE(patches.shape() == Shape{2, 6, 48});
  // A patch-sized convolution with a one-hot kernel at (c, y, x) and stride P
  // reads back exactly column c*P*P + y*P + x.
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t oy = 0; oy < 2; ++oy)
      for (std::size_t ox = 0; ox < 3; ++ox)
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) {
              double conv = 0.0;
              for (std::size_t ky = 0; ky < 4; ++ky)
                for (std::size_t kx = 0; kx < 4; ++kx) {
                  const double kernel = (ky == y && kx == x) ? 1.0 : 0.0;
                  conv += kernel * pixels[(((oy * 4 + ky) * 12 + ox * 4 + kx) * 3 + c) * 2 + t];
                }
              CHECK(patches[((t * 6) + oy * 3 + ox) * 48 + c * 16 + y * 4 + x] == conv);
            }
  auto wrong = cfg;
  wrong.frames = 3;
  CHECK_THROWS_AS(patchify(pixels, wrong), ConfigError);
}

TEST_CASE("embedding adds positional rows to each projected patch") {
  std::mt19937_64 rng(31);
  auto cfg = toy_config(AttentionScheme::DividedSpaceTime);
  const auto model = Model::initialize(cfg, 5);
  const auto pixels = random_pixels(cfg, rng);
  const auto patches = patchify(pixels, cfg);
  Tape tape(false);
  const auto grid = embed(tape, patches, model.patch_embed, model.pos, cfg);
  REQUIRE(grid.tokens.shape() == Shape{9, 8});
  for (std::size_t d = 0; d < 8; ++d) CHECK(grid.tokens.at(0, d) == model.pos.cls[d]);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t d = 0; d < 8; ++d) {
        double s = model.patch_embed.bias[d];
        for (std::size_t k = 0; k < 48; ++k) s += model.patch_embed.weight.at(d, k) * patches[(t * 4 + p) * 48 + k];
        s += model.pos.spatial.at(p, d) + model.pos.temporal.at(t, d);
        CHECK(std::abs(grid.tokens.at(grid.patch_index(p, t), d) - s) <= 1e-12);
      }
}

TEST_CASE("single patch with identity projection") {
  ModelConfig cfg;
  cfg.height = cfg.width = cfg.patch = 1;
  cfg.channels = 2;
  cfg.frames = 2;
  cfg.dim = 2;
  cfg.heads = 1;
  PatchEmbed pe{Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2})};
  PositionalEmbedding pos{Tensor::from({1, 2}, {0.5, -0.5}), Tensor::from({2, 2}, {10, 20, 30, 40}),
                          Tensor::from({1, 2}, {0, 0})};
  const auto patches = Tensor::from({2, 1, 2}, {1, 2, 3, 4});
  Tape tape(false);
  auto grid = embed(tape, patches, pe, pos, cfg);
  CHECK(grid.tokens.at(1, 0) == 1 + 0.5 + 10);
  CHECK(grid.tokens.at(1, 1) == 2 - 0.5 + 20);
  CHECK(grid.tokens.at(2, 0) == 3 + 0.5 + 30);
  cfg.temporal_pos_emb = false;
  pos.temporal = Tensor();
  grid = embed(tape, patches, pe, pos, cfg);
  CHECK(grid.tokens.at(2, 1) == 4 - 0.5);
}

TEST_CASE("forward matches the straight-line oracle") {
  std::mt19937_64 rng(32);
  for (auto scheme : kSchemes)
    for (std::size_t depth : {1, 2}) {
      const auto cfg = toy_config(scheme, depth);
      auto model = Model::initialize(cfg, 40 + depth);
      // Non-trivial norm parameters so the oracle exercises them too.
      for (auto& [name, t] : model.parameters()) {
        if (name.find("norm") != std::string::npos || name.find("bias") != std::string::npos) {
          for (auto& v : t.data()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
        }
      }
      const auto pixels = random_pixels(cfg, rng);
      const auto expect = oracle_forward(model, pixels);
      for (bool masked : {false, true}) {
        Tape tape(false);
        ForwardOptions fo;
        fo.masked_attention = masked;
        const auto logits = forward(tape, model, pixels, fo);
        REQUIRE(logits.shape() == Shape{3});
        for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(logits[c] - expect[c]) <= 1e-10);
      }
    }
}

TEST_CASE("without a temporal embedding logits ignore frame order") {
  std::mt19937_64 rng(33);
  for (auto scheme : kSchemes) {
    auto cfg = toy_config(scheme, 2);
    cfg.frames = 4;
    cfg.temporal_pos_emb = false;
    const auto model = Model::initialize(cfg, 7);
    const auto pixels = random_pixels(cfg, rng);
    Tape tape(false);
    const auto a = forward(tape, model, pixels);
    const auto b = forward(tape, model, permute_frames(pixels, {2, 0, 3, 1}));
    CHECK(max_abs_diff(a, b) <= 1e-12);
  }
}

TEST_CASE("frame reversal changes logits when time is embedded") {
  std::mt19937_64 rng(34);
  for (auto scheme : {AttentionScheme::JointSpaceTime, AttentionScheme::DividedSpaceTime}) {
    auto cfg = toy_config(scheme, 2);
    cfg.frames = 4;
    const auto model = Model::initialize(cfg, 8);
    const auto pixels = random_pixels(cfg, rng);
    Tape tape(false);
    const auto a = forward(tape, model, pixels);
    const auto b = forward(tape, model, permute_frames(pixels, {3, 2, 1, 0}));
    CHECK(max_abs_diff(a, b) > 1e-9);
  }
}

TEST_CASE("space-only class tokens depend on their own frame only") {
  std::mt19937_64 rng(35);
  auto cfg = toy_config(AttentionScheme::SpaceOnly, 2);
  cfg.frames = 3;
  const auto model = Model::initialize(cfg, 9);
  auto pixels = random_pixels(cfg, rng);
  std::vector<Tensor> before, after;
  ForwardOptions fo;
  fo.class_tokens = &before;
  Tape tape(false);
  forward(tape, model, pixels, fo);
  for (std::size_t i = 0; i < pixels.numel() / 3; ++i) pixels[i * 3 + 1] = 1.0 - pixels[i * 3 + 1];
  fo.class_tokens = &after;
  forward(tape, model, pixels, fo);
  REQUIRE(before.size() == 3);
  CHECK(max_abs_diff(before[0], after[0]) == 0.0);
  CHECK(max_abs_diff(before[1], after[1]) > 1e-9);
  CHECK(max_abs_diff(before[2], after[2]) == 0.0);
}

TEST_CASE("whole-model gradients match finite differences") {
  std::mt19937_64 rng(36);
  for (auto scheme : kSchemes) {
    const auto cfg = toy_config(scheme, 2);
    const auto model = Model::initialize(cfg, 10);
    const auto pixels = random_pixels(cfg, rng);
    const int label = 2;
    auto loss = [&](Tape& tape) {
      return cross_entropy(tape, forward(tape, model, pixels), std::span<const int>(&label, 1));
    };
    const auto report = gradcheck_parameters(loss, model.parameters(), 1e-5);
    CHECK(report.parameters.size() == model.parameters().size());
    CHECK(report.max_error() <= 1e-4);
  }
}

TEST_CASE("one divided block on two frames of four patches passes the gradient check") {
  std::mt19937_64 rng(37);
  const auto cfg = toy_config(AttentionScheme::DividedSpaceTime, 1);
  const auto model = Model::initialize(cfg, 11);
  const auto pixels = random_pixels(cfg, rng);
  auto w = dsta::test::random_tensor({3}, rng);
  auto loss = [&](Tape& tape) { return ops::sum(tape, ops::mul(tape, forward(tape, model, pixels), w)); };
  CHECK(gradcheck_parameters(loss, model.parameters(), 1e-5).max_error() <= 1e-4);
}

TEST_CASE("parameter layout and initialization") {
  const auto cfg = toy_config(AttentionScheme::DividedSpaceTime, 2);
  const auto model = Model::initialize(cfg, 12);
  const auto params = model.parameters();
  const auto layout = parameter_layout(cfg);
  REQUIRE(params.size() == layout.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i].first == layout[i].first);
    CHECK(params[i].second.shape() == layout[i].second);
    count += params[i].second.numel();
  }
  CHECK(count == model.parameter_count());
  std::map<std::string, Tensor> by_name(params.begin(), params.end());
  for (double v : by_name.at("head.bias").data()) CHECK(v == 0.0);
  for (double v : by_name.at("norm.gamma").data()) CHECK(v == 1.0);
  for (double v : by_name.at("blocks.0.attn.query").data()) CHECK(std::abs(v) <= 1.0 / std::sqrt(8.0));
  CHECK(by_name.count("blocks.1.attn_t.query") == 1);

  auto joint = cfg;
  joint.scheme = AttentionScheme::JointSpaceTime;
  for (const auto& [name, shape] : parameter_layout(joint)) CHECK(name.find("attn_t") == std::string::npos);
  auto space = cfg;
  space.scheme = AttentionScheme::SpaceOnly;
  for (const auto& [name, shape] : parameter_layout(space)) CHECK(name != "pos_embed.temporal");

  const auto again = Model::initialize(cfg, 12);
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(max_abs_diff(params[i].second, again.parameters()[i].second) == 0.0);
  const auto other = Model::initialize(cfg, 13);
  CHECK(max_abs_diff(params[0].second, other.parameters()[0].second) > 0.0);
}

TEST_CASE("non-finite activations name the block") {
  std::mt19937_64 rng(38);
  const auto cfg = toy_config(AttentionScheme::JointSpaceTime, 2);
  auto model = Model::initialize(cfg, 14);
  model.blocks[1].mlp.fc2_bias[0] = std::numeric_limits<double>::infinity();
  Tape tape(false);
  try {
    forward(tape, model, random_pixels(cfg, rng));
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("block 1") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip is exact") {
  std::mt19937_64 rng(39);
  for (auto scheme : kSchemes) {
    const auto cfg = toy_config(scheme, 2);
    const auto model = Model::initialize(cfg, 15);
    const auto path = temp_path("roundtrip.ckpt");
    save_checkpoint(Checkpoint::of(model), path);
    const auto loaded = load_checkpoint(path).to_model();
    CHECK(loaded.config == cfg);
    const auto pixels = random_pixels(cfg, rng);
    Tape tape(false);
    CHECK(max_abs_diff(forward(tape, model, pixels), forward(tape, loaded, pixels)) == 0.0);

    std::size_t header = 0;
    {
      std::ifstream in(path, std::ios::binary);
      char magic[4];
      std::uint32_t version = 0, length = 0;
      in.read(magic, 4);
      in.read(reinterpret_cast<char*>(&version), 4);
      in.read(reinterpret_cast<char*>(&length), 4);
      CHECK(std::string(magic, 4) == "DSTA");
      CHECK(version == 1);
      header = 12 + length;
    }
    CHECK(fs::file_size(path) == header + 8 * model.parameter_count());
    fs::remove(path);
  }
}

TEST_CASE("checkpoint loading rejects inconsistent files") {
  const auto cfg = toy_config(AttentionScheme::DividedSpaceTime, 1);
  const auto model = Model::initialize(cfg, 16);
  const auto path = temp_path("bad.ckpt");
  save_checkpoint(Checkpoint::of(model), path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) { std::ofstream(path, std::ios::binary) << b; };

  auto edited = bytes;
  const auto at = edited.find("num_classes 3");
  REQUIRE(at != std::string::npos);
  edited[at + 12] = '4';
  write(edited);
  try {
    load_checkpoint(path);
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("head.weight") != std::string::npos);
  }

  write(bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  write(bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write(bad_magic);
  CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  write(bad_version);
  CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), LoadError);
  fs::remove(path);
}

TEST_CASE("from_parameters rejects missing tensors") {
  const auto cfg = toy_config(AttentionScheme::JointSpaceTime, 1);
  auto params = Model::initialize(cfg, 17).parameters();
  params.pop_back();
  CHECK_THROWS_AS(Model::from_parameters(cfg, params), ConfigError);
}
