#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "dsta/config.hpp"
#include "dsta/tensor.hpp"

namespace dsta::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// F=2, N=4 (8x8 frames, 4x4 patches), D=8, 2 heads.
inline ModelConfig toy_config(AttentionScheme scheme, std::size_t depth = 1) {
  ModelConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.patch = 4;
  cfg.frames = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.depth = depth;
  cfg.mlp_dim = 16;
  cfg.num_classes = 3;
  cfg.scheme = scheme;
  return cfg;
}

inline Tensor random_pixels(const ModelConfig& cfg, std::mt19937_64& rng) {
  return random_tensor({cfg.height, cfg.width, cfg.channels, cfg.frames}, rng, 0.0, 1.0);
}

}  // namespace dsta::test
