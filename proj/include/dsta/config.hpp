#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace dsta {

enum class AttentionScheme { SpaceOnly, JointSpaceTime, DividedSpaceTime };

// "space", "joint", "divided"
std::string_view scheme_name(AttentionScheme scheme);
AttentionScheme parse_scheme(std::string_view name);

// Geometry and width of the video transformer. The defaults are the desk-scale
// model; base() is the full-size 8x224x224 configuration.
struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t frames = 8;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t mlp_dim = 128;
  std::size_t num_classes = 2;
  AttentionScheme scheme = AttentionScheme::DividedSpaceTime;
  // Learned per-frame embedding added to every patch of a frame. Space-only
  // models treat frames as independent images and never use it.
  bool temporal_pos_emb = true;
  double ln_eps = 1e-6;

  static ModelConfig desk() { return {}; }
  static ModelConfig base();

  std::size_t patches_per_frame() const { return (height / patch) * (width / patch); }
  std::size_t patch_width() const { return channels * patch * patch; }
  std::size_t head_dim() const { return dim / heads; }
  bool uses_temporal_embedding() const { return temporal_pos_emb && scheme != AttentionScheme::SpaceOnly; }

  // Throws ConfigError describing the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace dsta
