#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dsta/config.hpp"
#include "dsta/tensor.hpp"

namespace dsta {

// Pixels are [H x W x 3 x F] in [0, 1], row-major, so pixel (y, x, c) of
// frame f lives at ((y * W + x) * 3 + c) * F + f.
struct VideoClip {
  Tensor pixels;
  int label = 0;
  std::string source_id;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
  std::size_t channels() const { return pixels.dim(2); }
  std::size_t frames() const { return pixels.dim(3); }
};

enum class SyntheticTask {
  // Label 1: a blob brightens monotonically over the clip. Label 0: the same
  // frames in a shuffled, non-monotonic order.
  StateChange,
  // Both labels are shuffled clips; nothing is learnable.
  FrameShuffleControl,
};

struct SyntheticSpec {
  SyntheticTask task = SyntheticTask::StateChange;
  // Frames are drawn at the render size, then bilinearly resized to the
  // stored size.
  std::size_t render_height = 48;
  std::size_t render_width = 60;
  std::size_t height = 36;
  std::size_t width = 44;
  // Stored frames per video (already at the sampling stride).
  std::size_t frames = 8;
  // Blob radius as a fraction of the shorter side.
  double radius_min = 0.4;
  double radius_max = 0.5;
  // Blob brightness ramps from a start to an end level inside
  // [intensity_low, intensity_high], rising by at least min_ramp.
  double intensity_low = 0.0;
  double intensity_high = 1.0;
  double min_ramp = 0.9;
  // Std of the per-pixel Gaussian noise.
  double noise = 0.03;
  double val_fraction = 0.0;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Split { Train, Val, Test };
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct DatasetItem {
  VideoClip video;
  Split split = Split::Train;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<DatasetItem> items;

  std::vector<const DatasetItem*> split(Split which) const;
  std::size_t count(Split which) const;
};

// Items come in pairs drawn from one seed: item 2k is the positive clip and
// item 2k+1 holds the same frames in shuffled order. Pairs never straddle
// splits. Throws ConfigError on an invalid spec or count == 0.
Dataset generate(const SyntheticSpec& spec, std::size_t count);

// Entry of the dataset file's text header.
struct ManifestEntry {
  std::string id;
  std::uint64_t offset = 0;  // bytes from the start of the payload
  int label = 0;
  Split split = Split::Train;
  std::size_t height = 0, width = 0, frames = 0;
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
};

// Human-readable description of the dataset file layout.
std::string dataset_format_description();

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
// Throws DataError on malformed or truncated files.
Dataset load_dataset(const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

// Bilinear resize of one frame [H x W x C] with corner-aligned sampling: output
// pixel i maps to source coordinate i * (S - 1) / (T - 1), so the four corners
// are copied exactly. A target extent of 1 samples the first row/column.
Tensor resize(const Tensor& frame, std::size_t target_height, std::size_t target_width);
// Applies resize() to every frame of a clip.
VideoClip resize_video(const VideoClip& video, std::size_t target_height, std::size_t target_width);

// F consecutive frames starting at `start`, cropped at (top, left) to the
// configured size.
VideoClip crop_clip(const VideoClip& video, std::size_t start, std::size_t top, std::size_t left,
                    const ModelConfig& cfg);

// Uniform start frame and one uniform spatial crop shared by all frames.
// Throws DataError when the video is shorter or smaller than the model input.
VideoClip sample_training_clip(const VideoClip& video, const ModelConfig& cfg, std::mt19937_64& rng);

enum class CropMode {
  Random,
  // Three crops spread evenly along the axis with the most slack, centred on
  // the other one.
  Deterministic,
};

// 3 random temporal windows x 3 crops, temporal-major.
std::vector<VideoClip> sample_inference_clips(const VideoClip& video, const ModelConfig& cfg, std::mt19937_64& rng,
                                              CropMode mode = CropMode::Random);

}  // namespace dsta
