#include "dsta/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dsta/errors.hpp"

namespace dsta {

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("synthetic spec: " + what); };
  if (height == 0 || width == 0 || render_height == 0 || render_width == 0) fail("image sizes must be positive");
  if (frames < 3) fail("need at least 3 frames to tell ordered from shuffled clips");
  if (!(radius_min > 0.0) || radius_max < radius_min || radius_max > 0.5) fail("blob radius range is invalid");
  if (intensity_low < 0.0 || intensity_high > 1.0 || intensity_high - intensity_low < min_ramp || min_ramp <= 0.0) {
    fail("intensity ramp range is invalid");
  }
  if (noise < 0.0) fail("noise must be non-negative");
  if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction > 1.0) {
    fail("split fractions must be non-negative and sum to at most 1");
  }
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "unknown";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw DataError("unknown split '" + std::string(name) + "'");
}

std::vector<const DatasetItem*> Dataset::split(Split which) const {
  std::vector<const DatasetItem*> out;
  for (const auto& item : items) {
    if (item.split == which) out.push_back(&item);
  }
  return out;
}

std::size_t Dataset::count(Split which) const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [&](const DatasetItem& i) { return i.split == which; }));
}

Tensor resize(const Tensor& frame, std::size_t target_height, std::size_t target_width) {
  if (frame.rank() != 3) throw DimensionError("resize: expected [H x W x C], got " + shape_to_string(frame.shape()));
  if (target_height == 0 || target_width == 0) throw DimensionError("resize: target size must be positive");
  const auto H = frame.dim(0), W = frame.dim(1), C = frame.dim(2);
  if (H == target_height && W == target_width) return frame.clone();

  auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    return dst == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
  };
  auto in = frame.data();
  std::vector<double> out(target_height * target_width * C);
  for (std::size_t y = 0; y < target_height; ++y) {
    const double sy = coord(y, H, target_height);
    const auto y0 = std::min(static_cast<std::size_t>(sy), H - 1);
    const auto y1 = std::min(y0 + 1, H - 1);
    const double wy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_width; ++x) {
      const double sx = coord(x, W, target_width);
      const auto x0 = std::min(static_cast<std::size_t>(sx), W - 1);
      const auto x1 = std::min(x0 + 1, W - 1);
      const double wx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double a = in[(y0 * W + x0) * C + c], b = in[(y0 * W + x1) * C + c];
        const double d = in[(y1 * W + x0) * C + c], e = in[(y1 * W + x1) * C + c];
        const double top = a + wx * (b - a);
        const double bottom = d + wx * (e - d);
        const double v = top + wy * (bottom - top);
        out[(y * target_width + x) * C + c] = std::clamp(v, std::min({a, b, d, e}), std::max({a, b, d, e}));
      }
    }
  }
  return Tensor::from({target_height, target_width, C}, std::move(out));
}

namespace {

Tensor extract_frame(const Tensor& pixels, std::size_t f) {
  const auto H = pixels.dim(0), W = pixels.dim(1), C = pixels.dim(2), F = pixels.dim(3);
  std::vector<double> out(H * W * C);
  auto in = pixels.data();
  for (std::size_t i = 0; i < H * W * C; ++i) out[i] = in[i * F + f];
  return Tensor::from({H, W, C}, std::move(out));
}

Tensor stack_frames(const std::vector<Tensor>& frames) {
  const auto H = frames[0].dim(0), W = frames[0].dim(1), C = frames[0].dim(2), F = frames.size();
  std::vector<double> out(H * W * C * F);
  for (std::size_t f = 0; f < F; ++f) {
    auto in = frames[f].data();
    for (std::size_t i = 0; i < H * W * C; ++i) out[i * F + f] = in[i];
  }
  return Tensor::from({H, W, C, F}, std::move(out));
}

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

// Positive clip frames of one pair, in temporal order.
std::vector<Tensor> render_ramp(const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto RH = spec.render_height, RW = spec.render_width, F = spec.frames;
  const double cy = (0.3 + 0.4 * unit(rng)) * static_cast<double>(RH);
  const double cx = (0.3 + 0.4 * unit(rng)) * static_cast<double>(RW);
  const double radius =
      (spec.radius_min + (spec.radius_max - spec.radius_min) * unit(rng)) * static_cast<double>(std::min(RH, RW));
  const double start = spec.intensity_low + (spec.intensity_high - spec.min_ramp - spec.intensity_low) * unit(rng);
  const double end = start + spec.min_ramp + (spec.intensity_high - start - spec.min_ramp) * unit(rng);
  double background[3], colour[3];
  for (auto& b : background) b = 0.05 + 0.25 * unit(rng);
  for (auto& c : colour) c = 0.6 + 0.4 * unit(rng);

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<Tensor> frames;
  for (std::size_t t = 0; t < F; ++t) {
    const double level = start + (end - start) * static_cast<double>(t) / static_cast<double>(F - 1);
    std::vector<double> img(RH * RW * 3);
    for (std::size_t y = 0; y < RH; ++y)
      for (std::size_t x = 0; x < RW; ++x) {
        const double dist = std::hypot(static_cast<double>(y) + 0.5 - cy, static_cast<double>(x) + 0.5 - cx);
        const double cover = std::clamp(radius + 0.5 - dist, 0.0, 1.0);
        for (std::size_t c = 0; c < 3; ++c) {
          img[(y * RW + x) * 3 + c] = background[c] * (1.0 - cover) + cover * level * colour[c];
        }
      }
    auto frame = resize(Tensor::from({RH, RW, 3}, std::move(img)), spec.height, spec.width);
    for (auto& v : frame.data()) {
      v = std::clamp(v + spec.noise * noise(rng), 0.0, 1.0);
      v = static_cast<double>(static_cast<float>(v));
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

// A uniformly random permutation that is neither sorted nor reversed.
std::vector<std::size_t> shuffled_order(std::size_t frames, std::mt19937_64& rng) {
  std::vector<std::size_t> order(frames);
  while (true) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const bool ascending = std::is_sorted(order.begin(), order.end());
    const bool descending = std::is_sorted(order.rbegin(), order.rend());
    if (!ascending && !descending) return order;
  }
}

std::vector<Tensor> permuted(const std::vector<Tensor>& frames, const std::vector<std::size_t>& order) {
  std::vector<Tensor> out;
  for (auto i : order) out.push_back(frames[i]);
  return out;
}

}  // namespace

Dataset generate(const SyntheticSpec& spec, std::size_t count) {
  spec.validate();
  if (count == 0) throw ConfigError("generate: count must be at least 1");

  const std::size_t pairs = (count + 1) / 2;
  const auto val_pairs = static_cast<std::size_t>(std::llround(static_cast<double>(pairs) * spec.val_fraction));
  const auto test_pairs = static_cast<std::size_t>(std::llround(static_cast<double>(pairs) * spec.test_fraction));
  if (val_pairs + test_pairs > pairs) throw ConfigError("generate: split fractions leave no room");
  const std::size_t train_pairs = pairs - val_pairs - test_pairs;

  Dataset ds;
  ds.class_names = {"no_change", "state_change"};
  for (std::size_t k = 0; k < pairs; ++k) {
    auto rng = derived_rng(spec.seed, k);
    const auto frames = render_ramp(spec, rng);
    const Split split = k < train_pairs ? Split::Train : (k < train_pairs + val_pairs ? Split::Val : Split::Test);

    std::vector<Tensor> first, second;
    if (spec.task == SyntheticTask::StateChange) {
      first = frames;
      second = permuted(frames, shuffled_order(spec.frames, rng));
    } else {
      first = permuted(frames, shuffled_order(spec.frames, rng));
      second = permuted(frames, shuffled_order(spec.frames, rng));
    }
    const auto base = "s" + std::to_string(spec.seed) + "-" + std::to_string(k);
    ds.items.push_back({VideoClip{stack_frames(first), 1, base + "a"}, split});
    if (ds.items.size() < count) ds.items.push_back({VideoClip{stack_frames(second), 0, base + "b"}, split});
  }
  return ds;
}

VideoClip resize_video(const VideoClip& video, std::size_t target_height, std::size_t target_width) {
  std::vector<Tensor> frames;
  for (std::size_t f = 0; f < video.frames(); ++f) {
    frames.push_back(resize(extract_frame(video.pixels, f), target_height, target_width));
  }
  return {stack_frames(frames), video.label, video.source_id};
}

VideoClip crop_clip(const VideoClip& video, std::size_t start, std::size_t top, std::size_t left,
                    const ModelConfig& cfg) {
  const auto H = video.height(), W = video.width(), C = video.channels(), F = video.frames();
  const auto h = cfg.height, w = cfg.width, n = cfg.frames;
  if (C != cfg.channels) {
    throw DataError("video " + video.source_id + " has " + std::to_string(C) + " channels, model expects " +
                    std::to_string(cfg.channels));
  }
  if (start + n > F || top + h > H || left + w > W) {
    throw DataError("clip window out of range for video " + video.source_id + " of shape " +
                    shape_to_string(video.pixels.shape()));
  }
  std::vector<double> out(h * w * C * n);
  auto in = video.pixels.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = in.data() + (((top + y) * W + (left + x)) * C + c) * F + start;
        std::copy_n(src, n, out.begin() + static_cast<std::ptrdiff_t>(((y * w + x) * C + c) * n));
      }
  return {Tensor::from({h, w, C, n}, std::move(out)), video.label, video.source_id};
}

namespace {

void require_fits(const VideoClip& video, const ModelConfig& cfg) {
  if (video.pixels.rank() != 4) throw DataError("video " + video.source_id + " is not [H x W x C x F]");
  if (video.frames() < cfg.frames || video.height() < cfg.height || video.width() < cfg.width) {
    throw DataError("video " + video.source_id + " of shape " + shape_to_string(video.pixels.shape()) +
                    " is smaller than the " + std::to_string(cfg.frames) + "-frame " + std::to_string(cfg.height) +
                    "x" + std::to_string(cfg.width) + " model input");
  }
}

std::size_t uniform_index(std::size_t max_inclusive, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(0, max_inclusive)(rng);
}

}  // namespace

VideoClip sample_training_clip(const VideoClip& video, const ModelConfig& cfg, std::mt19937_64& rng) {
  require_fits(video, cfg);
  const auto start = uniform_index(video.frames() - cfg.frames, rng);
  const auto top = uniform_index(video.height() - cfg.height, rng);
  const auto left = uniform_index(video.width() - cfg.width, rng);
  return crop_clip(video, start, top, left, cfg);
}

std::vector<VideoClip> sample_inference_clips(const VideoClip& video, const ModelConfig& cfg, std::mt19937_64& rng,
                                              CropMode mode) {
  require_fits(video, cfg);
  const auto slack_y = video.height() - cfg.height, slack_x = video.width() - cfg.width;
  std::vector<VideoClip> clips;
  for (int t = 0; t < 3; ++t) {
    const auto start = uniform_index(video.frames() - cfg.frames, rng);
    for (std::size_t s = 0; s < 3; ++s) {
      std::size_t top, left;
      if (mode == CropMode::Random) {
        top = uniform_index(slack_y, rng);
        left = uniform_index(slack_x, rng);
      } else if (slack_x >= slack_y) {
        top = slack_y / 2;
        left = s * slack_x / 2;
      } else {
        top = s * slack_y / 2;
        left = slack_x / 2;
      }
      clips.push_back(crop_clip(video, start, top, left, cfg));
    }
  }
  return clips;
}

std::string dataset_format_description() {
  return R"(Dataset file layout (version 1)

A text header followed by a binary payload.

Header lines, each terminated by '\n':
  DSTA-DATASET 1
  items <count>
  classes <name0> <name1> ...
  item <id> <offset> <label> <split> <height> <width> <frames>   (one per item)
  end

<offset> is the byte offset of the item's pixels from the first payload byte;
offsets are strictly increasing. <split> is train, val or test.

The payload starts right after "end\n" and concatenates every video as
little-endian IEEE-754 32-bit floats in [0, 1], shape height x width x 3 x
frames in row-major order: pixel (y, x, c) of frame f is element
((y * width + x) * 3 + c) * frames + f.
)";
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ostringstream header;
  header << "DSTA-DATASET 1\n" << "items " << dataset.items.size() << "\nclasses";
  for (const auto& c : dataset.class_names) header << ' ' << c;
  header << '\n';
  std::uint64_t offset = 0;
  for (const auto& item : dataset.items) {
    const auto& v = item.video;
    if (v.source_id.empty() || v.source_id.find_first_of(" \t\n") != std::string::npos) {
      throw DataError("item id '" + v.source_id + "' must be non-empty without whitespace");
    }
    header << "item " << v.source_id << ' ' << offset << ' ' << v.label << ' ' << split_name(item.split) << ' '
           << v.height() << ' ' << v.width() << ' ' << v.frames() << '\n';
    offset += v.pixels.numel() * 4;
  }
  header << "end\n";

  std::string bytes = header.str();
  bytes.reserve(bytes.size() + offset);
  for (const auto& item : dataset.items) {
    for (double v : item.video.pixels.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open dataset for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing dataset: " + path.string());
}

namespace {

DatasetManifest parse_manifest(std::istream& in, const std::string& where) {
  std::string line;
  if (!std::getline(in, line) || line != "DSTA-DATASET 1") throw DataError("not a dataset file: " + where);
  DatasetManifest m;
  std::size_t declared = 0;
  bool ended = false;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key == "end") {
      ended = true;
      break;
    }
    if (key == "items") {
      fields >> declared;
    } else if (key == "classes") {
      std::string name;
      while (fields >> name) m.class_names.push_back(name);
    } else if (key == "item") {
      ManifestEntry e;
      std::string split;
      if (!(fields >> e.id >> e.offset >> e.label >> split >> e.height >> e.width >> e.frames)) {
        throw DataError("malformed item line '" + line + "' in " + where);
      }
      e.split = parse_split(split);
      if (e.height == 0 || e.width == 0 || e.frames == 0) throw DataError("empty video " + e.id + " in " + where);
      if (e.label < 0 || static_cast<std::size_t>(e.label) >= std::max<std::size_t>(m.class_names.size(), 1)) {
        throw DataError("label " + std::to_string(e.label) + " of " + e.id + " out of range in " + where);
      }
      if (!m.entries.empty() && e.offset <= m.entries.back().offset) {
        throw DataError("item offsets are not increasing at " + e.id + " in " + where);
      }
      m.entries.push_back(e);
    } else {
      throw DataError("unknown header line '" + line + "' in " + where);
    }
  }
  if (!ended) throw DataError("dataset header not terminated in " + where);
  if (declared != m.entries.size()) {
    throw DataError("dataset declares " + std::to_string(declared) + " items but lists " +
                    std::to_string(m.entries.size()) + " in " + where);
  }
  return m;
}

}  // namespace

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return parse_manifest(in, path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  const auto manifest = parse_manifest(in, path.string());
  const auto payload_start = static_cast<std::uint64_t>(in.tellg());
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Dataset ds;
  ds.class_names = manifest.class_names;
  std::uint64_t expected_offset = 0;
  for (const auto& e : manifest.entries) {
    const std::size_t n = e.height * e.width * 3 * e.frames;
    if (e.offset != expected_offset) {
      throw DataError("item " + e.id + " offset " + std::to_string(e.offset) + " does not follow the previous item");
    }
    if (payload.size() < e.offset + n * 4) {
      throw DataError("payload truncated in item " + e.id + " of " + path.string() + " (payload starts at byte " +
                      std::to_string(payload_start) + ")");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[e.offset + i * 4 + b])) << (8 * b);
      }
      values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    expected_offset = e.offset + n * 4;
    ds.items.push_back({VideoClip{Tensor::from({e.height, e.width, 3, e.frames}, std::move(values)), e.label, e.id},
                        e.split});
  }
  if (expected_offset != payload.size()) throw DataError("trailing bytes after payload in " + path.string());
  return ds;
}

}  // namespace dsta
