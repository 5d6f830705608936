#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "dsta/data.hpp"
#include "dsta/errors.hpp"
#include "helpers.hpp"

using namespace dsta;
namespace fs = std::filesystem;

namespace {

std::vector<double> frame_sums(const Tensor& pixels) {
  const auto F = pixels.dim(3);
  std::vector<double> sums(F, 0.0);
  for (std::size_t i = 0; i < pixels.numel(); ++i) sums[i % F] += pixels[i];
  return sums;
}

SyntheticSpec small_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.render_height = 24;
  spec.render_width = 30;
  spec.height = 18;
  spec.width = 22;
  spec.frames = 4;
  spec.seed = seed;
  return spec;
}

VideoClip counting_video(std::size_t H, std::size_t W, std::size_t F) {
  std::vector<double> v(H * W * 3 * F);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i) / static_cast<double>(v.size());
  return {Tensor::from({H, W, 3, F}, std::move(v)), 1, "count"};
}

ModelConfig clip_config(std::size_t H, std::size_t W, std::size_t F) {
  ModelConfig cfg;
  cfg.height = H;
  cfg.width = W;
  cfg.frames = F;
  cfg.patch = 2;
  return cfg;
}

}  // namespace

TEST_CASE("pairs share their frame multiset") {
  const auto ds = generate(small_spec(3), 40);
  REQUIRE(ds.items.size() == 40);
  for (std::size_t k = 0; k < 20; ++k) {
    const auto& pos = ds.items[2 * k].video;
    const auto& neg = ds.items[2 * k + 1].video;
    CHECK(pos.label == 1);
    CHECK(neg.label == 0);
    auto a = frame_sums(pos.pixels), b = frame_sums(neg.pixels);
    CHECK(a != b);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("noise-free positives brighten every frame") {
  auto spec = small_spec(4);
  spec.noise = 0.0;
  const auto ds = generate(spec, 20);
  for (std::size_t k = 0; k < 10; ++k) {
    const auto sums = frame_sums(ds.items[2 * k].video.pixels);
    for (std::size_t t = 1; t < sums.size(); ++t) CHECK(sums[t] > sums[t - 1]);
    const auto shuffled = frame_sums(ds.items[2 * k + 1].video.pixels);
    CHECK(!std::is_sorted(shuffled.begin(), shuffled.end()));
    CHECK(!std::is_sorted(shuffled.rbegin(), shuffled.rend()));
  }
}

TEST_CASE("generation is deterministic and in range") {
  const auto a = generate(small_spec(5), 11);
  const auto b = generate(small_spec(5), 11);
  const auto c = generate(small_spec(6), 11);
  REQUIRE(a.items.size() == 11);
  bool differs = false;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].video.source_id == b.items[i].video.source_id);
    CHECK(dsta::test::max_abs_diff(a.items[i].video.pixels, b.items[i].video.pixels) == 0.0);
    differs = differs || dsta::test::max_abs_diff(a.items[i].video.pixels, c.items[i].video.pixels) > 0.0;
    for (double v : a.items[i].video.pixels.data()) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK(differs);
}

TEST_CASE("splits partition pairs") {
  auto spec = small_spec(7);
  spec.val_fraction = 0.2;
  spec.test_fraction = 0.1;
  const auto ds = generate(spec, 100);
  CHECK(ds.count(Split::Train) + ds.count(Split::Val) + ds.count(Split::Test) == 100);
  CHECK(ds.count(Split::Val) == 20);
  CHECK(ds.count(Split::Test) == 10);
  for (std::size_t k = 0; k < 50; ++k) CHECK(ds.items[2 * k].split == ds.items[2 * k + 1].split);
  std::set<std::string> ids;
  for (const auto& item : ds.items) ids.insert(item.video.source_id);
  CHECK(ids.size() == 100);
}

TEST_CASE("invalid specs are configuration errors") {
  auto spec = small_spec(1);
  CHECK_THROWS_AS(generate(spec, 0), ConfigError);
  spec.frames = 2;
  CHECK_THROWS_AS(generate(spec, 4), ConfigError);
  spec = small_spec(1);
  spec.val_fraction = 0.8;
  spec.test_fraction = 0.5;
  CHECK_THROWS_AS(generate(spec, 4), ConfigError);
  spec = small_spec(1);
  spec.noise = -1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("an order-blind logistic classifier is at chance") {
  SyntheticSpec spec;
  spec.seed = 8;
  const auto ds = generate(spec, 1000);
  // Features: per-channel mean and spread of the time-averaged frame.
  std::vector<std::array<double, 7>> x;
  std::vector<int> y;
  for (const auto& item : ds.items) {
    const auto& px = item.video.pixels;
    const auto F = px.dim(3);
    std::array<double, 7> f{};
    std::array<double, 3> sq{};
    const auto pixels = px.numel() / (3 * F);
    for (std::size_t i = 0; i < px.numel() / F; ++i) {
      double mean = 0.0;
      for (std::size_t t = 0; t < F; ++t) mean += px[i * F + t] / static_cast<double>(F);
      f[i % 3] += mean / static_cast<double>(pixels);
      sq[i % 3] += mean * mean / static_cast<double>(pixels);
    }
    for (int c = 0; c < 3; ++c) f[3 + c] = std::sqrt(std::max(0.0, sq[c] - f[c] * f[c]));
    f[6] = 1.0;
    x.push_back(f);
    y.push_back(item.video.label);
  }
  std::array<double, 7> w{};
  for (int it = 0; it < 300; ++it) {
    std::array<double, 7> g{};
    for (std::size_t i = 0; i < x.size(); ++i) {
      double z = 0.0;
      for (int j = 0; j < 7; ++j) z += w[j] * x[i][j];
      const double p = 1.0 / (1.0 + std::exp(-z));
      for (int j = 0; j < 7; ++j) g[j] += (p - y[i]) * x[i][j] / static_cast<double>(x.size());
    }
    for (int j = 0; j < 7; ++j) w[j] -= 1.0 * g[j];
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double z = 0.0;
    for (int j = 0; j < 7; ++j) z += w[j] * x[i][j];
    correct += (z > 0.0) == (y[i] == 1);
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(x.size());
  CHECK(std::abs(acc - 0.5) <= 0.05);
}

TEST_CASE("resize conventions") {
  std::mt19937_64 rng(9);
  const auto frame = dsta::test::random_tensor({5, 7, 3}, rng, 0, 1);
  CHECK(dsta::test::max_abs_diff(resize(frame, 5, 7), frame) == 0.0);

  const auto flat = Tensor::full({6, 9, 3}, 0.37);
  const auto flat_small = resize(flat, 4, 13);
  for (double v : flat_small.data()) CHECK(v == 0.37);

  // 4x4 ramp v = 4y + x; corner-aligned 2x2 sampling lands on the corners
  // (0,0), (0,3), (3,0), (3,3).
  std::vector<double> ramp(16);
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  const auto small = resize(Tensor::from({4, 4, 1}, ramp), 2, 2);
  CHECK(small[0] == 0.0);
  CHECK(small[1] == 3.0);
  CHECK(small[2] == 12.0);
  CHECK(small[3] == 15.0);

  // 2x2 -> 3x3: centre is the mean of the four corners, edge midpoints the
  // mean of two.
  const auto up = resize(Tensor::from({2, 2, 1}, {0.0, 1.0, 2.0, 4.0}), 3, 3);
  CHECK(up[1] == doctest::Approx(0.5));
  CHECK(up[3] == doctest::Approx(1.0));
  CHECK(up[4] == doctest::Approx(1.75));
  CHECK(up[8] == 4.0);

  const auto tall = resize(frame, 11, 3);
  for (double v : tall.data()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("training clip sampling") {
  std::mt19937_64 rng(10);
  const auto exact = counting_video(4, 6, 3);
  const auto clip = sample_training_clip(exact, clip_config(4, 6, 3), rng);
  CHECK(dsta::test::max_abs_diff(clip.pixels, exact.pixels) == 0.0);

  CHECK_THROWS_AS(sample_training_clip(exact, clip_config(4, 6, 4), rng), DataError);
  CHECK_THROWS_AS(sample_training_clip(exact, clip_config(6, 6, 3), rng), DataError);

  // Start frames of a 16-frame video with F=8 are uniform over 0..8.
  const auto longer = counting_video(2, 2, 16);
  const auto cfg = clip_config(2, 2, 8);
  std::array<int, 9> hist{};
  for (int i = 0; i < 1000; ++i) {
    const auto c = sample_training_clip(longer, cfg, rng);
    const auto start = static_cast<std::size_t>(std::llround(c.pixels[0] * static_cast<double>(longer.pixels.numel())));
    REQUIRE(start < 9);
    ++hist[start];
  }
  double chi2 = 0.0;
  for (int h : hist) chi2 += (h - 1000.0 / 9) * (h - 1000.0 / 9) / (1000.0 / 9);
  CHECK(chi2 < 26.12);  // 8 degrees of freedom, p = 0.001

  // A crop keeps one window for every frame.
  const auto wide = counting_video(6, 8, 3);
  const auto crop = sample_training_clip(wide, clip_config(4, 4, 3), rng);
  const double offset = crop.pixels[0] - wide.pixels[0];
  for (std::size_t f = 1; f < 3; ++f) {
    CHECK(crop.pixels[f] - wide.pixels[f] == doctest::Approx(offset));
  }
}

TEST_CASE("inference clips") {
  std::mt19937_64 rng(11);
  const auto exact = counting_video(4, 4, 2);
  const auto clips = sample_inference_clips(exact, clip_config(4, 4, 2), rng);
  REQUIRE(clips.size() == 9);
  for (const auto& c : clips) CHECK(dsta::test::max_abs_diff(c.pixels, exact.pixels) == 0.0);

  const auto video = counting_video(8, 10, 6);
  const auto cfg = clip_config(4, 4, 3);
  std::mt19937_64 r1(12), r2(12);
  const auto a = sample_inference_clips(video, cfg, r1);
  const auto b = sample_inference_clips(video, cfg, r2);
  REQUIRE(a.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(a[i].pixels.shape() == Shape{4, 4, 3, 3});
    CHECK(dsta::test::max_abs_diff(a[i].pixels, b[i].pixels) == 0.0);
  }

  const auto fixed = sample_inference_clips(video, cfg, r1, CropMode::Deterministic);
  // Left, centre and right crops: slack 6 along the width, 4 along the height.
  const std::size_t W = video.width(), C = 3, F = video.frames();
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& c = fixed[s].pixels;
    double first = c[0];
    std::size_t idx = 0;
    while (std::abs(video.pixels[idx] - first) > 1e-15) ++idx;
    const auto x = (idx / (C * F)) % W, y = idx / (W * C * F);
    CHECK(x == s * 3);
    CHECK(y == 2);
  }
}

TEST_CASE("dataset file round trip") {
  auto spec = small_spec(13);
  spec.val_fraction = 0.25;
  const auto ds = generate(spec, 8);
  const auto path = fs::temp_directory_path() / "dsta_test_dataset.bin";
  save_dataset(ds, path);
  const auto loaded = load_dataset(path);
  REQUIRE(loaded.items.size() == ds.items.size());
  CHECK(loaded.class_names == ds.class_names);
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    CHECK(loaded.items[i].video.source_id == ds.items[i].video.source_id);
    CHECK(loaded.items[i].video.label == ds.items[i].video.label);
    CHECK(loaded.items[i].split == ds.items[i].split);
    // Generated values are already float-representable.
    CHECK(dsta::test::max_abs_diff(loaded.items[i].video.pixels, ds.items[i].video.pixels) == 0.0);
  }
  const auto manifest = read_manifest(path);
  REQUIRE(manifest.entries.size() == 8);
  for (std::size_t i = 1; i < 8; ++i) CHECK(manifest.entries[i].offset > manifest.entries[i - 1].offset);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(load_dataset(path), DataError);
  std::ofstream(path, std::ios::binary) << "not a dataset\n";
  CHECK_THROWS_AS(load_dataset(path), DataError);
  fs::remove(path);
  CHECK_THROWS_AS(load_dataset(path), DataError);
  CHECK(dataset_format_description().find("little-endian") != std::string::npos);
}
