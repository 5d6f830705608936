#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dsta/config.hpp"
#include "dsta/model.hpp"

namespace dsta {

// On-disk layout (all integers little-endian):
//
//   "DSTA"                 4 bytes magic
//   version                u32
//   header length          u32, bytes of the text block that follows
//   header                 text: one "key value" line per config field, then
//                          "param <name> <d0> <d1> ..." per parameter
//   payload                f64 little-endian values of each parameter, in
//                          header order
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig config;
  std::vector<NamedTensor> parameters;
  std::uint32_t version = kFormatVersion;

  static Checkpoint of(const Model& model);  // deep copy of the parameters
  Model to_model() const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// Throws LoadError on a bad magic or version, a truncated file, or parameters
// that disagree with the embedded config (the message names the parameter).
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dsta
