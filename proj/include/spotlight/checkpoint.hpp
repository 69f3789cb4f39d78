#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spotlight/model.hpp"
#include "spotlight/pathway.hpp"

namespace spotlight {

// Adam moments, aligned with ParameterSet::parameters().
struct OptimizerState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;  // completed epochs
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// What a checkpoint needs besides weights to run on raw pathway images.
struct LabelInfo {
  DimensionConfig dims = DimensionConfig::defaults();
  std::vector<std::uint32_t> class_codes;  // vocabulary index per non-END class
  std::vector<std::string> class_names;    // aligned with class_codes
};

struct Checkpoint {
  ModelConfig config;
  LabelInfo labels;
  ParameterSet params;
  std::optional<OptimizerState> optimizer;
};

namespace spot {

inline constexpr std::uint8_t kVersion = 1;

// "SPOT", u8 version, u32 JSON length + JSON {model, dims, classes}, then
// parameters and batch-norm buffers in declaration order (u8 rank, u32
// extents, f64 values, little-endian), then an optional optimizer block.
std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
// Throws FormatError on bad magic, version mismatch, truncation, shape
// mismatch or trailing bytes.
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void save(const std::string& path, const Checkpoint& ckpt);
Checkpoint load(const std::string& path);

}  // namespace spot
}  // namespace spotlight
