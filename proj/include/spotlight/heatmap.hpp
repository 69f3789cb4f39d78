#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spotlight/pathway.hpp"

namespace spotlight {

// Half-open cell ranges [row_begin, row_end) x [col_begin, col_end).
struct ZoomWindow {
  std::size_t row_begin = 0, row_end = 0;
  std::size_t col_begin = 0, col_end = 0;

  // "r0:r1,c0:c1"; throws UsageError on malformed text.
  static ZoomWindow parse(const std::string& text);
};

struct AttentionOverlay {
  std::vector<double> values;  // mask_h x mask_w, row-major
  std::size_t mask_h = 0;
  std::size_t mask_w = 0;
  // Image row the mask does not cover (the condition row), if any.
  std::optional<std::size_t> skipped_row;
};

struct RenderSpec {
  Grid image;
  std::optional<AttentionOverlay> mask;
  std::optional<ZoomWindow> zoom;
  std::size_t block = 2;  // pixels per cell side
  // Print code indices inside blocks when they fit.
  bool annotate = true;
};

struct Raster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;  // height x width x 3

  std::vector<std::uint8_t> to_ppm() const;
};

inline constexpr std::uint8_t kPaddingShade[3] = {28, 30, 48};

// One block x block square per cell. Event cells are gray, padding uses
// kPaddingShade, and the mask is blended in warm orange with alpha
// value / max. Throws DimensionError when the mask does not fit the image
// and ConfigError for a zero block or a zoom window outside the image.
Raster render_heatmap(const RenderSpec& spec);

void write_ppm(const std::string& path, const Raster& raster);

}  // namespace spotlight
