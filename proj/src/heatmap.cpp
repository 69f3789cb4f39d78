#include "spotlight/heatmap.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>

#include "binary_io.hpp"
#include "spotlight/errors.hpp"
#include "spotlight/model.hpp"

namespace spotlight {

namespace {

// 3x5 digit glyphs, one row per 3-bit group, top to bottom.
constexpr std::array<std::array<std::uint8_t, 5>, 10> kDigits{{
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
}};

constexpr std::uint8_t kWarm[3] = {255, 96, 0};

std::size_t parse_index(const std::string& s, const std::string& text) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw UsageError("bad zoom window '" + text + "', expected r0:r1,c0:c1");
  return std::stoul(s);
}

std::array<std::uint8_t, 3> cell_color(std::uint32_t code) {
  if (code == 0) return {kPaddingShade[0], kPaddingShade[1], kPaddingShade[2]};
  const auto g = static_cast<std::uint8_t>(140 + (code * 53u) % 100u);
  return {g, g, g};
}

}  // namespace

ZoomWindow ZoomWindow::parse(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw UsageError("bad zoom window '" + text + "', expected r0:r1,c0:c1");
  auto range = [&](const std::string& part) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) throw UsageError("bad zoom window '" + text + "', expected r0:r1,c0:c1");
    return std::pair{parse_index(part.substr(0, colon), text), parse_index(part.substr(colon + 1), text)};
  };
  const auto [r0, r1] = range(text.substr(0, comma));
  const auto [c0, c1] = range(text.substr(comma + 1));
  return {r0, r1, c0, c1};
}

std::vector<std::uint8_t> Raster::to_ppm() const {
  const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), rgb.begin(), rgb.end());
  return out;
}

Raster render_heatmap(const RenderSpec& spec) {
  const Grid& img = spec.image;
  if (spec.block == 0) throw ConfigError("block size must be positive");
  if (img.height == 0 || img.width == 0 || img.cells.size() != img.height * img.width)
    throw DimensionError("image has no cells");

  ZoomWindow win{0, img.height, 0, img.width};
  if (spec.zoom) {
    win = *spec.zoom;
    if (win.row_begin >= win.row_end || win.col_begin >= win.col_end || win.row_end > img.height ||
        win.col_end > img.width)
      throw ConfigError("zoom window outside the " + std::to_string(img.height) + "x" +
                        std::to_string(img.width) + " image");
  }

  // Per-cell alpha over the full image, 0 where the mask does not reach.
  std::vector<double> alpha(img.cells.size(), 0.0);
  if (spec.mask) {
    const auto& m = *spec.mask;
    const std::size_t rows = img.height - (m.skipped_row ? 1 : 0);
    if (m.skipped_row && *m.skipped_row >= img.height)
      throw DimensionError("skipped row outside the image");
    if (m.mask_h == 0 || m.mask_w == 0 || m.values.size() != m.mask_h * m.mask_w)
      throw DimensionError("mask holds " + std::to_string(m.values.size()) + " values, shape " +
                           std::to_string(m.mask_h) + "x" + std::to_string(m.mask_w));
    if (m.mask_h > rows || m.mask_w > img.width)
      throw DimensionError("mask " + std::to_string(m.mask_h) + "x" + std::to_string(m.mask_w) +
                           " is larger than the " + std::to_string(rows) + "x" +
                           std::to_string(img.width) + " input");
    for (double v : m.values)
      if (!std::isfinite(v) || v < 0) throw DimensionError("mask values must be finite and non-negative");
    const auto up = upsample_mask(m.values, m.mask_h, m.mask_w, rows, img.width);
    const double peak = *std::max_element(up.begin(), up.end());
    if (peak > 0) {
      std::size_t src = 0;
      for (std::size_t r = 0; r < img.height; ++r) {
        if (m.skipped_row && r == *m.skipped_row) continue;
        for (std::size_t c = 0; c < img.width; ++c) alpha[r * img.width + c] = up[src * img.width + c] / peak;
        ++src;
      }
    }
  }

  const std::size_t b = spec.block;
  Raster out;
  out.height = (win.row_end - win.row_begin) * b;
  out.width = (win.col_end - win.col_begin) * b;
  out.rgb.assign(out.height * out.width * 3, 0);

  auto put = [&](std::size_t y, std::size_t x, const std::array<std::uint8_t, 3>& c) {
    std::uint8_t* p = &out.rgb[(y * out.width + x) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  };

  for (std::size_t r = win.row_begin; r < win.row_end; ++r) {
    for (std::size_t c = win.col_begin; c < win.col_end; ++c) {
      const std::uint32_t code = img.at(r, c);
      auto color = cell_color(code);
      const double a = alpha[r * img.width + c];
      for (int k = 0; k < 3; ++k)
        color[k] = static_cast<std::uint8_t>(std::lround((1 - a) * color[k] + a * kWarm[k]));
      const std::size_t y0 = (r - win.row_begin) * b, x0 = (c - win.col_begin) * b;
      for (std::size_t y = 0; y < b; ++y)
        for (std::size_t x = 0; x < b; ++x) put(y0 + y, x0 + x, color);

      if (!spec.annotate || code == 0) continue;
      const std::string digits = std::to_string(code);
      const std::size_t text_w = digits.size() * 4 - 1;
      if (b < text_w + 2 || b < 7) continue;
      const std::size_t tx = x0 + (b - text_w) / 2, ty = y0 + (b - 5) / 2;
      const int lum = (color[0] * 3 + color[1] * 6 + color[2]) / 10;
      const std::array<std::uint8_t, 3> ink = lum > 110 ? std::array<std::uint8_t, 3>{0, 0, 0}
                                                        : std::array<std::uint8_t, 3>{255, 255, 255};
      for (std::size_t d = 0; d < digits.size(); ++d) {
        const auto& glyph = kDigits[static_cast<std::size_t>(digits[d] - '0')];
        for (std::size_t gy = 0; gy < 5; ++gy)
          for (std::size_t gx = 0; gx < 3; ++gx)
            if (glyph[gy] & (4u >> gx)) put(ty + gy, tx + d * 4 + gx, ink);
      }
    }
  }
  return out;
}

void write_ppm(const std::string& path, const Raster& raster) { detail::write_file_bytes(path, raster.to_ppm()); }

}  // namespace spotlight
