#include "spotlight/pwim.hpp"

#include <fstream>
#include <iterator>
#include <limits>

#include "binary_io.hpp"
#include "spotlight/errors.hpp"

namespace spotlight {
namespace detail {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace detail

namespace pwim {

std::size_t file_size(std::size_t height, std::size_t width) {
  return kHeaderBytes + height * width * 4;
}

std::vector<std::uint8_t> serialize(const Grid& grid) {
  if (grid.height > std::numeric_limits<std::uint16_t>::max() ||
      grid.width > std::numeric_limits<std::uint32_t>::max()) {
    throw DimensionError("grid too large for PWIM");
  }
  detail::ByteWriter w;
  w.raw("PWIM", 4);
  w.u8(kVersion);
  w.u16(static_cast<std::uint16_t>(grid.height));
  w.u32(static_cast<std::uint32_t>(grid.width));
  w.u32(0);
  for (std::uint32_t cell : grid.cells) w.u32(cell);
  return std::move(w.bytes());
}

Grid deserialize(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes.data(), bytes.size(), "PWIM");
  char magic[4];
  r.raw(magic, 4);
  if (std::string(magic, 4) != "PWIM") throw FormatError("PWIM: bad magic");
  const std::uint8_t version = r.u8();
  if (version != kVersion) {
    throw FormatError("PWIM: unsupported version " + std::to_string(version));
  }
  const std::size_t height = r.u16();
  const std::size_t width = r.u32();
  if (r.u32() != 0) throw FormatError("PWIM: reserved bytes must be zero");
  r.need(height * width * 4);
  Grid grid(height, width);
  for (auto& cell : grid.cells) cell = r.u32();
  if (r.remaining() != 0) throw FormatError("PWIM: trailing bytes after payload");
  return grid;
}

void write_file(const std::string& path, const Grid& grid) {
  detail::write_file_bytes(path, serialize(grid));
}

Grid read_file(const std::string& path) { return deserialize(detail::read_file_bytes(path)); }

}  // namespace pwim
}  // namespace spotlight
