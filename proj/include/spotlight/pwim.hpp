#pragma once

// PWIM v1 pathway-image files:
//
//   offset 0   "PWIM"
//   offset 4   version (u8) = 1
//   offset 5   height (u16 LE)
//   offset 7   width  (u32 LE)
//   offset 11  reserved, 4 zero bytes
//   offset 15  height*width cells, u32 LE, row-major

#include <cstdint>
#include <string>
#include <vector>

#include "spotlight/pathway.hpp"

namespace spotlight::pwim {

inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 15;

std::size_t file_size(std::size_t height, std::size_t width);

std::vector<std::uint8_t> serialize(const Grid& grid);
// Throws FormatError on bad magic, unsupported version, non-zero reserved
// bytes, truncated payload or trailing bytes.
Grid deserialize(const std::vector<std::uint8_t>& bytes);

void write_file(const std::string& path, const Grid& grid);
Grid read_file(const std::string& path);

}  // namespace spotlight::pwim
