#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace isoray {

struct Image8 {
  std::size_t width = 0, height = 0, channels = 0;  // 1 or 3
  std::vector<std::uint8_t> data;                   // row-major, interleaved
};

void write_png(const std::string& path, const Image8& img);
Image8 read_png(const std::string& path);

// Depth map file: magic "IRDP", u32 version (1), u32 width, u32 height,
// then width*height float32 little-endian Euclidean ray distances, +inf
// for background pixels.
void write_depth(const std::string& path, std::size_t width, std::size_t height,
                 const std::vector<float>& depth);
std::vector<float> read_depth(const std::string& path, std::size_t& width,
                              std::size_t& height);

}  // namespace isoray
