#include "isoray/image.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace isoray {

namespace {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace

void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (img.data.size() != img.width * img.height * img.channels)
    throw std::invalid_argument("write_png: data size mismatch");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            nullptr, nullptr);
  if (!png) throw std::runtime_error("write_png: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("write_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: encode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = img.width * img.channels;
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.data.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw std::runtime_error("read_png: " + path + " is not a png file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           nullptr, nullptr);
  if (!png) throw std::runtime_error("read_png: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("read_png: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: decode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // normalize to 8-bit gray or rgb
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image8 img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  const png_byte color = png_get_color_type(png, info);
  img.channels = color == PNG_COLOR_TYPE_GRAY ? 1 : 3;
  if (png_get_rowbytes(png, info) != img.width * img.channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: unsupported layout in " + path);
  }
  img.data.resize(img.width * img.height * img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    png_read_row(png, img.data.data() + y * img.width * img.channels, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace {
constexpr char kDepthMagic[4] = {'I', 'R', 'D', 'P'};
}

void write_depth(const std::string& path, std::size_t width, std::size_t height,
                 const std::vector<float>& depth) {
  if (depth.size() != width * height)
    throw std::invalid_argument("write_depth: size mismatch");
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_depth: cannot open " + path);
  FilePtr fp(f);
  const std::uint32_t header[3] = {1u, static_cast<std::uint32_t>(width),
                                   static_cast<std::uint32_t>(height)};
  bool ok = std::fwrite(kDepthMagic, 1, 4, f) == 4 &&
            std::fwrite(header, 4, 3, f) == 3 &&
            std::fwrite(depth.data(), sizeof(float), depth.size(), f) ==
                depth.size();
  if (!ok) throw std::runtime_error("write_depth: write failed for " + path);
}

std::vector<float> read_depth(const std::string& path, std::size_t& width,
                              std::size_t& height) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("read_depth: cannot open " + path);
  FilePtr fp(f);
  char magic[4];
  std::uint32_t header[3];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kDepthMagic, 4) != 0)
    throw std::runtime_error(path + ": bad magic, not a depth file");
  if (std::fread(header, 4, 3, f) != 3)
    throw std::runtime_error(path + ": truncated depth header");
  if (header[0] != 1)
    throw std::runtime_error(path + ": unsupported depth file version");
  width = header[1];
  height = header[2];
  std::vector<float> depth(width * height);
  if (std::fread(depth.data(), sizeof(float), depth.size(), f) != depth.size())
    throw std::runtime_error(path + ": truncated depth data");
  return depth;
}

}  // namespace isoray
