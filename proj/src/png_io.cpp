#include "metaseg/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace metaseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& what, const std::string& path) {
  throw FormatError(what + ": " + path);
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

// Decodes any 8-bit-convertible PNG into `channels` (1 = gray, 3 = RGB).
std::vector<uint8_t> read_png(const std::string& path, int channels, int& h, int& w) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) fail("cannot open PNG", path);

  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) fail("png_create_read_struct failed", path);
  r.info = png_create_info_struct(r.png);
  if (!r.info) fail("png_create_info_struct failed", path);
  if (setjmp(png_jmpbuf(r.png))) fail("corrupt PNG", path);

  png_init_io(r.png, f.get());
  png_read_info(r.png, r.info);

  w = static_cast<int>(png_get_image_width(r.png, r.info));
  h = static_cast<int>(png_get_image_height(r.png, r.info));
  const png_byte color = png_get_color_type(r.png, r.info);
  const png_byte depth = png_get_bit_depth(r.png, r.info);

  if (depth == 16) png_set_strip_16(r.png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  png_set_strip_alpha(r.png);
  if (channels == 3 && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA))
    png_set_gray_to_rgb(r.png);
  if (channels == 1 && (color & PNG_COLOR_MASK_COLOR))
    png_set_rgb_to_gray_fixed(r.png, 1, -1, -1);
  png_read_update_info(r.png, r.info);

  const size_t rowbytes = png_get_rowbytes(r.png, r.info);
  if (rowbytes != static_cast<size_t>(w) * channels) fail("unexpected PNG row size", path);

  std::vector<uint8_t> data(static_cast<size_t>(h) * rowbytes);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = data.data() + y * rowbytes;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return data;
}

void write_png(const std::string& path, const uint8_t* data, int h, int w, int channels) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) fail("cannot write PNG", path);

  PngWriter wr;
  wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!wr.png) fail("png_create_write_struct failed", path);
  wr.info = png_create_info_struct(wr.png);
  if (!wr.info) fail("png_create_info_struct failed", path);
  if (setjmp(png_jmpbuf(wr.png))) fail("PNG write error", path);

  png_init_io(wr.png, f.get());
  png_set_IHDR(wr.png, wr.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wr.png, wr.info);

  const size_t rowbytes = static_cast<size_t>(w) * channels;
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y)
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(data + y * rowbytes);
  png_write_image(wr.png, rows.data());
  png_write_end(wr.png, nullptr);
}

}  // namespace

Image read_png_rgb(const std::string& path) {
  Image img;
  img.rgb = read_png(path, 3, img.h, img.w);
  return img;
}

void write_png_rgb(const std::string& path, const Image& img) {
  write_png(path, img.rgb.data(), img.h, img.w, 3);
}

Mask read_png_gray(const std::string& path) {
  Mask m;
  m.v = read_png(path, 1, m.h, m.w);
  return m;
}

void write_png_gray(const std::string& path, const Mask& m) {
  write_png(path, m.v.data(), m.h, m.w, 1);
}

}  // namespace metaseg
