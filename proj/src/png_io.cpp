#include "metdet/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>

namespace metdet::png {
namespace {

void write_simple(const std::filesystem::path& path, int width, int height, png_uint_32 format, const void* data) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot write " + path.string() + ": " + msg);
  }
}

template <typename Out>
Out read_simple(const std::filesystem::path& path, png_uint_32 format, int channels) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("cannot decode " + path.string() + ": " + msg);
  }
  image.format = format;
  Out out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.data.resize(std::size_t(image.width) * image.height * channels);
  if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("cannot decode " + path.string() + ": " + msg);
  }
  return out;
}

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

// Plain C frame: no objects with destructors live across setjmp.
bool write_packed_1bit(std::FILE* fp, png_uint_32 width, png_uint_32 height, png_bytep* rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width, height, 1, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace

void write_rgb8(const std::filesystem::path& path, const Rgb8Image& img) {
  write_simple(path, img.width, img.height, PNG_FORMAT_RGB, img.data.data());
}

Rgb8Image read_rgb8(const std::filesystem::path& path) { return read_simple<Rgb8Image>(path, PNG_FORMAT_RGB, 3); }

Gray8 read_gray8(const std::filesystem::path& path) { return read_simple<Gray8>(path, PNG_FORMAT_GRAY, 1); }

void write_gray8(const std::filesystem::path& path, const Gray8& img) {
  write_simple(path, img.width, img.height, PNG_FORMAT_GRAY, img.data.data());
}

std::pair<int, int> read_dimensions(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("cannot decode " + path.string() + ": " + msg);
  }
  std::pair<int, int> dims{int(image.width), int(image.height)};
  png_image_free(&image);
  return dims;
}

void write_bitmask(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& bits) {
  if (bits.size() != std::size_t(width) * height) throw ArgumentError("bitmask size mismatch");
  const std::size_t stride = (std::size_t(width) + 7) / 8;
  std::vector<std::uint8_t> packed(stride * height, 0);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) {
    std::uint8_t* row = packed.data() + stride * y;
    rows[y] = row;
    for (int x = 0; x < width; ++x)
      if (bits[std::size_t(y) * width + x]) row[x >> 3] |= std::uint8_t(0x80u >> (x & 7));
  }
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  if (!write_packed_1bit(fp.get(), png_uint_32(width), png_uint_32(height), rows.data()))
    throw IoError("cannot write " + path.string());
}

}  // namespace metdet::png
