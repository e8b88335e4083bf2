#include "png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

#include "maskdiff/error.hpp"

namespace maskdiff::detail {
namespace {

void write_callback(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

void flush_callback(png_structp) {}

struct ReadCursor {
  const std::string* bytes;
  std::size_t offset;
};

void read_callback(png_structp png, png_bytep data, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->bytes->size()) {
    png_error(png, "truncated PNG stream");
  }
  std::memcpy(data, cursor->bytes->data() + cursor->offset, length);
  cursor->offset += length;
}

void warning_callback(png_structp, png_const_charp) {}

[[noreturn]] void error_callback(png_structp png, png_const_charp) {
  png_longjmp(png, 1);
}

// libpng reports errors by longjmp; these helpers keep every object with a
// destructor outside the setjmp frame.
bool write_rows(png_structp png, png_infop info, const GrayPng& image) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t r = 0; r < image.height; ++r) {
    png_write_row(png, image.pixels.data() + r * image.width);
  }
  png_write_end(png, nullptr);
  return true;
}

bool read_header(png_structp png, png_infop info, int64_t* height,
                 int64_t* width, bool* gray8) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_read_info(png, info);
  *gray8 = png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY &&
           png_get_bit_depth(png, info) == 8;
  *width = png_get_image_width(png, info);
  *height = png_get_image_height(png, info);
  return true;
}

bool read_rows(png_structp png, std::uint8_t* pixels, int64_t height,
               int64_t width) {
  if (setjmp(png_jmpbuf(png))) return false;
  for (int64_t r = 0; r < height; ++r) {
    png_read_row(png, pixels + r * width, nullptr);
  }
  png_read_end(png, nullptr);
  return true;
}

}  // namespace

std::string encode_png(const GrayPng& image) {
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            error_callback, warning_callback);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  png_set_write_fn(png, &out, write_callback, flush_callback);
  const bool ok = info != nullptr && write_rows(png, info, image);
  png_destroy_write_struct(&png, &info);
  if (!ok) throw IoError("PNG encoding failed");
  return out;
}

GrayPng decode_png(const std::string& bytes, const std::string& context) {
  if (bytes.size() < 8 ||
      png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw IoError(context + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           error_callback, warning_callback);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{&bytes, 0};
  png_set_read_fn(png, &cursor, read_callback);
  GrayPng out;
  bool gray8 = false;
  bool ok = info != nullptr && read_header(png, info, &out.height, &out.width, &gray8);
  if (ok && gray8) {
    out.pixels.resize(static_cast<std::size_t>(out.width * out.height));
    ok = read_rows(png, out.pixels.data(), out.height, out.width);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw IoError(context + ": corrupted PNG data");
  if (!gray8) throw IoError(context + ": expected 8-bit grayscale PNG");
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace maskdiff::detail
