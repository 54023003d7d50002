#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <png.h>

#include "streetrisk/indicators.hpp"

namespace streetrisk {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

struct Grey8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

// Reads an 8-bit single-channel PNG. Palette or 16-bit images are rejected
// because their sample values are not class ids.
inline Grey8 read_png_grey8(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) fail("cannot open '{}'", path.string());
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("libpng initialisation failed");
  }
  Grey8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("'{}': {}", path.string(), err);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("'{}': expected 8-bit single-channel PNG (color type {}, bit depth {})", path.string(), int(color), int(depth));
  }
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.pixels.resize(img.width * img.height);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png_grey8(const std::filesystem::path& path, std::size_t width, std::size_t height,
                            std::span<const std::uint8_t> pixels) {
  if (pixels.size() != width * height) fail("png write: pixel count mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    detail::FilePtr fp(std::fopen(tmp.string().c_str(), "wb"));
    if (!fp) fail("cannot write '{}'", tmp.string());
    std::string err;
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      fail("libpng initialisation failed");
    }
    std::vector<png_bytep> rows(height);
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      fail("'{}': {}", path.string(), err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(pixels.data() + y * width);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

// Raw grid text: first line "<width> <height>", then height lines of width
// whitespace-separated class ids.
inline Grey8 read_grid_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open '{}'", path.string());
  Grey8 img;
  long long w = 0, h = 0;
  if (!(in >> w >> h) || w < 1 || h < 1) fail("'{}': bad grid header", path.string());
  img.width = static_cast<std::size_t>(w);
  img.height = static_cast<std::size_t>(h);
  long long v = 0;
  while (in >> v) {
    if (v < 0 || v > 255) fail("'{}': unknown class {} at pixel index {}", path.string(), v, img.pixels.size());
    img.pixels.push_back(static_cast<std::uint8_t>(v));
  }
  if (img.pixels.size() != img.width * img.height)
    fail("'{}': dimension mismatch, header says {}x{} but {} values follow", path.string(), img.width, img.height,
         img.pixels.size());
  return img;
}

struct MaskName {
  std::string point_id;
  int heading = 0;
};

// `<point_id>_<heading>.png`; the point id may itself contain underscores.
inline std::optional<MaskName> parse_mask_name(const std::filesystem::path& path) {
  const auto stem = path.stem().string();
  const auto cut = stem.rfind('_');
  if (cut == std::string::npos || cut == 0 || cut + 1 == stem.size()) return std::nullopt;
  const auto tail = stem.substr(cut + 1);
  if (tail.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
  const int heading = std::stoi(tail);
  if (heading != 0 && heading != 90 && heading != 180 && heading != 270) return std::nullopt;
  return MaskName{stem.substr(0, cut), heading};
}

inline LabelMask load_mask(const std::filesystem::path& path, const CategorySchema& schema) {
  const auto ext = path.extension().string();
  Grey8 img = (ext == ".png" || ext == ".PNG") ? read_png_grey8(path) : read_grid_text(path);
  MaskName name = parse_mask_name(path).value_or(MaskName{path.stem().string(), 0});
  try {
    return LabelMask(img.width, img.height, std::move(img.pixels), schema, name.heading, name.point_id);
  } catch (const Error& e) {
    fail("'{}': {}", path.string(), e.what());
  }
}

inline void save_mask_png(const std::filesystem::path& path, const LabelMask& mask) {
  write_png_grey8(path, mask.width(), mask.height(), mask.data());
}

}  // namespace streetrisk
