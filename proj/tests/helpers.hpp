#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "streetrisk/indicators.hpp"

namespace testing_util {

namespace fs = std::filesystem;

// Fresh scratch directory, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() / ("streetrisk_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

// Mask of one class with optional filled rectangles painted on top.
struct Painter {
  std::size_t w, h;
  std::vector<std::uint8_t> px;
  Painter(std::size_t width, std::size_t height, int fill) : w(width), h(height), px(width * height, static_cast<std::uint8_t>(fill)) {}
  Painter& rect(std::size_t x0, std::size_t y0, std::size_t rw, std::size_t rh, int cls) {
    for (std::size_t y = y0; y < y0 + rh; ++y)
      for (std::size_t x = x0; x < x0 + rw; ++x) px[y * w + x] = static_cast<std::uint8_t>(cls);
    return *this;
  }
  Painter& set(std::size_t x, std::size_t y, int cls) {
    px[y * w + x] = static_cast<std::uint8_t>(cls);
    return *this;
  }
  streetrisk::LabelMask mask(const streetrisk::CategorySchema& s = streetrisk::CategorySchema::street19()) const {
    return streetrisk::LabelMask(w, h, px, s);
  }
};

}  // namespace testing_util
