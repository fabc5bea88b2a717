#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dreg/tensor.hpp"

namespace dreg {

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
  std::ostringstream oss;
  oss << is.rdbuf();
  return oss.str();
}

/// Shortest round-trip decimal form of a double.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// 8-bit binary PGM (P5) of one [H,W] plane, values mapped linearly from
/// [lo, hi] to [0, 255] and clipped.
inline void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
                      const std::vector<double>& values, double lo, double hi) {
  if (values.size() != height * width) throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  const double span = hi > lo ? hi - lo : 1.0;
  for (double v : values) {
    const double t = std::clamp((v - lo) / span, 0.0, 1.0);
    const auto byte = static_cast<unsigned char>(std::lround(t * 255.0));
    os.put(static_cast<char>(byte));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

template <typename Real>
void write_pgm(const std::filesystem::path& path, const Tensor<Real>& plane, double lo, double hi) {
  if (plane.rank() != 3 || plane.dim(0) != 1) throw std::invalid_argument("write_pgm: expected [1,H,W]");
  write_pgm(path, plane.dim(1), plane.dim(2), std::vector<double>(plane.data.begin(), plane.data.end()), lo, hi);
}

/// Tiles equally sized [1,h,w] images row-major into one PGM.
template <typename Real>
void write_pgm_grid(const std::filesystem::path& path, const std::vector<Tensor<Real>>& tiles, std::size_t cols,
                    double lo, double hi, std::size_t gap = 1) {
  if (tiles.empty() || cols == 0) throw std::invalid_argument("write_pgm_grid: no tiles");
  const std::size_t h = tiles[0].dim(1), w = tiles[0].dim(2);
  const std::size_t rows = (tiles.size() + cols - 1) / cols;
  const std::size_t H = rows * h + (rows - 1) * gap, W = cols * w + (cols - 1) * gap;
  std::vector<double> canvas(H * W, lo);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const std::size_t oy = (i / cols) * (h + gap), ox = (i % cols) * (w + gap);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) canvas[(oy + y) * W + ox + x] = double(tiles[i].at(0, y, x));
  }
  write_pgm(path, H, W, canvas, lo, hi);
}

/// Threads allowed for case-parallel work, from DREG_THREADS (default 1).
inline unsigned worker_count() {
  if (const char* env = std::getenv("DREG_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return unsigned(v);
    } catch (...) {
    }
  }
  return 1;
}

}  // namespace dreg
