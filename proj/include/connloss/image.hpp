#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "connloss/binio.hpp"
#include "connloss/error.hpp"
#include "connloss/matrix.hpp"

namespace connloss {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<Rgb> pixels;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, Rgb fill = {}) : width(w), height(h), pixels(w * h, fill) {}
  Rgb& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  Rgb at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::uint16_t maxval = 255;
  std::vector<std::uint16_t> pixels;

  std::uint16_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

namespace detail {

// Reads the whitespace/comment separated header fields of a binary PNM file.
inline std::vector<std::size_t> pnm_header(std::span<const std::uint8_t> bytes, std::string_view magic,
                                           std::size_t& pos) {
  if (bytes.size() < 2 || std::string_view(reinterpret_cast<const char*>(bytes.data()), 2) != magic)
    throw Error(ErrorKind::bad_magic, "expected a " + std::string(magic) + " image", 0);
  pos = 2;
  std::vector<std::size_t> fields;
  while (fields.size() < 3) {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    std::size_t value = 0;
    const auto* begin = reinterpret_cast<const char*>(bytes.data() + pos);
    const auto* end = reinterpret_cast<const char*>(bytes.data() + bytes.size());
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr == begin) throw Error(ErrorKind::invalid_argument, "malformed image header", pos);
    pos += static_cast<std::size_t>(ptr - begin);
    fields.push_back(value);
  }
  ++pos;  // single whitespace byte before the raster
  if (fields[2] == 0 || fields[2] > 65535) throw Error(ErrorKind::invalid_argument, "unsupported maxval");
  return fields;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + image.pixels.size() * 3);
  for (const auto& p : image.pixels) bytes.insert(bytes.end(), {p.r, p.g, p.b});
  write_file_bytes(path, bytes);
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  const auto f = detail::pnm_header(bytes, "P6", pos);
  if (f[2] > 255) throw Error(ErrorKind::invalid_argument, "16-bit PPM is not supported");
  RgbImage img(f[0], f[1]);
  if (bytes.size() - pos < img.pixels.size() * 3)
    throw Error(ErrorKind::truncated, "truncated payload in " + path.string(), bytes.size());
  for (auto& p : img.pixels) {
    p = {bytes[pos], bytes[pos + 1], bytes[pos + 2]};
    pos += 3;
  }
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  const std::string header = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n" +
                             std::to_string(image.maxval) + "\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (auto v : image.pixels) {
    if (image.maxval > 255) bytes.push_back(static_cast<std::uint8_t>(v >> 8));
    bytes.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  write_file_bytes(path, bytes);
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  const auto f = detail::pnm_header(bytes, "P5", pos);
  GrayImage img{f[0], f[1], static_cast<std::uint16_t>(f[2]), {}};
  const std::size_t bpp = img.maxval > 255 ? 2 : 1;
  if (bytes.size() - pos < img.width * img.height * bpp)
    throw Error(ErrorKind::truncated, "truncated payload in " + path.string(), bytes.size());
  img.pixels.resize(img.width * img.height);
  for (auto& v : img.pixels) {
    v = bpp == 2 ? static_cast<std::uint16_t>((bytes[pos] << 8) | bytes[pos + 1]) : bytes[pos];
    pos += bpp;
  }
  return img;
}

/// Blue for negative, red for positive, white at zero. |t| maps to the same
/// intensity for either sign; t is clipped to [-1, 1].
inline Rgb diverging_color(double value, double scale) {
  const double t = scale > 0 ? std::clamp(value / scale, -1.0, 1.0) : 0.0;
  const auto fade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::abs(t))));
  if (t < 0) return {fade, fade, 255};
  if (t > 0) return {255, fade, fade};
  return {255, 255, 255};
}

/// Nearest-rank 99th percentile of |values|; 1 when every value is zero.
inline double clip_scale(std::span<const double> values, double percentile = 0.99) {
  std::vector<double> mags;
  mags.reserve(values.size());
  for (double v : values) mags.push_back(std::abs(v));
  if (mags.empty()) return 1.0;
  std::ranges::sort(mags);
  const auto rank = static_cast<std::size_t>(std::ceil(percentile * static_cast<double>(mags.size())));
  const double s = mags[std::clamp<std::size_t>(rank, 1, mags.size()) - 1];
  return s > 0 ? s : 1.0;
}

struct Heatmap {
  Matrix<double> grid;
  double scale = 1.0;
  std::vector<std::pair<std::size_t, std::size_t>> marked;  // (row, col)
};

inline constexpr Rgb kMarkColor{255, 220, 0};

namespace detail {

inline void outline(RgbImage& img, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1,
                    std::size_t thickness, Rgb color) {
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) {
      const bool edge = x < x0 + thickness || x + thickness >= x1 || y < y0 + thickness || y + thickness >= y1;
      if (edge) img.at(x, y) = color;
    }
}

}  // namespace detail

/// Standalone heatmap, one `cell_px` square per grid cell; marked cells are
/// outlined rather than filled.
inline RgbImage render_heatmap(const Heatmap& map, std::size_t cell_px = 16) {
  const std::size_t rows = map.grid.rows(), cols = map.grid.cols();
  RgbImage img(cols * cell_px, rows * cell_px);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const Rgb color = diverging_color(map.grid(r, c), map.scale);
      for (std::size_t y = r * cell_px; y < (r + 1) * cell_px; ++y)
        for (std::size_t x = c * cell_px; x < (c + 1) * cell_px; ++x) img.at(x, y) = color;
    }
  const std::size_t thick = std::max<std::size_t>(1, cell_px / 8);
  for (auto [r, c] : map.marked)
    detail::outline(img, c * cell_px, r * cell_px, (c + 1) * cell_px, (r + 1) * cell_px, thick, kMarkColor);
  return img;
}

/// Heatmap upscaled nearest-neighbor onto `background` and alpha-blended.
/// The background must have the grid's aspect ratio.
inline RgbImage render_overlay(const Heatmap& map, const RgbImage& background, double alpha = 0.5) {
  const std::size_t rows = map.grid.rows(), cols = map.grid.cols();
  const std::size_t w = background.width, h = background.height;
  if (w * rows != h * cols || w < cols || h < rows)
    throw Error(ErrorKind::dim_mismatch, "image " + std::to_string(w) + "x" + std::to_string(h) +
                                             " does not match grid aspect " + std::to_string(cols) + "x" +
                                             std::to_string(rows));
  RgbImage img(w, h);
  auto blend = [alpha](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround((1 - alpha) * a + alpha * b));
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Rgb heat = diverging_color(map.grid(y * rows / h, x * cols / w), map.scale);
      const Rgb bg = background.at(x, y);
      img.at(x, y) = {blend(bg.r, heat.r), blend(bg.g, heat.g), blend(bg.b, heat.b)};
    }
  // Cell bounds are the inverse of the nearest-neighbor pixel mapping above.
  auto bound = [](std::size_t i, std::size_t cells, std::size_t pixels) { return (i * pixels + cells - 1) / cells; };
  const std::size_t thick = std::max<std::size_t>(1, w / cols / 8);
  for (auto [r, c] : map.marked)
    detail::outline(img, bound(c, cols, w), bound(r, rows, h), bound(c + 1, cols, w), bound(r + 1, rows, h), thick,
                    kMarkColor);
  return img;
}

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// One grid row per line, comma-separated, exact round-trip formatting.
inline void write_grid_csv(const std::filesystem::path& path, const Matrix<double>& grid) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  for (std::size_t r = 0; r < grid.rows(); ++r) {
    for (std::size_t c = 0; c < grid.cols(); ++c) out << (c ? "," : "") << format_double(grid(r, c));
    out << '\n';
  }
}

}  // namespace connloss
