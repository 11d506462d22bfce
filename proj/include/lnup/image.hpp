#pragma once

// 8-bit grayscale images and binary PGM (P5) I/O.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "lnup/core.hpp"

namespace lnup {

class ImageGray {
 public:
  ImageGray() = default;

  ImageGray(int width, int height, std::vector<std::uint8_t> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width_ < 3 || height_ < 3)
      throw data_error("image must be at least 3x3, got " + std::to_string(width_) + "x" +
                       std::to_string(height_));
    if (pixels_.size() != static_cast<std::size_t>(width_) * height_)
      throw data_error("pixel buffer size does not match image dimensions");
  }

  static ImageGray filled(int width, int height, std::uint8_t value) {
    return ImageGray(width, height,
                     std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, value));
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return pixels_.size(); }

  std::uint8_t at(int row, int col) const noexcept {
    return pixels_[static_cast<std::size_t>(row) * width_ + col];
  }
  // Edge-replicated access: out-of-range coordinates clamp to the border.
  std::uint8_t clamped(int row, int col) const noexcept {
    row = row < 0 ? 0 : (row >= height_ ? height_ - 1 : row);
    col = col < 0 ? 0 : (col >= width_ ? width_ - 1 : col);
    return at(row, col);
  }

  std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }

  friend bool operator==(const ImageGray&, const ImageGray&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

namespace detail {

// Skips whitespace and '#' comments in a PNM header.
inline void skip_pnm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream& in, const std::string& path, const char* field) {
  skip_pnm_space(in);
  long value = 0;
  int digits = 0;
  while (in.peek() >= '0' && in.peek() <= '9') {
    value = value * 10 + (in.get() - '0');
    if (value > 1'000'000) throw data_error(path + ": PGM " + field + " too large");
    ++digits;
  }
  if (digits == 0) throw data_error(path + ": malformed PGM header (" + field + ")");
  return static_cast<int>(value);
}

}  // namespace detail

inline ImageGray load_grayscale_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open image " + path.string());
  const std::string name = path.string();

  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (in.gcount() != 2 || magic[0] != 'P')
    throw data_error(name + ": not a PGM file");
  if (magic[1] != '5')
    throw data_error(name + ": unsupported PGM format P" + std::string(1, magic[1]) +
                     " (only binary P5 is accepted)");

  const int width = detail::read_pnm_int(in, name, "width");
  const int height = detail::read_pnm_int(in, name, "height");
  const int maxval = detail::read_pnm_int(in, name, "maxval");
  if (maxval != 255) throw data_error(name + ": PGM maxval must be 255, got " + std::to_string(maxval));
  // Exactly one whitespace byte separates the header from the payload.
  const int sep = in.get();
  if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n')
    throw data_error(name + ": malformed PGM header");

  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height);
  in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != pixels.size())
    throw data_error(name + ": truncated PGM payload");
  return ImageGray(width, height, std::move(pixels));
}

inline void write_pgm(const std::filesystem::path& path, const ImageGray& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write image " + path.string());
  out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels().data()),
            static_cast<std::streamsize>(img.size()));
  if (!out) throw data_error("failed writing image " + path.string());
}

}  // namespace lnup
