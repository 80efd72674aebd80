#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace convt {

/// Single-channel chip, row-major, nominal range [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  std::size_t size() const noexcept { return pixels.size(); }
  double mean() const;

  friend bool operator==(const Image&, const Image&) = default;
};

void clip_unit(Image& image);

/// 8-bit grayscale I/O. Values are scaled by 1/255 on read and rounded on write.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
/// Binary (P5) or ASCII (P2) portable graymap.
Image read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image& image);
/// Dispatches on the extension (.png, .pgm).
Image read_image(const std::filesystem::path& path);

}  // namespace convt
