#include "convt/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "convt/error.hpp"

namespace convt {

double Image::mean() const {
  if (pixels.empty()) return 0.0;
  return std::accumulate(pixels.begin(), pixels.end(), 0.0) / static_cast<double>(pixels.size());
}

void clip_unit(Image& image) {
  for (double& v : image.pixels) v = std::clamp(v, 0.0, 1.0);
}

namespace {

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::vector<std::uint8_t> to_bytes(const Image& image) {
  std::vector<std::uint8_t> bytes(image.size());
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), quantize);
  return bytes;
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  Image out(png.height, png.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels[i] = buffer[i] / 255.0;
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_GRAY;
  const auto bytes = to_bytes(image);
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    while (in >> t) {
      if (t[0] != '#') return t;
      std::getline(in, t);
    }
    throw IoError("truncated PGM header in " + path.string());
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P2") throw IoError(path.string() + " is not a PGM file");
  std::size_t width = 0, height = 0, maxval = 0;
  try {
    width = std::stoul(token());
    height = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::logic_error&) {
    throw IoError("malformed PGM header in " + path.string());
  }
  if (width == 0 || height == 0 || maxval == 0 || maxval > 255) {
    throw IoError("unsupported PGM geometry or depth in " + path.string());
  }
  Image out(height, width);
  if (magic == "P5") {
    in.get();
    std::vector<char> raw(out.size());
    if (!in.read(raw.data(), static_cast<std::streamsize>(raw.size()))) throw IoError("truncated PGM " + path.string());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      out.pixels[i] = static_cast<unsigned char>(raw[i]) / static_cast<double>(maxval);
    }
  } else {
    for (double& v : out.pixels) {
      unsigned value = 0;
      if (!(in >> value)) throw IoError("truncated PGM " + path.string());
      v = value / static_cast<double>(maxval);
    }
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  const auto bytes = to_bytes(image);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

Image read_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm") return read_pgm(path);
  throw IoError("unsupported image format: " + path.string());
}

}  // namespace convt
