#include "convt/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "convt/error.hpp"
#include "convt/rng.hpp"

namespace convt {

namespace {

constexpr std::uint64_t kPolicyTag = 0x706f6c6963790001ULL;
constexpr std::uint64_t kNoiseTag = 0x6e6f697365000002ULL;
constexpr std::uint64_t kDirectionTag = 0x7369676e00000003ULL;

constexpr std::array<std::string_view, 12> kNames{"hflip",   "vflip",   "rotate", "translate_x",
                                                  "translate_y", "shear_x", "shear_y", "zoom",
                                                  "brightness",  "contrast", "blur",   "speckle"};

// Inverse-mapped geometric warp: out(y, x) = in(src(y, x)).
template <class F>
Image warp(const Image& in, F src) {
  Image out(in.height, in.width);
  for (std::size_t y = 0; y < in.height; ++y) {
    for (std::size_t x = 0; x < in.width; ++x) {
      const auto [sy, sx] = src(static_cast<double>(y), static_cast<double>(x));
      out.at(y, x) = sample_bilinear(in, sy, sx);
    }
  }
  return out;
}

Image shift(const Image& in, long dy, long dx) {
  Image out(in.height, in.width);
  const auto h = static_cast<long>(in.height), w = static_cast<long>(in.width);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      const long sy = y - dy, sx = x - dx;
      if (sy >= 0 && sy < h && sx >= 0 && sx < w) out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

Image gaussian_blur(const Image& in, double sigma) {
  if (sigma <= 0.0) return in;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) taps[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  // Taps falling outside the chip are dropped and the rest renormalized.
  auto pass = [&](const Image& src, bool horizontal) {
    Image dst(src.height, src.width);
    const auto h = static_cast<int>(src.height), w = static_cast<int>(src.width);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0, norm = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = horizontal ? y : y + i, xx = horizontal ? x + i : x;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += taps[i + radius] * src.at(yy, xx);
          norm += taps[i + radius];
        }
        dst.at(y, x) = acc / norm;
      }
    }
    return dst;
  };
  return pass(pass(in, true), false);
}

}  // namespace

void validate(const AutoAugConfig& c) {
  if (c.n < 1 || c.n > static_cast<int>(kNames.size())) {
    throw ConfigError("augmentation N must be in [1, " + std::to_string(kNames.size()) + "], got " +
                      std::to_string(c.n));
  }
  if (c.k < 0 || c.k > c.n) {
    throw ConfigError("augmentation K must be in [0, N=" + std::to_string(c.n) + "], got " + std::to_string(c.k));
  }
  if (!(c.d >= 0.0 && c.d <= 10.0)) throw ConfigError("augmentation D must lie in [0, 10]");
  if (std::isnan(c.m_a) || std::isnan(c.m_each)) throw ConfigError("augmentation thresholds must not be NaN");
}

int default_aug_k(int k_shot) { return k_shot <= 2 ? 5 : 3; }

const std::array<std::string_view, 12>& transform_names() { return kNames; }

EpochPolicy sample_epoch_policy(const AutoAugConfig& config, std::uint64_t epoch) {
  validate(config);
  Rng rng(derive_seed({config.seed, epoch, kPolicyTag}));
  EpochPolicy p;
  p.epoch = epoch;
  p.m = rng.normal();
  p.epoch_gate = config.enabled && p.m >= config.m_a;

  std::vector<int> pool(static_cast<std::size_t>(config.n));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < config.k; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    p.chosen.emplace_back(kNames[static_cast<std::size_t>(pool[static_cast<std::size_t>(i)])]);
  }
  for (int i = 0; i < config.k; ++i) {
    const double draw = rng.normal();
    p.gate_draws.push_back(draw);
    p.per_transform_gate.push_back(draw >= config.m_each);
    p.magnitudes.push_back(config.d);
  }
  p.noise_seed = rng.next_u64();
  return p;
}

Image apply_policy(const EpochPolicy& policy, const Image& image, std::uint64_t salt) {
  for (double v : image.pixels) {
    if (!std::isfinite(v)) throw ContractError("apply_policy: image contains non-finite pixels");
  }
  if (!policy.epoch_gate) return image;
  Image out = image;
  for (std::size_t i = 0; i < policy.chosen.size(); ++i) {
    if (!policy.per_transform_gate[i]) continue;
    out = transform(policy.chosen[i], policy.magnitudes[i], out, policy_direction(policy, salt, i),
                    derive_seed({policy.noise_seed, salt, i, kNoiseTag}));
  }
  clip_unit(out);
  return out;
}

int policy_direction(const EpochPolicy& policy, std::uint64_t salt, std::size_t i) {
  return (derive_seed({policy.noise_seed, salt, i, kDirectionTag}) & 1u) == 0 ? 1 : -1;
}

boost::multiprecision::cpp_int policy_space_size(const AutoAugConfig& config) {
  validate(config);
  return boost::multiprecision::pow(boost::multiprecision::cpp_int(config.n), static_cast<unsigned>(config.k));
}

double sample_bilinear(const Image& image, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const auto y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double ty = y - fy, tx = x - fx;
  auto px = [&](long yy, long xx) {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(image.height) || xx >= static_cast<long>(image.width)) return 0.0;
    return image.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
  };
  return (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x0 + 1)) +
         ty * ((1 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1));
}

Image transform(std::string_view name, double magnitude, const Image& image, int direction,
                std::uint64_t noise_seed) {
  if (!(magnitude >= 0.0 && magnitude <= 10.0)) throw ConfigError("transform magnitude must lie in [0, 10]");
  const double level = magnitude / 10.0;
  const double sign = direction < 0 ? -1.0 : 1.0;
  const double cy = (static_cast<double>(image.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(image.width) - 1.0) / 2.0;
  Image out;

  if (name == "hflip") {
    out = image;
    for (std::size_t y = 0; y < image.height; ++y) {
      std::reverse(out.pixels.begin() + static_cast<long>(y * image.width),
                   out.pixels.begin() + static_cast<long>((y + 1) * image.width));
    }
  } else if (name == "vflip") {
    out = Image(image.height, image.width);
    for (std::size_t y = 0; y < image.height; ++y) {
      std::copy_n(image.pixels.begin() + static_cast<long>((image.height - 1 - y) * image.width), image.width,
                  out.pixels.begin() + static_cast<long>(y * image.width));
    }
  } else if (name == "rotate") {
    const double angle = sign * level * 30.0 * std::numbers::pi / 180.0;
    const double c = std::cos(angle), s = std::sin(angle);
    out = warp(image, [&](double y, double x) {
      const double dy = y - cy, dx = x - cx;
      return std::pair{cy - s * dx + c * dy, cx + c * dx + s * dy};
    });
  } else if (name == "translate_x") {
    out = shift(image, 0, static_cast<long>(sign * std::round(level * 0.3 * static_cast<double>(image.width))));
  } else if (name == "translate_y") {
    out = shift(image, static_cast<long>(sign * std::round(level * 0.3 * static_cast<double>(image.height))), 0);
  } else if (name == "shear_x") {
    const double k = sign * level * 0.3;
    out = warp(image, [&](double y, double x) { return std::pair{y, x - k * (y - cy)}; });
  } else if (name == "shear_y") {
    const double k = sign * level * 0.3;
    out = warp(image, [&](double y, double x) { return std::pair{y - k * (x - cx), x}; });
  } else if (name == "zoom") {
    const double z = 1.0 + sign * level * 0.3;
    out = warp(image, [&](double y, double x) { return std::pair{cy + (y - cy) / z, cx + (x - cx) / z}; });
  } else if (name == "brightness") {
    out = image;
    for (double& v : out.pixels) v *= 1.0 + sign * level * 0.3;
  } else if (name == "contrast") {
    out = image;
    const double mu = image.mean(), f = 1.0 + sign * level * 0.3;
    for (double& v : out.pixels) v = mu + (v - mu) * f;
  } else if (name == "blur") {
    out = gaussian_blur(image, 1.5 * level);
  } else if (name == "speckle") {
    out = image;
    if (level > 0.0) {
      const double looks = 8.0 / level;
      Rng rng(noise_seed);
      for (double& v : out.pixels) v *= rng.gamma(looks) / looks;
    }
  } else {
    throw ConfigError("unknown transform: " + std::string(name));
  }
  clip_unit(out);
  return out;
}

}  // namespace convt
