#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "convt/augment.hpp"
#include "convt/error.hpp"
#include "convt/image.hpp"
#include "convt/rng.hpp"

using namespace convt;

namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

// Centered Gaussian blob, effectively zero at the border.
Image smooth_image(std::size_t n) {
  Image img(n, n);
  const double c = (static_cast<double>(n) - 1) / 2, s = static_cast<double>(n) / 8;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c - 3;
      img.at(y, x) = 0.8 * std::exp(-(dy * dy + 0.5 * dx * dx) / (2 * s * s));
    }
  return img;
}

EpochPolicy forced(std::vector<std::string> chosen, double magnitude) {
  EpochPolicy p;
  p.epoch_gate = true;
  p.chosen = std::move(chosen);
  p.gate_draws.assign(p.chosen.size(), 1.0);
  p.per_transform_gate.assign(p.chosen.size(), true);
  p.magnitudes.assign(p.chosen.size(), magnitude);
  return p;
}

}  // namespace

TEST(AutoAugConfig, Validation) {
  EXPECT_NO_THROW(validate(AutoAugConfig{}));
  AutoAugConfig c;
  c.n = 13;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.k = 13;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.d = 11;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.m_each = std::nan("");
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.m_a = std::numeric_limits<double>::infinity();
  EXPECT_NO_THROW(validate(c));
}

TEST(AutoAugConfig, DefaultKFollowsShots) {
  EXPECT_EQ(default_aug_k(1), 5);
  EXPECT_EQ(default_aug_k(2), 5);
  EXPECT_EQ(default_aug_k(5), 3);
  EXPECT_EQ(default_aug_k(25), 3);
}

TEST(Policy, InfiniteThresholdNeverGates) {
  AutoAugConfig c;
  c.m_a = std::numeric_limits<double>::infinity();
  const Image img = random_image(8, 8, 1);
  for (std::uint64_t e = 0; e < 1000; ++e) {
    const EpochPolicy p = sample_epoch_policy(c, e);
    ASSERT_FALSE(p.epoch_gate);
    ASSERT_EQ(apply_policy(p, img, e), img);
  }
}

TEST(Policy, GateFrequenciesAtZeroThresholds) {
  AutoAugConfig c;
  c.seed = 17;
  const int epochs = 10000;
  int gates = 0;
  std::vector<int> each(static_cast<std::size_t>(c.k), 0);
  for (int e = 0; e < epochs; ++e) {
    const EpochPolicy p = sample_epoch_policy(c, static_cast<std::uint64_t>(e));
    gates += p.epoch_gate;
    for (std::size_t i = 0; i < each.size(); ++i) each[i] += p.per_transform_gate[i];
  }
  EXPECT_GE(gates, 4800);
  EXPECT_LE(gates, 5200);
  for (int n : each) {
    EXPECT_GE(n, 4800);
    EXPECT_LE(n, 5200);
  }
}

TEST(Policy, DeterministicPerSeedAndEpoch) {
  AutoAugConfig c;
  c.seed = 5;
  EXPECT_EQ(sample_epoch_policy(c, 12), sample_epoch_policy(c, 12));
  EXPECT_NE(sample_epoch_policy(c, 12), sample_epoch_policy(c, 13));
  AutoAugConfig other = c;
  other.seed = 6;
  EXPECT_NE(sample_epoch_policy(c, 12), sample_epoch_policy(other, 12));
}

TEST(Policy, ChosenTransformsAreDistinctNames) {
  const auto& names = transform_names();
  for (int k : {0, 3, 5, 12}) {
    AutoAugConfig c;
    c.k = k;
    for (std::uint64_t e = 0; e < 200; ++e) {
      const EpochPolicy p = sample_epoch_policy(c, e);
      ASSERT_EQ(p.chosen.size(), static_cast<std::size_t>(k));
      EXPECT_EQ(std::set<std::string>(p.chosen.begin(), p.chosen.end()).size(), p.chosen.size());
      for (const auto& n : p.chosen) EXPECT_NE(std::find(names.begin(), names.end(), n), names.end());
      for (double m : p.magnitudes) EXPECT_EQ(m, c.d);
    }
  }
}

TEST(Policy, SmallerSetDrawsFromPrefix) {
  AutoAugConfig c;
  c.n = 4;
  c.k = 4;
  const auto& names = transform_names();
  const EpochPolicy p = sample_epoch_policy(c, 0);
  for (const auto& n : p.chosen) EXPECT_LT(std::find(names.begin(), names.end(), n) - names.begin(), 4);
}

TEST(Policy, DisabledConfigNeverGates) {
  AutoAugConfig c;
  c.enabled = false;
  for (std::uint64_t e = 0; e < 100; ++e) EXPECT_FALSE(sample_epoch_policy(c, e).epoch_gate);
}

TEST(Policy, DirectionsVaryAcrossImages) {
  const EpochPolicy p = sample_epoch_policy(AutoAugConfig{}, 3);
  int plus = 0;
  for (std::uint64_t salt = 0; salt < 1000; ++salt) {
    const int d = policy_direction(p, salt, 0);
    ASSERT_TRUE(d == 1 || d == -1);
    plus += d == 1;
    EXPECT_EQ(d, policy_direction(p, salt, 0));
  }
  EXPECT_GT(plus, 400);
  EXPECT_LT(plus, 600);
}

TEST(ApplyPolicy, AllGatesOffIsIdentity) {
  EpochPolicy p = forced({"rotate", "speckle"}, 3);
  p.per_transform_gate = {false, false};
  const Image img = random_image(16, 16, 2);
  EXPECT_EQ(apply_policy(p, img, 0), img);
  p = forced({"rotate"}, 3);
  p.epoch_gate = false;
  EXPECT_EQ(apply_policy(p, img, 0), img);
}

TEST(ApplyPolicy, FlipTwiceIsIdentity) {
  const Image img = random_image(9, 12, 3);
  for (const char* name : {"hflip", "vflip"}) {
    const EpochPolicy p = forced({name}, 3);
    EXPECT_EQ(apply_policy(p, apply_policy(p, img, 1), 1), img) << name;
  }
}

TEST(ApplyPolicy, RejectsNonFinitePixels) {
  Image img = random_image(4, 4, 4);
  img.pixels[5] = std::nan("");
  EXPECT_THROW(apply_policy(forced({"hflip"}, 3), img, 0), ContractError);
}

TEST(ApplyPolicy, SameSaltSameOutput) {
  const EpochPolicy p = forced({"speckle", "translate_x", "rotate"}, 3);
  const Image img = random_image(16, 16, 5);
  EXPECT_EQ(apply_policy(p, img, 7), apply_policy(p, img, 7));
  EXPECT_NE(apply_policy(p, img, 7), apply_policy(p, img, 8));
}

TEST(PolicySpace, PowerCounts) {
  AutoAugConfig c;
  c.k = 3;
  EXPECT_EQ(policy_space_size(c), 1728);
  c.k = 5;
  EXPECT_EQ(policy_space_size(c), 248832);
  c.k = 0;
  EXPECT_EQ(policy_space_size(c), 1);
  c.k = 12;
  EXPECT_EQ(policy_space_size(c), boost::multiprecision::cpp_int("8916100448256"));
}

TEST(Transform, MagnitudeZeroIsIdentity) {
  const Image img = random_image(16, 16, 6);
  for (const auto name : transform_names()) {
    if (name == "hflip" || name == "vflip") continue;
    for (int dir : {1, -1}) EXPECT_EQ(transform(name, 0.0, img, dir, 9), img) << name;
  }
}

TEST(Transform, OutputsKeepShapeAndRange) {
  Rng rng(7);
  const Image img = random_image(20, 14, 7);
  for (const auto name : transform_names()) {
    for (int trial = 0; trial < 5; ++trial) {
      const Image out = transform(name, rng.uniform(0, 10), img, rng.below(2) ? 1 : -1, rng.next_u64());
      ASSERT_EQ(out.height, img.height);
      ASSERT_EQ(out.width, img.width);
      for (double v : out.pixels) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(Transform, TranslateShiftsWholePixels) {
  const Image img = random_image(64, 64, 8);
  for (double m : {1.0, 3.0, 10.0}) {
    const long s = std::lround(m / 10 * 0.3 * 64);
    for (int dir : {1, -1}) {
      const Image tx = transform("translate_x", m, img, dir);
      const Image ty = transform("translate_y", m, img, dir);
      for (long y = 0; y < 64; ++y)
        for (long x = 0; x < 64; ++x) {
          const long sx = x - dir * s, sy = y - dir * s;
          const auto uy = static_cast<std::size_t>(y), ux = static_cast<std::size_t>(x);
          EXPECT_EQ(tx.at(uy, ux), (sx >= 0 && sx < 64) ? img.at(uy, static_cast<std::size_t>(sx)) : 0.0);
          EXPECT_EQ(ty.at(uy, ux), (sy >= 0 && sy < 64) ? img.at(static_cast<std::size_t>(sy), ux) : 0.0);
        }
    }
  }
}

TEST(Transform, RotateRoundTrip) {
  const Image img = smooth_image(64);
  const Image back = transform("rotate", 3, transform("rotate", 3, img, 1), -1);
  double worst = 0;
  for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs(back.pixels[i] - img.pixels[i]));
  EXPECT_LT(worst, 0.05);
  const Image once = transform("rotate", 3, img, 1);
  double moved = 0;
  for (std::size_t i = 0; i < img.size(); ++i) moved = std::max(moved, std::abs(once.pixels[i] - img.pixels[i]));
  EXPECT_GT(moved, 0.05);
}

TEST(Transform, BrightnessAndContrastScale) {
  Image img(2, 2);
  img.pixels = {0.1, 0.2, 0.3, 0.4};
  const Image b = transform("brightness", 10, img, 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(b.pixels[i], img.pixels[i] * 1.3, 1e-15);
  const Image c = transform("contrast", 5, img, -1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(c.pixels[i], 0.25 + (img.pixels[i] - 0.25) * 0.85, 1e-15);
}

TEST(Transform, BlurKeepsConstantImage) {
  Image img(10, 10);
  std::fill(img.pixels.begin(), img.pixels.end(), 0.6);
  const Image out = transform("blur", 10, img, 1);
  for (double v : out.pixels) EXPECT_NEAR(v, 0.6, 1e-14);
}

TEST(Transform, SpeckleKeepsMean) {
  Image img = smooth_image(64);
  for (double& v : img.pixels) v = 0.1 + 0.4 * v;
  for (double m : {1.0, 3.0, 10.0}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Image out = transform("speckle", m, img, 1, seed);
      EXPECT_LT(std::abs(out.mean() / img.mean() - 1), 0.03) << m << ' ' << seed;
      EXPECT_NE(out, img);
    }
  }
}

TEST(Transform, Errors) {
  const Image img = random_image(4, 4, 9);
  EXPECT_THROW(transform("solarize", 1, img), ConfigError);
  EXPECT_THROW(transform("rotate", 10.5, img), ConfigError);
  EXPECT_THROW(transform("rotate", -0.1, img), ConfigError);
}

TEST(Bilinear, ZeroFillOutside) {
  Image img(2, 2);
  img.pixels = {1, 2, 3, 4};
  EXPECT_EQ(sample_bilinear(img, 0, 0), 1.0);
  EXPECT_EQ(sample_bilinear(img, 0.5, 0.5), 2.5);
  EXPECT_EQ(sample_bilinear(img, -5, 0), 0.0);
  EXPECT_NEAR(sample_bilinear(img, 0, 1.5), 1.0, 1e-15);
}
