#pragma once

#include <array>
#include <boost/multiprecision/cpp_int.hpp>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "convt/image.hpp"

namespace convt {

/// Per-epoch auto augmentation settings.
struct AutoAugConfig {
  int n = 12;             // transforms available (a prefix of transform_names())
  int k = 3;              // transforms drawn per epoch
  double d = 3.0;         // shared magnitude, 0..10
  double m_a = 0.0;       // epoch gate threshold
  double m_each = 0.0;    // per-transform gate threshold
  std::uint64_t seed = 0;
  bool enabled = true;    // false pins every epoch gate shut

  friend bool operator==(const AutoAugConfig&, const AutoAugConfig&) = default;
};

void validate(const AutoAugConfig& config);

/// 5 for one- and two-shot tasks, 3 otherwise.
int default_aug_k(int k_shot);

struct EpochPolicy {
  std::uint64_t epoch = 0;
  double m = 0.0;
  bool epoch_gate = false;
  std::vector<std::string> chosen;
  std::vector<double> gate_draws;
  std::vector<bool> per_transform_gate;
  std::vector<double> magnitudes;
  std::uint64_t noise_seed = 0;

  bool operator==(const EpochPolicy&) const = default;
};

const std::array<std::string_view, 12>& transform_names();

EpochPolicy sample_epoch_policy(const AutoAugConfig& config, std::uint64_t epoch);

/// Applies the gated transforms in drawn order. `salt` separates the noise
/// streams of different images within one epoch.
Image apply_policy(const EpochPolicy& policy, const Image& image, std::uint64_t salt = 0);

/// Sign (+1 or -1) of transform `i` for the image with `salt`. Drawn per image
/// so a gated translate or rotate does not move the whole epoch one way.
int policy_direction(const EpochPolicy& policy, std::uint64_t salt, std::size_t i);

/// N^K, the policy count with repetition.
boost::multiprecision::cpp_int policy_space_size(const AutoAugConfig& config);

/// One named kernel. Magnitude is on the 0..10 scale; `direction` flips the
/// sign of rotate/translate/shear/zoom/brightness/contrast.
Image transform(std::string_view name, double magnitude, const Image& image, int direction = 1,
                std::uint64_t noise_seed = 0);

/// Bilinear sample with zero fill outside the chip.
double sample_bilinear(const Image& image, double y, double x);

}  // namespace convt
