#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convt/image.hpp"
#include "convt/rng.hpp"
#include "convt/tensor.hpp"

namespace convt {

struct Chip {
  Image image;
  int label = 0;
  double pose = 0.0;  // degrees; NaN when unknown
  std::string name;
};

struct Dataset {
  enum class Source { Directory, Synthetic };

  std::vector<Chip> chips;
  std::vector<std::string> class_names;
  Source source = Source::Synthetic;
  std::vector<std::string> warnings;

  std::size_t size() const noexcept { return chips.size(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::size_t height() const { return chips.empty() ? 0 : chips.front().image.height; }
  std::size_t width() const { return chips.empty() ? 0 : chips.front().image.width; }
  /// Chip indices per label, ascending.
  std::vector<std::vector<std::size_t>> indices_by_class() const;
};

/// Labels dense in [0, num_classes) and a common chip size.
void validate(const Dataset& ds);

/// `root/<class>/<chip>.{png,pgm}`. Labels follow sorted class-directory names.
/// Chips of a non-modal size are center-cropped or zero-padded, with a warning.
Dataset load_chip_dataset(const std::filesystem::path& root);

/// Writes `root/<class>/<class>_<index>_p<pose>.png`; the pose survives a reload.
void save_chip_dataset(const Dataset& ds, const std::filesystem::path& root);

struct SynthConfig {
  int num_classes = 10;
  int chips_per_class = 40;
  int chip_size = 64;
  double speckle_shape = 4.0;  // Gamma looks; larger is cleaner
  double pose_range = 360.0;   // poses drawn uniformly from [0, pose_range)
  std::uint64_t seed = 0;
};

void validate(const SynthConfig& config);

/// Parametric bright targets on a dark background with multiplicative speckle.
Dataset synth_generate(const SynthConfig& config);

/// The chip synth_generate would produce for (label, index), before speckle.
Image synth_clean_chip(const SynthConfig& config, int label, int index);

/// Noise-free render of one class at one pose.
Image render_target(int label, double pose_deg, int chip_size, double jitter_y = 0.0, double jitter_x = 0.0,
                    double scale = 1.0);

/// Number of distinct synthetic target classes available.
int synth_class_count();

/// Pose-interleaved split: chips whose pose falls in an even `bin_width` bin go to
/// train, odd bins to test. Chips without a pose alternate by per-class index.
struct Split {
  Dataset train;
  Dataset test;
};
Split split_by_pose(const Dataset& ds, double bin_width = 20.0);

struct EpisodeItem {
  std::size_t index = 0;  // into the source dataset
  int label = 0;          // episode-local
};

struct Episode {
  std::vector<EpisodeItem> support;
  std::vector<EpisodeItem> query;
  std::vector<int> class_map;  // episode label -> dataset label
};

/// Classes without replacement, then support followed by query within each class.
Episode sample_episode(const Dataset& ds, int n_way, int k_shot, int q_per_class, Rng& rng);

/// Stacks chips into [B, 1, H, W].
Tensor to_batch(const std::vector<const Image*>& images);

}  // namespace convt
