#include "convt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <regex>

#include "convt/error.hpp"

namespace convt {

namespace fs = std::filesystem;

std::vector<std::vector<std::size_t>> Dataset::indices_by_class() const {
  std::vector<std::vector<std::size_t>> out(num_classes());
  for (std::size_t i = 0; i < chips.size(); ++i) out[static_cast<std::size_t>(chips[i].label)].push_back(i);
  return out;
}

void validate(const Dataset& ds) {
  if (ds.chips.empty()) throw ContractError("dataset is empty");
  std::vector<bool> seen(ds.num_classes(), false);
  for (const auto& c : ds.chips) {
    if (c.label < 0 || static_cast<std::size_t>(c.label) >= ds.num_classes()) {
      throw ContractError("chip '" + c.name + "' has label " + std::to_string(c.label) + " outside [0, " +
                          std::to_string(ds.num_classes()) + ")");
    }
    if (c.image.height != ds.height() || c.image.width != ds.width()) {
      throw DimensionError("chip '" + c.name + "' differs in size from the rest of the dataset");
    }
    seen[static_cast<std::size_t>(c.label)] = true;
  }
  for (std::size_t k = 0; k < seen.size(); ++k) {
    if (!seen[k]) throw ContractError("class '" + ds.class_names[k] + "' has no chips");
  }
}

namespace {

Image fit_center(const Image& in, std::size_t h, std::size_t w) {
  Image out(h, w);
  const auto oy = (static_cast<long>(h) - static_cast<long>(in.height)) / 2;
  const auto ox = (static_cast<long>(w) - static_cast<long>(in.width)) / 2;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const long sy = static_cast<long>(y) - oy, sx = static_cast<long>(x) - ox;
      if (sy >= 0 && sx >= 0 && sy < static_cast<long>(in.height) && sx < static_cast<long>(in.width)) {
        out.at(y, x) = in.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  }
  return out;
}

double pose_from_name(const std::string& stem) {
  static const std::regex re(R"(_p(-?[0-9]+(?:\.[0-9]+)?)$)");
  std::smatch m;
  if (std::regex_search(stem, m, re)) return std::stod(m[1].str());
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

Dataset load_chip_dataset(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError("not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  Dataset ds;
  ds.source = Dataset::Source::Directory;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (e.is_regular_file() && (ext == ".png" || ext == ".pgm")) files.push_back(e.path());
    }
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    const int label = static_cast<int>(ds.class_names.size());
    ds.class_names.push_back(dir.filename().string());
    for (const auto& f : files) {
      ds.chips.push_back({read_image(f), label, pose_from_name(f.stem().string()), f.string()});
    }
  }
  if (ds.chips.empty()) throw IoError("no chips found under " + root.string());

  std::map<std::pair<std::size_t, std::size_t>, std::size_t> sizes;
  for (const auto& c : ds.chips) ++sizes[{c.image.height, c.image.width}];
  // Ties resolve to the smallest size.
  const auto modal = std::max_element(sizes.begin(), sizes.end(), [](const auto& a, const auto& b) {
                       return a.second < b.second;
                     })->first;
  for (auto& c : ds.chips) {
    if (c.image.height == modal.first && c.image.width == modal.second) continue;
    ds.warnings.push_back(fmt::format("{}: {}x{} chip fitted to {}x{}", c.name, c.image.height, c.image.width,
                                      modal.first, modal.second));
    c.image = fit_center(c.image, modal.first, modal.second);
  }
  return ds;
}

void save_chip_dataset(const Dataset& ds, const fs::path& root) {
  validate(ds);
  for (const auto& name : ds.class_names) fs::create_directories(root / name);
  std::vector<std::size_t> counter(ds.num_classes(), 0);
  for (const auto& c : ds.chips) {
    const auto& cls = ds.class_names[static_cast<std::size_t>(c.label)];
    std::string file = fmt::format("{}_{:04d}", cls, counter[static_cast<std::size_t>(c.label)]++);
    if (std::isfinite(c.pose)) file += fmt::format("_p{:.4f}", c.pose);
    write_png(root / cls / (file + ".png"), c.image);
  }
}

// ---------------------------------------------------------------------------
// Synthetic targets

namespace {

enum class Kind { Ellipse, Box, Ring };

struct Part {
  Kind kind;
  double y, x;    // centre offset, in units of chip_size / 64
  double a, b;    // half extents (ring: outer and inner radius)
  double angle;   // degrees, relative to the target pose
  double gain;
};

const std::vector<std::vector<Part>>& catalogue() {
  static const std::vector<std::vector<Part>> parts{
      {{Kind::Ellipse, 0, 0, 15, 7, 0, 0.8}},
      {{Kind::Box, 0, 0, 13, 6, 0, 0.8}},
      {{Kind::Box, 0, 0, 14, 3, 0, 0.8}, {Kind::Box, 0, 0, 14, 3, 90, 0.8}},
      {{Kind::Box, 0, -3, 10, 6, 0, 0.7}, {Kind::Box, 0, 10, 9, 1.5, 0, 0.9}, {Kind::Ellipse, 0, -3, 4, 4, 0, 1.0}},
      {{Kind::Box, -6, 0, 13, 2.5, 0, 0.8}, {Kind::Box, 6, 0, 13, 2.5, 0, 0.8}},
      {{Kind::Ellipse, 0, 0, 9, 9, 0, 0.85}},
      {{Kind::Box, 0, -4, 12, 3, 0, 0.8}, {Kind::Box, 7, -13, 3, 10, 0, 0.8}},
      {{Kind::Box, -8, 0, 12, 3, 0, 0.8}, {Kind::Box, 4, 0, 3, 10, 0, 0.8}},
      {{Kind::Ring, 0, 0, 11, 6, 0, 0.85}},
      {{Kind::Ellipse, -7, 0, 4.5, 4.5, 0, 0.9}, {Kind::Ellipse, 5, -7, 4.5, 4.5, 0, 0.9},
       {Kind::Ellipse, 5, 7, 4.5, 4.5, 0, 0.9}},
  };
  return parts;
}

bool inside(const Part& p, double dy, double dx) {
  const double t = p.angle * std::numbers::pi / 180.0;
  const double u = std::cos(t) * dx + std::sin(t) * dy;
  const double v = -std::sin(t) * dx + std::cos(t) * dy;
  switch (p.kind) {
    case Kind::Ellipse: return (u * u) / (p.a * p.a) + (v * v) / (p.b * p.b) <= 1.0;
    case Kind::Box: return std::abs(u) <= p.a && std::abs(v) <= p.b;
    case Kind::Ring: {
      const double r2 = u * u + v * v;
      return r2 <= p.a * p.a && r2 >= p.b * p.b;
    }
  }
  return false;
}

constexpr double kBackground = 0.08;
constexpr std::uint64_t kSynthTag = 0x73796e7468000003ULL;

}  // namespace

int synth_class_count() { return static_cast<int>(catalogue().size()); }

void validate(const SynthConfig& c) {
  if (c.num_classes < 2 || c.num_classes > synth_class_count()) {
    throw ConfigError("synthetic classes must be in [2, " + std::to_string(synth_class_count()) + "]");
  }
  if (c.chips_per_class < 1) throw ConfigError("chips_per_class must be positive");
  if (c.chip_size < 16) throw ConfigError("chip_size must be at least 16");
  if (!(c.speckle_shape > 0.0)) throw ConfigError("speckle_shape must be positive");
  if (!(c.pose_range >= 0.0)) throw ConfigError("pose_range must be nonnegative");
}

Image render_target(int label, double pose_deg, int chip_size, double jitter_y, double jitter_x, double scale) {
  const auto& parts = catalogue().at(static_cast<std::size_t>(label));
  const auto n = static_cast<std::size_t>(chip_size);
  const double unit = chip_size / 64.0 * scale;
  const double centre = (chip_size - 1) / 2.0;
  const double t = pose_deg * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  Image out(n, n, kBackground);
  // 3x3 supersampling per pixel.
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < 3; ++sy) {
        for (int sx = 0; sx < 3; ++sx) {
          const double py = static_cast<double>(y) + (sy - 1) / 3.0 - centre - jitter_y;
          const double px = static_cast<double>(x) + (sx - 1) / 3.0 - centre - jitter_x;
          // Rotate into the target frame, then into part units.
          const double ty = (-s * px + c * py) / unit, tx = (c * px + s * py) / unit;
          double value = kBackground;
          for (const auto& p : parts) {
            if (inside(p, ty - p.y, tx - p.x)) value = std::max(value, p.gain);
          }
          acc += value;
        }
      }
      out.at(y, x) = acc / 9.0;
    }
  }
  return out;
}

namespace {

struct ChipDraw {
  Image clean;
  double pose;
};

// Pose, jitter and scale come first in each chip's stream; speckle follows.
ChipDraw draw_clean(const SynthConfig& config, int label, Rng& rng) {
  const double pose = rng.uniform() * config.pose_range;
  const double jy = rng.uniform(-2.0, 2.0), jx = rng.uniform(-2.0, 2.0);
  const double scale = rng.uniform(0.95, 1.05);
  return {render_target(label, pose, config.chip_size, jy, jx, scale), pose};
}

Rng chip_stream(const SynthConfig& config, int label, int index) {
  return Rng(derive_seed({config.seed, static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(index), kSynthTag}));
}

}  // namespace

Image synth_clean_chip(const SynthConfig& config, int label, int index) {
  validate(config);
  Rng rng = chip_stream(config, label, index);
  return draw_clean(config, label, rng).clean;
}

Dataset synth_generate(const SynthConfig& config) {
  validate(config);
  Dataset ds;
  ds.source = Dataset::Source::Synthetic;
  for (int k = 0; k < config.num_classes; ++k) ds.class_names.push_back(fmt::format("class{:02d}", k));
  for (int k = 0; k < config.num_classes; ++k) {
    for (int i = 0; i < config.chips_per_class; ++i) {
      Rng rng = chip_stream(config, k, i);
      auto [img, pose] = draw_clean(config, k, rng);
      const double looks = config.speckle_shape;
      for (double& v : img.pixels) v *= rng.gamma(looks) / looks;
      clip_unit(img);
      ds.chips.push_back({std::move(img), k, pose, fmt::format("{}_{:04d}", ds.class_names[static_cast<std::size_t>(k)], i)});
    }
  }
  return ds;
}

Split split_by_pose(const Dataset& ds, double bin_width) {
  if (!(bin_width > 0.0)) throw ConfigError("pose bin width must be positive");
  Split out;
  for (auto* part : {&out.train, &out.test}) {
    part->class_names = ds.class_names;
    part->source = ds.source;
  }
  std::vector<std::size_t> seen(ds.num_classes(), 0);
  for (const auto& c : ds.chips) {
    bool to_test = false;
    if (std::isfinite(c.pose)) {
      to_test = static_cast<long long>(std::floor(c.pose / bin_width)) % 2 != 0;
    } else {
      to_test = seen[static_cast<std::size_t>(c.label)]++ % 2 != 0;
    }
    (to_test ? out.test : out.train).chips.push_back(c);
  }
  return out;
}

Episode sample_episode(const Dataset& ds, int n_way, int k_shot, int q_per_class, Rng& rng) {
  if (n_way < 1 || k_shot < 0 || q_per_class < 0) throw ContractError("episode sizes must be nonnegative, n_way >= 1");
  if (static_cast<std::size_t>(n_way) > ds.num_classes()) {
    throw ContractError(fmt::format("{}-way episode requested from {} classes", n_way, ds.num_classes()));
  }
  const auto by_class = ds.indices_by_class();
  std::vector<int> classes(ds.num_classes());
  std::iota(classes.begin(), classes.end(), 0);
  Episode ep;
  for (int i = 0; i < n_way; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(classes.size() - static_cast<std::size_t>(i));
    std::swap(classes[static_cast<std::size_t>(i)], classes[j]);
    ep.class_map.push_back(classes[static_cast<std::size_t>(i)]);
  }
  for (int local = 0; local < n_way; ++local) {
    const auto cls = static_cast<std::size_t>(ep.class_map[static_cast<std::size_t>(local)]);
    auto pool = by_class[cls];
    const auto need = static_cast<std::size_t>(k_shot + q_per_class);
    if (pool.size() < need) {
      throw ContractError(fmt::format("class '{}' has {} chips, episode needs {} ({} support + {} query)",
                                      ds.class_names[cls], pool.size(), need, k_shot, q_per_class));
    }
    for (std::size_t i = 0; i < need; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    for (std::size_t i = 0; i < need; ++i) {
      auto& dst = i < static_cast<std::size_t>(k_shot) ? ep.support : ep.query;
      dst.push_back({pool[i], local});
    }
  }
  return ep;
}

Tensor to_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("cannot build an empty batch");
  const std::size_t h = images.front()->height, w = images.front()->width;
  Tensor out(Shape{images.size(), 1, h, w});
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b]->height != h || images[b]->width != w) throw DimensionError("batch images differ in size");
    std::copy(images[b]->pixels.begin(), images[b]->pixels.end(), out.data() + b * h * w);
  }
  return out;
}

}  // namespace convt
