#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "convt/config.hpp"
#include "convt/data.hpp"
#include "convt/model.hpp"
#include "convt/trainer.hpp"

namespace convt::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kUsage = 2;

/// Everything a run needs; serialized as the run manifest.
struct RunSettings {
  ConvTConfig model;
  TrainConfig train;
  std::string data;  // chip directory; empty selects the synthetic generator
  SynthConfig synth;
  int n_way = 10;
  int k_shot = 10;
  int queries = 15;
  int repeats = 20;
  bool aug_k_explicit = false;
};

/// Applies manifest/config keys (model, training and run keys). Informational
/// manifest keys (command, out, timestamps) are accepted and ignored; anything
/// else raises ConfigError.
void apply_settings(RunSettings& settings, const KeyValues& values);

/// Key-value text: command, run keys, model and training keys, timestamps.
std::string format_manifest(const std::string& command, const RunSettings& settings,
                            const std::filesystem::path& out_dir, const std::string& start_time,
                            const std::string& end_time = "");

/// Runs one command line. Returns 0 on success, 1 on a failed run, 2 on usage errors.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

/// SVG line chart of loss and accuracy curves from a metrics CSV.
void render_report(const std::filesystem::path& metrics_csv, const std::filesystem::path& out_dir);

}  // namespace convt::cli
