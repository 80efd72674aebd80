#pragma once

#include <map>
#include <string>
#include <string_view>

#include "convt/model.hpp"
#include "convt/trainer.hpp"

namespace convt {

/// `key = value` lines; `#` starts a comment. Later keys override earlier ones.
using KeyValues = std::map<std::string, std::string, std::less<>>;

KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values(const std::filesystem::path& path);

/// Stage list as `channels:KHxKW:s<stride>:h<heads>:b<blocks>`, comma separated.
std::string format_stages(const std::vector<StageParams>& stages);
std::vector<StageParams> parse_stages(std::string_view text);

/// Applies one key; returns false when the key belongs to neither config.
/// Malformed values throw ConfigError naming the key.
bool apply_key(ConvTConfig& model, TrainConfig& train, std::string_view key, std::string_view value);

/// Every model and training key with its value, in a fixed order. Reals are
/// printed with 17 significant digits so parsing restores them exactly.
std::string format_config(const ConvTConfig& model, const TrainConfig& train);

/// Keys not consumed are returned.
KeyValues apply_config(ConvTConfig& model, TrainConfig& train, const KeyValues& values);

std::string format_real(double value);

}  // namespace convt
