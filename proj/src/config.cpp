#include "convt/config.hpp"

#include <charconv>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <limits>
#include <sstream>

#include "convt/error.hpp"

namespace convt {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError(fmt::format("{}: cannot parse '{}'", key, value));
  }
  return out;
}

double parse_real(std::string_view key, std::string_view value) {
  if (value == "inf" || value == "+inf") return std::numeric_limits<double>::infinity();
  if (value == "-inf") return -std::numeric_limits<double>::infinity();
  return parse_number<double>(key, value);
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "off" || value == "no") return false;
  throw ConfigError(fmt::format("{}: expected on/off, got '{}'", key, value));
}

}  // namespace

std::string format_real(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  return fmt::format("{:.17g}", value);
}

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(fmt::format("line {}: expected key = value", line_no));
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(fmt::format("line {}: empty key", line_no));
    out[std::string(key)] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_key_values(buffer.str());
}

std::string format_stages(const std::vector<StageParams>& stages) {
  std::string out;
  for (const auto& s : stages) {
    if (!out.empty()) out += ',';
    out += fmt::format("{}:{}x{}:s{}:h{}:b{}", s.out_channels, s.kernel_h, s.kernel_w, s.stride, s.num_heads,
                       s.num_encoder_blocks);
  }
  return out;
}

std::vector<StageParams> parse_stages(std::string_view text) {
  std::vector<StageParams> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto item = trim(text.substr(0, comma));
    text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
    StageParams s;
    std::istringstream in{std::string(item)};
    char x = 0, c1 = 0, c2 = 0, c3 = 0, c4 = 0, ls = 0, lh = 0, lb = 0;
    if (!(in >> s.out_channels >> c1 >> s.kernel_h >> x >> s.kernel_w >> c2 >> ls >> s.stride >> c3 >> lh >>
          s.num_heads >> c4 >> lb >> s.num_encoder_blocks) ||
        c1 != ':' || x != 'x' || c2 != ':' || c3 != ':' || c4 != ':' || ls != 's' || lh != 'h' || lb != 'b' ||
        !(in >> std::ws).eof()) {
      throw ConfigError(fmt::format("stages: cannot parse '{}' (expected C:KHxKW:sS:hH:bB)", item));
    }
    out.push_back(s);
  }
  if (out.empty()) throw ConfigError("stages: empty list");
  return out;
}

bool apply_key(ConvTConfig& m, TrainConfig& t, std::string_view key, std::string_view v) {
  auto size = [&](std::size_t& dst) { dst = parse_number<std::size_t>(key, v); };
  auto integer = [&](int& dst) { dst = parse_number<int>(key, v); };
  auto real = [&](double& dst) { dst = parse_real(key, v); };
  auto seed = [&](std::uint64_t& dst) { dst = parse_number<std::uint64_t>(key, v); };

  if (key == "input_height") size(m.input_height);
  else if (key == "input_width") size(m.input_width);
  else if (key == "in_channels") size(m.in_channels);
  else if (key == "num_classes") size(m.num_classes);
  else if (key == "patch_size") size(m.patch_size);
  else if (key == "stages") m.stages = parse_stages(v);
  else if (key == "mlp_ratio") real(m.mlp_ratio);
  else if (key == "layer_norm_eps") real(m.layer_norm_eps);
  else if (key == "model_seed") seed(m.seed);
  else if (key == "epochs") integer(t.epochs);
  else if (key == "batch") integer(t.batch_size);
  else if (key == "lr") real(t.learning_rate);
  else if (key == "optimizer") {
    if (v == "adam") t.optimizer = OptimizerKind::Adam;
    else if (v == "sgd_momentum") t.optimizer = OptimizerKind::SgdMomentum;
    else throw ConfigError(fmt::format("optimizer: expected adam or sgd_momentum, got '{}'", v));
  } else if (key == "lr_schedule") {
    if (v == "cosine") t.lr_schedule = LrSchedule::Cosine;
    else if (v == "constant") t.lr_schedule = LrSchedule::Constant;
    else throw ConfigError(fmt::format("lr_schedule: expected cosine or constant, got '{}'", v));
  }
  else if (key == "momentum") real(t.momentum);
  else if (key == "beta1") real(t.beta1);
  else if (key == "beta2") real(t.beta2);
  else if (key == "adam_eps") real(t.adam_eps);
  else if (key == "weight_decay") real(t.weight_decay);
  else if (key == "seed") seed(t.seed);
  else if (key == "lm_margin") real(t.margins.lm_margin);
  else if (key == "triplet_margin") real(t.margins.triplet_margin);
  else if (key == "triplet") t.margins.triplet_enabled = parse_bool(key, v);
  else if (key == "mining") {
    if (v == "batch_all") t.margins.mining = Mining::BatchAll;
    else if (v == "batch_hard") t.margins.mining = Mining::BatchHard;
    else throw ConfigError(fmt::format("mining: expected batch_all or batch_hard, got '{}'", v));
  }
  else if (key == "aug") t.aug.enabled = parse_bool(key, v);
  else if (key == "aug_n") integer(t.aug.n);
  else if (key == "aug_k") integer(t.aug.k);
  else if (key == "aug_d") real(t.aug.d);
  else if (key == "aug_m_a") real(t.aug.m_a);
  else if (key == "aug_m_each") real(t.aug.m_each);
  else if (key == "aug_seed") seed(t.aug.seed);
  else return false;
  return true;
}

KeyValues apply_config(ConvTConfig& model, TrainConfig& train, const KeyValues& values) {
  KeyValues rest;
  for (const auto& [k, v] : values) {
    if (!apply_key(model, train, k, v)) rest.emplace(k, v);
  }
  return rest;
}

std::string format_config(const ConvTConfig& m, const TrainConfig& t) {
  std::string out;
  auto put = [&](std::string_view k, const std::string& v) { out += fmt::format("{} = {}\n", k, v); };
  put("input_height", std::to_string(m.input_height));
  put("input_width", std::to_string(m.input_width));
  put("in_channels", std::to_string(m.in_channels));
  put("num_classes", std::to_string(m.num_classes));
  put("patch_size", std::to_string(m.patch_size));
  put("stages", format_stages(m.stages));
  put("mlp_ratio", format_real(m.mlp_ratio));
  put("layer_norm_eps", format_real(m.layer_norm_eps));
  put("model_seed", std::to_string(m.seed));
  put("epochs", std::to_string(t.epochs));
  put("batch", std::to_string(t.batch_size));
  put("lr", format_real(t.learning_rate));
  put("optimizer", t.optimizer == OptimizerKind::Adam ? "adam" : "sgd_momentum");
  put("lr_schedule", t.lr_schedule == LrSchedule::Cosine ? "cosine" : "constant");
  put("momentum", format_real(t.momentum));
  put("beta1", format_real(t.beta1));
  put("beta2", format_real(t.beta2));
  put("adam_eps", format_real(t.adam_eps));
  put("weight_decay", format_real(t.weight_decay));
  put("seed", std::to_string(t.seed));
  put("lm_margin", format_real(t.margins.lm_margin));
  put("triplet_margin", format_real(t.margins.triplet_margin));
  put("triplet", t.margins.triplet_enabled ? "on" : "off");
  put("mining", t.margins.mining == Mining::BatchAll ? "batch_all" : "batch_hard");
  put("aug", t.aug.enabled ? "on" : "off");
  put("aug_n", std::to_string(t.aug.n));
  put("aug_k", std::to_string(t.aug.k));
  put("aug_d", format_real(t.aug.d));
  put("aug_m_a", format_real(t.aug.m_a));
  put("aug_m_each", format_real(t.aug.m_each));
  put("aug_seed", std::to_string(t.aug.seed));
  return out;
}

}  // namespace convt
