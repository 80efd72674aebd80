#include "convt/model.hpp"

#include <cmath>

#include "convt/error.hpp"
#include "convt/ops.hpp"
#include "convt/rng.hpp"

namespace convt {
namespace {

std::size_t mlp_hidden(const ConvTConfig& config, std::size_t channels) {
  return static_cast<std::size_t>(std::llround(config.mlp_ratio * static_cast<double>(channels)));
}

std::size_t round_up(std::size_t v, std::size_t multiple) { return (v + multiple - 1) / multiple * multiple; }

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Parameter uniform(std::string name, Shape shape, double bound) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng_.uniform(-bound, bound);
    return {std::move(name), std::move(t)};
  }
  static Parameter constant(std::string name, Shape shape, double value) {
    return {std::move(name), Tensor(std::move(shape), value)};
  }
  Linear linear(const std::string& name, std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {uniform(name + ".weight", {in, out}, bound), constant(name + ".bias", {out}, 0.0)};
  }
  static LayerNorm layer_norm(const std::string& name, std::size_t d) {
    return {constant(name + ".gamma", {d}, 1.0), constant(name + ".beta", {d}, 0.0)};
  }

 private:
  Rng rng_;
};

}  // namespace

std::size_t stage_padding(std::size_t kernel) { return (kernel - 1) / 2; }

void validate(const ConvTConfig& c) {
  if (c.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (c.patch_size == 0) throw ConfigError("patch_size must be positive");
  if (c.in_channels == 0 || c.input_height == 0 || c.input_width == 0) {
    throw ConfigError("input size and channel count must be positive");
  }
  if (c.stages.empty()) throw ConfigError("at least one stage is required");
  if (!(c.mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
  if (!(c.layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& s = c.stages[i];
    const std::string where = "stage " + std::to_string(i) + ": ";
    if (s.stride == 0) throw ConfigError(where + "stride must be >= 1");
    if (s.kernel_h == 0 || s.kernel_w == 0) throw ConfigError(where + "kernel extents must be >= 1");
    if (s.num_heads == 0) throw ConfigError(where + "num_heads must be >= 1");
    if (s.out_channels == 0) throw ConfigError(where + "out_channels must be >= 1");
    if (s.out_channels % s.num_heads != 0) {
      throw ConfigError(where + "out_channels " + std::to_string(s.out_channels) + " not divisible by " +
                        std::to_string(s.num_heads) + " heads");
    }
    if (mlp_hidden(c, s.out_channels) == 0) throw ConfigError(where + "mlp hidden width rounds to zero");
  }
  GridShape grid = patch_grid(c);
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& s = c.stages[i];
    if (grid.height + 2 * stage_padding(s.kernel_h) < s.kernel_h ||
        grid.width + 2 * stage_padding(s.kernel_w) < s.kernel_w) {
      throw ConfigError("stage " + std::to_string(i) + ": output grid would be empty");
    }
    grid = {conv_output_size(grid.height, s.kernel_h, s.stride, stage_padding(s.kernel_h)),
            conv_output_size(grid.width, s.kernel_w, s.stride, stage_padding(s.kernel_w))};
  }
}

GridShape patch_grid(const ConvTConfig& c) {
  if (c.patch_size == 0) throw ConfigError("patch_size must be positive");
  return {round_up(c.input_height, c.patch_size) / c.patch_size, round_up(c.input_width, c.patch_size) / c.patch_size};
}

std::vector<GridShape> stage_grids(const ConvTConfig& c) {
  std::vector<GridShape> grids;
  GridShape grid = patch_grid(c);
  for (const auto& s : c.stages) {
    grid = {conv_output_size(grid.height, s.kernel_h, s.stride, stage_padding(s.kernel_h)),
            conv_output_size(grid.width, s.kernel_w, s.stride, stage_padding(s.kernel_w))};
    grids.push_back(grid);
  }
  return grids;
}

Tensor pad_to_multiple(const Tensor& images, std::size_t multiple, bool* padded) {
  if (images.rank() != 4) throw DimensionError("expected images [B,C,H,W], got " + to_string(images.shape()));
  if (multiple == 0) throw ConfigError("patch_size must be positive");
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t ph = round_up(h, multiple), pw = round_up(w, multiple);
  if (padded) *padded = (ph != h || pw != w);
  if (ph == h && pw == w) return images;
  Tensor out(Shape{b, c, ph, pw}, 0.0);
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* src = images.data() + (plane * h + y) * w;
      std::copy(src, src + w, out.data() + (plane * ph + y) * pw);
    }
  }
  return out;
}

std::vector<PatchIndex> patch_index_map(std::size_t height, std::size_t width, std::size_t patch_size) {
  if (patch_size == 0) throw ConfigError("patch_size must be positive");
  const std::size_t ph = round_up(height, patch_size), pw = round_up(width, patch_size);
  const std::size_t grid_w = pw / patch_size;
  std::vector<PatchIndex> map;
  map.reserve(ph * pw);
  for (std::size_t y = 0; y < ph; ++y) {
    for (std::size_t x = 0; x < pw; ++x) {
      map.push_back({(y / patch_size) * grid_w + x / patch_size, (y % patch_size) * patch_size + x % patch_size});
    }
  }
  return map;
}

Var tokens_to_grid(Graph& g, Var tokens, GridShape grid) {
  const Tensor& t = g.value(tokens);
  if (t.rank() != 3 || t.dim(1) != grid.tokens()) {
    throw DimensionError("tokens " + to_string(t.shape()) + " do not match grid " + std::to_string(grid.height) + "x" +
                         std::to_string(grid.width));
  }
  return reshape(g, tokens, {t.dim(0), grid.height, grid.width, t.dim(2)});
}

Var grid_to_tokens(Graph& g, Var grid_maps) {
  const Tensor& m = g.value(grid_maps);
  if (m.rank() != 4) throw DimensionError("expected feature maps [B,H,W,C], got " + to_string(m.shape()));
  return reshape(g, grid_maps, {m.dim(0), m.dim(1) * m.dim(2), m.dim(3)});
}

Var linear(Graph& g, Var x, const Linear& layer) {
  return linear(g, x, g.parameter(layer.weight), g.parameter(layer.bias));
}

StageActivation patch_partition(Graph& g, const Tensor& images, const PatchEmbedding& embed) {
  if (embed.patch_size == 0) throw ConfigError("patch_size must be positive");
  bool padded = false;
  const Tensor input = pad_to_multiple(images, embed.patch_size, &padded);
  const GridShape grid{input.dim(2) / embed.patch_size, input.dim(3) / embed.patch_size};
  const Var pixels = g.constant(permute_values(input, {0, 2, 3, 1}));
  const Var maps = conv2d_channels_last(g, pixels, g.parameter(embed.weight), g.parameter(embed.bias),
                                        {embed.patch_size, 0, 0});
  return {grid_to_tokens(g, maps), grid, padded};
}

StageActivation conv_embedding(Graph& g, const StageActivation& prev, const Stage& stage) {
  const auto& p = stage.params;
  const Var maps = tokens_to_grid(g, prev.tokens, prev.grid);
  const Var conv = conv2d_channels_last(g, maps, g.parameter(stage.conv_weight), g.parameter(stage.conv_bias),
                                        {p.stride, stage_padding(p.kernel_h), stage_padding(p.kernel_w)});
  const Tensor& cv = g.value(conv);
  const GridShape grid{cv.dim(1), cv.dim(2)};
  if (grid != stage.grid) throw DimensionError("conv_embedding: grid does not match the stage configuration");
  const Var tokens = add(g, grid_to_tokens(g, conv), g.parameter(stage.position));
  return {tokens, grid, prev.padded};
}

Var multi_head_attention(Graph& g, Var tokens, const MultiHeadAttention& attn, AttentionProbe* probe) {
  const Tensor& x = g.value(tokens);
  if (x.rank() != 3) throw DimensionError("attention expects tokens [B,N,C], got " + to_string(x.shape()));
  const std::size_t c = x.dim(2);
  const std::size_t heads = attn.num_heads;
  if (heads == 0 || c % heads != 0 || attn.query.weight.value.dim(0) != c) {
    throw ConfigError("attention: " + std::to_string(c) + " channels incompatible with " + std::to_string(heads) +
                      " heads / projection " + to_string(attn.query.weight.value.shape()));
  }
  Tensor* weights = nullptr;
  if (probe) weights = &probe->weights.emplace_back();
  const Var q = linear(g, tokens, attn.query);
  const Var k = linear(g, tokens, attn.key);
  const Var v = linear(g, tokens, attn.value);
  const Var context = scaled_dot_product_attention(g, q, k, v, heads, weights);
  return linear(g, context, attn.output);
}

StageActivation encoder_block(Graph& g, const StageActivation& x, const EncoderBlock& block, double eps,
                              AttentionProbe* probe) {
  const Var normed = layer_norm(g, x.tokens, g.parameter(block.norm1.gamma), g.parameter(block.norm1.beta), eps);
  const Var attended = add(g, multi_head_attention(g, normed, block.attention, probe), x.tokens);
  const Var normed2 = layer_norm(g, attended, g.parameter(block.norm2.gamma), g.parameter(block.norm2.beta), eps);
  const Var hidden = gelu(g, linear(g, normed2, block.fc1));
  const Var out = add(g, linear(g, hidden, block.fc2), attended);
  return {out, x.grid, x.padded};
}

ConvTModel::ConvTModel(ConvTConfig config) : config_(std::move(config)) {
  validate(config_);
  Initializer init(config_.seed);
  const std::size_t p = config_.patch_size;
  const std::size_t first = config_.stages.front().out_channels;
  patch_.patch_size = p;
  patch_.weight = init.uniform("patch.weight", {first, config_.in_channels, p, p},
                               1.0 / std::sqrt(static_cast<double>(config_.in_channels * p * p)));
  patch_.bias = Initializer::constant("patch.bias", {first}, 0.0);

  const auto grids = stage_grids(config_);
  std::size_t in_ch = first;
  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    const auto& sp = config_.stages[i];
    const std::string prefix = "stage" + std::to_string(i);
    Stage stage;
    stage.params = sp;
    stage.in_channels = in_ch;
    stage.grid = grids[i];
    const std::size_t fan_in = in_ch * sp.kernel_h * sp.kernel_w;
    stage.conv_weight = init.uniform(prefix + ".conv.weight", {sp.out_channels, in_ch, sp.kernel_h, sp.kernel_w},
                                     1.0 / std::sqrt(static_cast<double>(fan_in)));
    stage.conv_bias = Initializer::constant(prefix + ".conv.bias", {sp.out_channels}, 0.0);
    stage.position = init.uniform(prefix + ".position", {grids[i].tokens(), sp.out_channels}, 0.02);
    const std::size_t c = sp.out_channels;
    for (std::size_t j = 0; j < sp.num_encoder_blocks; ++j) {
      const std::string bp = prefix + ".block" + std::to_string(j);
      EncoderBlock block;
      block.norm1 = Initializer::layer_norm(bp + ".norm1", c);
      block.attention.query = init.linear(bp + ".attn.query", c, c);
      block.attention.key = init.linear(bp + ".attn.key", c, c);
      block.attention.value = init.linear(bp + ".attn.value", c, c);
      block.attention.output = init.linear(bp + ".attn.output", c, c);
      block.attention.num_heads = sp.num_heads;
      block.norm2 = Initializer::layer_norm(bp + ".norm2", c);
      block.fc1 = init.linear(bp + ".mlp.fc1", c, mlp_hidden(config_, c));
      block.fc2 = init.linear(bp + ".mlp.fc2", mlp_hidden(config_, c), c);
      stage.blocks.push_back(std::move(block));
    }
    stages_.push_back(std::move(stage));
    in_ch = sp.out_channels;
  }
  head_ = init.linear("head", in_ch, config_.num_classes);
}

ModelOutput ConvTModel::forward(Graph& g, const Tensor& images, AttentionProbe* probe) const {
  if (images.rank() != 4) throw DimensionError("forward expects images [B,C,H,W], got " + to_string(images.shape()));
  if (images.dim(1) != config_.in_channels || images.dim(2) != config_.input_height ||
      images.dim(3) != config_.input_width) {
    throw DimensionError("image batch " + to_string(images.shape()) + " does not match configured input [" +
                         std::to_string(config_.in_channels) + "," + std::to_string(config_.input_height) + "," +
                         std::to_string(config_.input_width) + "]");
  }
  StageActivation x = patch_partition(g, images, patch_);
  for (const auto& stage : stages_) {
    x = conv_embedding(g, x, stage);
    for (const auto& block : stage.blocks) x = encoder_block(g, x, block, config_.layer_norm_eps, probe);
  }
  const Var embedding = mean(g, x.tokens, 1);
  return {linear(g, embedding, head_), embedding};
}

namespace {

template <class Model, class Out>
void collect(Model& m, Out& out) {
  out.push_back(&m.patch_embedding().weight);
  out.push_back(&m.patch_embedding().bias);
  for (auto& stage : m.stages()) {
    out.push_back(&stage.conv_weight);
    out.push_back(&stage.conv_bias);
    out.push_back(&stage.position);
    for (auto& block : stage.blocks) {
      out.push_back(&block.norm1.gamma);
      out.push_back(&block.norm1.beta);
      for (auto* l : {&block.attention.query, &block.attention.key, &block.attention.value, &block.attention.output}) {
        out.push_back(&l->weight);
        out.push_back(&l->bias);
      }
      out.push_back(&block.norm2.gamma);
      out.push_back(&block.norm2.beta);
      for (auto* l : {&block.fc1, &block.fc2}) {
        out.push_back(&l->weight);
        out.push_back(&l->bias);
      }
    }
  }
  out.push_back(&m.head().weight);
  out.push_back(&m.head().bias);
}

}  // namespace

std::vector<Parameter*> ConvTModel::parameters() {
  std::vector<Parameter*> out;
  collect(*this, out);
  return out;
}

std::vector<const Parameter*> ConvTModel::parameters() const {
  std::vector<const Parameter*> out;
  for (Parameter* p : const_cast<ConvTModel&>(*this).parameters()) out.push_back(p);
  return out;
}

std::size_t ConvTModel::parameter_count() const {
  std::size_t total = 0;
  for (const Parameter* p : parameters()) total += p->value.size();
  return total;
}

Parameter* ConvTModel::find_parameter(std::string_view name) {
  for (Parameter* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

std::uint64_t conv_layer_macs(std::size_t out_h, std::size_t out_w, std::size_t kernel_h, std::size_t kernel_w,
                              std::size_t filters, std::size_t input_maps) {
  return static_cast<std::uint64_t>(out_h) * out_w * kernel_h * kernel_w * filters * input_maps;
}

FlopsEstimate flops_estimate(const ConvTConfig& c) {
  validate(c);
  FlopsEstimate est;
  const GridShape pg = patch_grid(c);
  const std::size_t first = c.stages.front().out_channels;
  est.conv_layers.push_back({"patch", pg.height, pg.width, c.patch_size, c.patch_size, first, c.in_channels,
                             conv_layer_macs(pg.height, pg.width, c.patch_size, c.patch_size, first, c.in_channels)});
  const auto grids = stage_grids(c);
  std::size_t in_ch = first;
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& s = c.stages[i];
    const GridShape gs = grids[i];
    est.conv_layers.push_back({"stage" + std::to_string(i), gs.height, gs.width, s.kernel_h, s.kernel_w,
                               s.out_channels, in_ch,
                               conv_layer_macs(gs.height, gs.width, s.kernel_h, s.kernel_w, s.out_channels, in_ch)});
    const std::uint64_t n = gs.tokens();
    const std::uint64_t ch = s.out_channels;
    const std::uint64_t hidden = mlp_hidden(c, s.out_channels);
    // Q, K, V and output projections, Q K^T and weights * V.
    const std::uint64_t attn = 4 * n * ch * ch + 2 * n * n * ch;
    const std::uint64_t mlp = 2 * n * ch * hidden;
    est.attention_macs += attn * s.num_encoder_blocks;
    est.mlp_macs += mlp * s.num_encoder_blocks;
    in_ch = s.out_channels;
  }
  est.head_macs = static_cast<std::uint64_t>(in_ch) * c.num_classes;
  for (const auto& layer : est.conv_layers) est.conv_macs += layer.macs;
  est.total_macs = est.conv_macs + est.attention_macs + est.mlp_macs + est.head_macs;
  return est;
}

}  // namespace convt
