#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "convt/graph.hpp"
#include "convt/tensor.hpp"

namespace convt {

struct GridShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t tokens() const noexcept { return height * width; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// One stage: strided convolutional embedding followed by encoder blocks.
struct StageParams {
  std::size_t out_channels = 64;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t num_heads = 1;
  std::size_t num_encoder_blocks = 1;
  friend bool operator==(const StageParams&, const StageParams&) = default;
};

struct ConvTConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t in_channels = 1;
  std::size_t num_classes = 10;
  std::size_t patch_size = 4;
  std::vector<StageParams> stages = {
      {64, 3, 3, 1, 2, 1},
      {128, 3, 3, 2, 4, 1},
      {256, 3, 3, 2, 8, 1},
  };
  double mlp_ratio = 2.0;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 0;
  friend bool operator==(const ConvTConfig&, const ConvTConfig&) = default;
};

/// Throws ConfigError describing the first violated constraint.
void validate(const ConvTConfig& config);

/// Token grid after the patch partition (image padded up to whole patches).
GridShape patch_grid(const ConvTConfig& config);

/// Token grid after every stage, in order.
std::vector<GridShape> stage_grids(const ConvTConfig& config);

/// Symmetric padding used by stage convolutions: (kernel - 1) / 2.
std::size_t stage_padding(std::size_t kernel);

struct Linear {
  Parameter weight;  // [in, out]
  Parameter bias;    // [out]
};

struct LayerNorm {
  Parameter gamma;
  Parameter beta;
};

struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t num_heads = 1;
};

struct EncoderBlock {
  LayerNorm norm1;
  MultiHeadAttention attention;
  LayerNorm norm2;
  Linear fc1;
  Linear fc2;
};

struct PatchEmbedding {
  Parameter weight;  // [C1, Cin, p, p]
  Parameter bias;
  std::size_t patch_size = 1;
};

struct Stage {
  StageParams params;
  std::size_t in_channels = 0;
  GridShape grid;       // output grid of this stage
  Parameter conv_weight;
  Parameter conv_bias;
  Parameter position;   // [grid.tokens(), out_channels]
  std::vector<EncoderBlock> blocks;
};

/// Tokens [B, H*W, C] together with the grid they came from.
struct StageActivation {
  Var tokens;
  GridShape grid;
  bool padded = false;
};

/// Collects attention weight tensors [B, heads, N, N] in execution order.
struct AttentionProbe {
  std::vector<Tensor> weights;
};

struct ModelOutput {
  Var logits;     // [B, num_classes]
  Var embedding;  // [B, last stage channels]
};

/// Zero-pads [B,C,H,W] on the right and bottom up to multiples of `multiple`.
Tensor pad_to_multiple(const Tensor& images, std::size_t multiple, bool* padded = nullptr);

/// For every pixel (row-major) of an H x W image padded to whole patches:
/// the token it lands in and its offset inside that token's patch.
struct PatchIndex {
  std::size_t token;
  std::size_t offset;
};
std::vector<PatchIndex> patch_index_map(std::size_t height, std::size_t width, std::size_t patch_size);

/// Tokens [B, H*W, C] <-> channels-last grid [B, H, W, C].
Var tokens_to_grid(Graph& g, Var tokens, GridShape grid);
Var grid_to_tokens(Graph& g, Var grid_maps);

Var linear(Graph& g, Var x, const Linear& layer);

StageActivation patch_partition(Graph& g, const Tensor& images, const PatchEmbedding& embed);

/// Reshapes tokens onto their grid, applies the strided stage convolution,
/// flattens back and adds the stage's position table.
StageActivation conv_embedding(Graph& g, const StageActivation& prev, const Stage& stage);

/// softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated and projected.
Var multi_head_attention(Graph& g, Var tokens, const MultiHeadAttention& attn, AttentionProbe* probe = nullptr);

/// Pre-norm residual block: L = MHA(LN(x)) + x, T = MLP(LN(L)) + L.
StageActivation encoder_block(Graph& g, const StageActivation& x, const EncoderBlock& block, double eps = 1e-5,
                              AttentionProbe* probe = nullptr);

class ConvTModel {
 public:
  /// Builds and initializes every parameter deterministically from config.seed.
  explicit ConvTModel(ConvTConfig config);

  const ConvTConfig& config() const noexcept { return config_; }

  /// images: [B, in_channels, input_height, input_width].
  ModelOutput forward(Graph& g, const Tensor& images, AttentionProbe* probe = nullptr) const;

  /// Every parameter in a fixed registration order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
  Parameter* find_parameter(std::string_view name);

  PatchEmbedding& patch_embedding() noexcept { return patch_; }
  std::vector<Stage>& stages() noexcept { return stages_; }
  const std::vector<Stage>& stages() const noexcept { return stages_; }
  Linear& head() noexcept { return head_; }

 private:
  ConvTConfig config_;
  PatchEmbedding patch_;
  std::vector<Stage> stages_;
  Linear head_;
};

struct ConvLayerCost {
  std::string name;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t filters = 0;
  std::size_t input_maps = 0;
  std::uint64_t macs = 0;
};

/// Multiply-accumulate counts for one forward pass of one image.
struct FlopsEstimate {
  std::vector<ConvLayerCost> conv_layers;
  std::uint64_t conv_macs = 0;
  std::uint64_t attention_macs = 0;
  std::uint64_t mlp_macs = 0;
  std::uint64_t head_macs = 0;
  std::uint64_t total_macs = 0;
};

/// out_h * out_w * kernel_h * kernel_w * filters * input_maps.
std::uint64_t conv_layer_macs(std::size_t out_h, std::size_t out_w, std::size_t kernel_h, std::size_t kernel_w,
                              std::size_t filters, std::size_t input_maps);

FlopsEstimate flops_estimate(const ConvTConfig& config);

}  // namespace convt
