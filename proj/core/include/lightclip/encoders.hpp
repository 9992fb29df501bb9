#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lightclip/ops.hpp"
#include "lightclip/params.hpp"
#include "lightclip/tensor.hpp"

namespace lightclip {

namespace vocab {
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kMask = 1;
inline constexpr std::int32_t kBos = 2;
inline constexpr std::int32_t kEos = 3;
/// First id available to ordinary (non-special) tokens.
inline constexpr std::int32_t kFirstRegular = 4;

inline constexpr bool is_special(std::int32_t id) { return id < kFirstRegular; }
}  // namespace vocab

inline constexpr std::size_t kNumStages = 4;

struct EncoderConfig {
  std::size_t width = 64;  // shared embedding width d
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;

  std::size_t vocab_size = 128;
  std::size_t text_layers = 8;  // split evenly over the four stages
  std::size_t max_text_len = 16;

  std::size_t patch_dim = 32;
  std::size_t num_patches = 9;
  std::array<std::size_t, kNumStages> image_widths{64, 64, 64, 64};

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
};

/// Raw image patches, [n, l1, patch_dim]. Every patch is a real token.
struct ImageBatch {
  Tensor patches;

  std::size_t size() const { return patches.dim(0); }
  std::size_t tokens() const { return patches.dim(1); }
};

/// Token ids, row-major [n, length], with a contiguous non-pad prefix.
struct TokenBatch {
  std::size_t n = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> pad;  // 1 where the position is padding

  /// Pads each sequence with PAD up to `length` (0 = longest sequence).
  static TokenBatch from_sequences(const std::vector<std::vector<std::int32_t>>& seqs,
                                   std::size_t length = 0);

  std::int32_t id(std::size_t sample, std::size_t pos) const { return ids[sample * length + pos]; }
  bool is_pad(std::size_t sample, std::size_t pos) const { return pad[sample * length + pos] != 0; }
  std::size_t true_length(std::size_t sample) const;
  /// Checks the pad/prefix invariants and that ids lie in [0, vocab_size).
  void validate(std::size_t vocab_size) const;
};

/// Token embeddings after each of the four stages plus the unit-norm
/// global embedding.
struct StageEmbeddings {
  std::array<Tensor, kNumStages> stages;  // [n, l, width_s]
  Tensor global;                          // [n, d]
};

/// Observer invoked with the input tensor of each stage (0-based index).
using StageObserver = std::function<void(std::size_t stage, const Tensor& input)>;

/// Pre-norm transformer block: x + Attn(LN(x)), then h + MLP(LN(h)).
struct TransformerBlock {
  Tensor ln1_gain, ln1_bias;
  ops::AttentionWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
  std::size_t heads = 1;

  static TransformerBlock create(ParameterStore& store, const std::string& prefix,
                                 std::size_t width, std::size_t heads, std::size_t mlp_ratio,
                                 Rng& rng);
  Tensor forward(const Tensor& x, std::span<const std::uint8_t> key_valid) const;
};

/// Registers attention projection weights under `prefix`.
ops::AttentionWeights create_attention(ParameterStore& store, const std::string& prefix,
                                       std::size_t query_width, std::size_t kv_width,
                                       std::size_t model_width, Rng& rng);

class ImageEncoder {
 public:
  ImageEncoder(const EncoderConfig& config, ParameterStore& store, Rng& rng);

  /// Patch projection, four single-block stages, mean-pool read-out.
  StageEmbeddings encode(const ImageBatch& batch, const StageObserver& observer = {}) const;

  /// Stage widths for use by fusion projections.
  const std::array<std::size_t, kNumStages>& widths() const { return config_.image_widths; }

 private:
  EncoderConfig config_;
  Tensor patch_w_, patch_b_, pos_;
  std::array<Tensor, kNumStages> merge_w_;  // undefined when width is unchanged
  std::array<TransformerBlock, kNumStages> blocks_;
  Tensor ln_post_gain_, ln_post_bias_, proj_;
};

class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& config, ParameterStore& store, Rng& rng);

  /// Token plus position embedding, layers grouped per stage, EOS read-out.
  StageEmbeddings encode(const TokenBatch& batch, const StageObserver& observer = {}) const;

 private:
  EncoderConfig config_;
  Tensor token_embedding_, pos_;
  std::vector<TransformerBlock> layers_;
  Tensor ln_final_gain_, ln_final_bias_, proj_;
};

}  // namespace lightclip
