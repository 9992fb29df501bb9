#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lightclip/encoders.hpp"
#include "lightclip/params.hpp"

namespace lightclip {

enum class MaskKind : std::uint8_t { kNone = 0, kMasked, kRandom, kKept };

struct MaskingOptions {
  double probability = 0.15;     // chance an eligible token is chosen
  double mask_fraction = 0.8;    // chosen -> [MASK]
  double random_fraction = 0.1;  // chosen -> uniform non-special id; the rest stay unchanged
  std::size_t vocab_size = 128;

  void validate() const;
};

/// Corrupted copy of a token batch plus what is needed to score predictions.
struct MaskedTextBatch {
  TokenBatch masked;                     // ids fed to the text encoder
  std::vector<std::int32_t> original_ids;
  std::vector<MaskKind> kinds;           // per position; kNone where not chosen
  std::vector<std::uint8_t> no_eligible; // per sample; 1 when nothing could be chosen

  bool chosen(std::size_t flat) const { return kinds[flat] != MaskKind::kNone; }
  /// Flat positions (sample * length + t) of chosen tokens, ascending.
  std::vector<std::size_t> chosen_positions() const;
  std::size_t chosen_count() const;
};

/// Chooses eligible (non-pad, non-special) tokens independently and corrupts
/// them. Deterministic for a given seed.
MaskedTextBatch apply_masking(const TokenBatch& tokens, const MaskingOptions& options,
                              std::uint64_t seed);

/// Fully connected layer from token embeddings to vocabulary logits.
struct VocabHead {
  Tensor w;  // [in, V]
  Tensor b;  // [V]

  static VocabHead create(ParameterStore& store, const std::string& prefix, std::size_t in,
                          std::size_t vocab_size, Rng& rng);
};

/// A masked-LM loss term. `loss` is undefined when the batch had no chosen
/// token, which callers must treat as "no contribution" rather than zero.
struct MlmTerm {
  Tensor loss;
  std::size_t predictions = 0;

  bool active() const { return loss.defined(); }
};

/// Mean cross-entropy of head(embeddings) against the original ids at chosen
/// positions. `embeddings` is [n, l, in].
MlmTerm mlm_cross_entropy(const Tensor& embeddings, const MaskedTextBatch& batch,
                          const VocabHead& head);

/// Text-only term on stage-4 embeddings of the masked text.
MlmTerm mlm_text_loss(const Tensor& masked_stage4, const MaskedTextBatch& batch,
                      const VocabHead& head);

struct FusionConfig {
  std::array<std::size_t, 2> stages{2, 3};  // 1-based stage indices, j1 < j2
  std::size_t heads = 4;
  std::size_t common_width = 64;

  void validate() const;
};

/// Weights of one fused stage: image projection, cross-attention, and the
/// projection to the common concatenation width.
struct FusionStage {
  Tensor conv_w, conv_b;  // per-token linear map, image width -> text width
  ops::AttentionWeights attn;
  Tensor out_w, out_b;    // text width -> common width
};

/// Train-time image-to-text fusion feeding a dedicated vocabulary head.
class FusionModule {
 public:
  FusionModule(const FusionConfig& config, const std::array<std::size_t, kNumStages>& image_widths,
               std::size_t text_width, std::size_t vocab_size, ParameterStore& store, Rng& rng);

  const FusionConfig& config() const { return config_; }
  const FusionStage& stage(std::size_t k) const { return stages_[k]; }
  FusionStage& stage(std::size_t k) { return stages_[k]; }
  const VocabHead& head() const { return head_; }

 private:
  FusionConfig config_;
  std::array<FusionStage, 2> stages_;
  VocabHead head_;
};

/// txt + CrossAtt(query = txt, keys/values = conv(img)). Shape of `txt`.
Tensor fuse_stage(const Tensor& image_stage, const Tensor& text_stage, const FusionStage& params,
                  std::size_t heads);

/// Fuses both configured stages, projects each to the common width,
/// concatenates per token, and scores with the fused head.
MlmTerm mlm_fused_loss(const std::array<Tensor, kNumStages>& image_stages,
                       const std::array<Tensor, kNumStages>& masked_text_stages,
                       const MaskedTextBatch& batch, const FusionModule& fusion);

/// Average of the two terms.
Tensor mlm_loss(const Tensor& text_term, const Tensor& fused_term);
double mlm_loss(double text_term, double fused_term);

}  // namespace lightclip
