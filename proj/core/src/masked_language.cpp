#include "lightclip/masked_language.hpp"

#include <random>

#include "lightclip/errors.hpp"
#include "lightclip/instrumentation.hpp"
#include "lightclip/ops.hpp"

namespace lightclip {

void MaskingOptions::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(probability) || !in_unit(mask_fraction) || !in_unit(random_fraction) ||
      mask_fraction + random_fraction > 1.0) {
    throw ConfigError("masking probabilities must lie in [0,1] with mask + random <= 1");
  }
  if (vocab_size <= static_cast<std::size_t>(vocab::kFirstRegular)) {
    throw ConfigError("masking needs at least one non-special vocabulary id");
  }
}

std::vector<std::size_t> MaskedTextBatch::chosen_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (chosen(i)) out.push_back(i);
  }
  return out;
}

std::size_t MaskedTextBatch::chosen_count() const {
  std::size_t count = 0;
  for (auto k : kinds) count += k != MaskKind::kNone;
  return count;
}

MaskedTextBatch apply_masking(const TokenBatch& tokens, const MaskingOptions& options,
                              std::uint64_t seed) {
  options.validate();
  MaskedTextBatch out;
  out.masked = tokens;
  out.original_ids = tokens.ids;
  out.kinds.assign(tokens.ids.size(), MaskKind::kNone);
  out.no_eligible.assign(tokens.n, 0);

  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> regular(
      vocab::kFirstRegular, static_cast<std::int32_t>(options.vocab_size) - 1);
  for (std::size_t i = 0; i < tokens.n; ++i) {
    bool any_eligible = false;
    for (std::size_t t = 0; t < tokens.length; ++t) {
      const std::size_t flat = i * tokens.length + t;
      if (tokens.pad[flat] || vocab::is_special(tokens.ids[flat])) continue;
      any_eligible = true;
      if (unit(rng) >= options.probability) continue;
      const double u = unit(rng);
      if (u < options.mask_fraction) {
        out.kinds[flat] = MaskKind::kMasked;
        out.masked.ids[flat] = vocab::kMask;
      } else if (u < options.mask_fraction + options.random_fraction) {
        out.kinds[flat] = MaskKind::kRandom;
        out.masked.ids[flat] = regular(rng);
      } else {
        out.kinds[flat] = MaskKind::kKept;
      }
    }
    if (!any_eligible) {
      out.no_eligible[i] = 1;
      instrumentation::count_skipped_mlm_sample();
    }
  }
  return out;
}

VocabHead VocabHead::create(ParameterStore& store, const std::string& prefix, std::size_t in,
                            std::size_t vocab_size, Rng& rng) {
  VocabHead head;
  head.w = store.add_normal(prefix + ".w", {in, vocab_size}, 0.02, rng);
  head.b = store.add_constant(prefix + ".b", {vocab_size}, 0.0);
  return head;
}

MlmTerm mlm_cross_entropy(const Tensor& embeddings, const MaskedTextBatch& batch,
                          const VocabHead& head) {
  if (embeddings.rank() != 3 || embeddings.dim(0) != batch.masked.n ||
      embeddings.dim(1) != batch.masked.length) {
    throw DimensionError("mlm: embeddings " + shape_str(embeddings.shape()) +
                         " do not match masked batch [" + std::to_string(batch.masked.n) + "," +
                         std::to_string(batch.masked.length) + "]");
  }
  MlmTerm term;
  auto positions = batch.chosen_positions();
  if (positions.empty()) return term;
  const std::size_t in = embeddings.dim(2);
  const std::size_t vocab_size = head.w.dim(1);
  Tensor rows = ops::index_select(ops::reshape(embeddings, {embeddings.dim(0) * embeddings.dim(1), in}),
                                  positions);
  Tensor log_probs = ops::log_softmax(ops::linear(rows, head.w, head.b), 1);
  std::vector<std::size_t> targets(positions.size());
  for (std::size_t k = 0; k < positions.size(); ++k) {
    auto id = batch.original_ids[positions[k]];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw InputError("mlm target id " + std::to_string(id) + " outside vocabulary");
    }
    targets[k] = k * vocab_size + static_cast<std::size_t>(id);
  }
  term.loss = ops::scale(ops::mean(ops::take(log_probs, targets)), -1.0);
  term.predictions = positions.size();
  return term;
}

MlmTerm mlm_text_loss(const Tensor& masked_stage4, const MaskedTextBatch& batch,
                      const VocabHead& head) {
  return mlm_cross_entropy(masked_stage4, batch, head);
}

void FusionConfig::validate() const {
  if (!(stages[0] >= 1 && stages[0] < stages[1] && stages[1] <= kNumStages)) {
    throw ConfigError("fusion.stages must satisfy 1 <= j1 < j2 <= 4");
  }
  if (heads == 0 || common_width == 0) throw ConfigError("fusion.heads and fusion.common_width must be positive");
}

FusionModule::FusionModule(const FusionConfig& config,
                           const std::array<std::size_t, kNumStages>& image_widths,
                           std::size_t text_width, std::size_t vocab_size, ParameterStore& store,
                           Rng& rng)
    : config_(config) {
  config_.validate();
  if (text_width % config_.heads != 0) {
    throw ConfigError("fusion.heads must divide the text width " + std::to_string(text_width));
  }
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t j = config_.stages[k];
    const std::string prefix = "fusion.stage" + std::to_string(j);
    auto& st = stages_[k];
    st.conv_w = store.add_normal(prefix + ".conv.w", {image_widths[j - 1], text_width}, 0.02, rng);
    st.conv_b = store.add_constant(prefix + ".conv.b", {text_width}, 0.0);
    st.attn = create_attention(store, prefix + ".attn", text_width, text_width, text_width, rng);
    st.out_w = store.add_normal(prefix + ".out.w", {text_width, config_.common_width}, 0.02, rng);
    st.out_b = store.add_constant(prefix + ".out.b", {config_.common_width}, 0.0);
  }
  head_ = VocabHead::create(store, "fusion.head", 2 * config_.common_width, vocab_size, rng);
}

Tensor fuse_stage(const Tensor& image_stage, const Tensor& text_stage, const FusionStage& params,
                  std::size_t heads) {
  instrumentation::count_fusion();
  if (image_stage.rank() != 3 || text_stage.rank() != 3 || image_stage.dim(0) != text_stage.dim(0)) {
    throw DimensionError("fuse_stage: image " + shape_str(image_stage.shape()) + " vs text " +
                         shape_str(text_stage.shape()));
  }
  if (params.conv_w.dim(0) != image_stage.dim(2) || params.conv_w.dim(1) != text_stage.dim(2)) {
    throw ConfigError("fuse_stage: projection " + shape_str(params.conv_w.shape()) +
                      " cannot map image width " + std::to_string(image_stage.dim(2)) +
                      " to text width " + std::to_string(text_stage.dim(2)));
  }
  Tensor projected = ops::linear(image_stage, params.conv_w, params.conv_b);
  return ops::add(text_stage, ops::attention(text_stage, projected, params.attn, {}, heads));
}

MlmTerm mlm_fused_loss(const std::array<Tensor, kNumStages>& image_stages,
                       const std::array<Tensor, kNumStages>& masked_text_stages,
                       const MaskedTextBatch& batch, const FusionModule& fusion) {
  if (batch.chosen_count() == 0) return {};
  std::array<Tensor, 2> parts;
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t j = fusion.config().stages[k] - 1;
    const auto& st = fusion.stage(k);
    Tensor fused = fuse_stage(image_stages[j], masked_text_stages[j], st, fusion.config().heads);
    parts[k] = ops::linear(fused, st.out_w, st.out_b);
  }
  return mlm_cross_entropy(ops::concat(parts, 2), batch, fusion.head());
}

Tensor mlm_loss(const Tensor& text_term, const Tensor& fused_term) {
  return ops::scale(ops::add(text_term, fused_term), 0.5);
}

double mlm_loss(double text_term, double fused_term) { return 0.5 * (text_term + fused_term); }

}  // namespace lightclip
