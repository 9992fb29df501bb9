#include "lightclip/encoders.hpp"

#include <algorithm>

#include "lightclip/errors.hpp"

namespace lightclip {

namespace {

constexpr double kInitStd = 0.02;

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

// Rows 0..len-1 of `table`, tiled n times, shaped [n, len, width].
Tensor tiled_positions(const Tensor& table, std::size_t n, std::size_t len) {
  std::vector<std::size_t> rows(n * len);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < len; ++t) rows[i * len + t] = t;
  }
  return ops::reshape(ops::index_select(table, rows), {n, len, table.dim(1)});
}

}  // namespace

void EncoderConfig::validate() const {
  require(width > 0 && heads > 0, "encoder.width and encoder.heads must be positive");
  require(width % heads == 0, "encoder.width (" + std::to_string(width) +
                                  ") must be divisible by encoder.heads (" +
                                  std::to_string(heads) + ")");
  require(mlp_ratio >= 1, "encoder.mlp_ratio must be >= 1");
  require(vocab_size >= 8, "encoder.vocab_size must be >= 8 (four reserved ids)");
  require(text_layers >= kNumStages && text_layers % kNumStages == 0,
          "encoder.text_layers must be a positive multiple of 4");
  require(max_text_len >= 2, "encoder.max_text_len must be >= 2 (BOS and EOS)");
  require(patch_dim > 0 && num_patches > 0, "encoder.patch_dim and encoder.num_patches must be positive");
  for (auto w : image_widths) {
    require(w > 0 && w % heads == 0,
            "encoder.image_widths entries must be positive multiples of encoder.heads");
  }
  require(image_widths.back() == width, "encoder.image_widths[3] must equal encoder.width");
}

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<std::int32_t>>& seqs,
                                      std::size_t length) {
  TokenBatch batch;
  batch.n = seqs.size();
  std::size_t longest = 0;
  for (const auto& s : seqs) longest = std::max(longest, s.size());
  if (length == 0) length = longest;
  if (longest > length) {
    throw InputError("sequence of length " + std::to_string(longest) +
                     " exceeds batch length " + std::to_string(length));
  }
  batch.length = length;
  batch.ids.assign(batch.n * length, vocab::kPad);
  batch.pad.assign(batch.n * length, 1);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (std::size_t t = 0; t < seqs[i].size(); ++t) {
      batch.ids[i * length + t] = seqs[i][t];
      batch.pad[i * length + t] = 0;
    }
  }
  return batch;
}

std::size_t TokenBatch::true_length(std::size_t sample) const {
  std::size_t len = 0;
  while (len < length && !is_pad(sample, len)) ++len;
  return len;
}

void TokenBatch::validate(std::size_t vocab_size) const {
  if (n == 0 || length == 0) throw InputError("token batch is empty");
  if (ids.size() != n * length || pad.size() != n * length) {
    throw InputError("token batch buffers do not match [" + std::to_string(n) + "," +
                     std::to_string(length) + "]");
  }
  for (std::size_t i = 0; i < n; ++i) {
    bool seen_pad = false;
    for (std::size_t t = 0; t < length; ++t) {
      auto id = this->id(i, t);
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw InputError("token id " + std::to_string(id) + " at sample " + std::to_string(i) +
                         " position " + std::to_string(t) + " is outside vocabulary of size " +
                         std::to_string(vocab_size));
      }
      if (is_pad(i, t)) {
        seen_pad = true;
        if (id != vocab::kPad) throw InputError("pad position carries non-PAD id");
      } else if (seen_pad) {
        throw InputError("non-pad token after padding in sample " + std::to_string(i));
      }
    }
    if (is_pad(i, 0)) throw InputError("sample " + std::to_string(i) + " has no tokens");
  }
}

ops::AttentionWeights create_attention(ParameterStore& store, const std::string& prefix,
                                       std::size_t query_width, std::size_t kv_width,
                                       std::size_t model_width, Rng& rng) {
  ops::AttentionWeights w;
  w.wq = store.add_normal(prefix + ".wq", {query_width, model_width}, kInitStd, rng);
  w.bq = store.add_constant(prefix + ".bq", {model_width}, 0.0);
  w.wk = store.add_normal(prefix + ".wk", {kv_width, model_width}, kInitStd, rng);
  w.bk = store.add_constant(prefix + ".bk", {model_width}, 0.0);
  w.wv = store.add_normal(prefix + ".wv", {kv_width, model_width}, kInitStd, rng);
  w.bv = store.add_constant(prefix + ".bv", {model_width}, 0.0);
  w.wo = store.add_normal(prefix + ".wo", {model_width, query_width}, kInitStd, rng);
  w.bo = store.add_constant(prefix + ".bo", {query_width}, 0.0);
  return w;
}

TransformerBlock TransformerBlock::create(ParameterStore& store, const std::string& prefix,
                                          std::size_t width, std::size_t heads,
                                          std::size_t mlp_ratio, Rng& rng) {
  TransformerBlock b;
  b.heads = heads;
  b.ln1_gain = store.add_constant(prefix + ".ln1.gain", {width}, 1.0);
  b.ln1_bias = store.add_constant(prefix + ".ln1.bias", {width}, 0.0);
  b.attn = create_attention(store, prefix + ".attn", width, width, width, rng);
  b.ln2_gain = store.add_constant(prefix + ".ln2.gain", {width}, 1.0);
  b.ln2_bias = store.add_constant(prefix + ".ln2.bias", {width}, 0.0);
  b.fc1_w = store.add_normal(prefix + ".mlp.fc1.w", {width, width * mlp_ratio}, kInitStd, rng);
  b.fc1_b = store.add_constant(prefix + ".mlp.fc1.b", {width * mlp_ratio}, 0.0);
  b.fc2_w = store.add_normal(prefix + ".mlp.fc2.w", {width * mlp_ratio, width}, kInitStd, rng);
  b.fc2_b = store.add_constant(prefix + ".mlp.fc2.b", {width}, 0.0);
  return b;
}

Tensor TransformerBlock::forward(const Tensor& x, std::span<const std::uint8_t> key_valid) const {
  Tensor normed = ops::layer_norm(x, ln1_gain, ln1_bias);
  Tensor h = ops::add(x, ops::attention(normed, normed, attn, key_valid, heads));
  Tensor hidden = ops::gelu(ops::linear(ops::layer_norm(h, ln2_gain, ln2_bias), fc1_w, fc1_b));
  return ops::add(h, ops::linear(hidden, fc2_w, fc2_b));
}

ImageEncoder::ImageEncoder(const EncoderConfig& config, ParameterStore& store, Rng& rng)
    : config_(config) {
  config_.validate();
  const auto& w = config_.image_widths;
  patch_w_ = store.add_normal("image.patch.w", {config_.patch_dim, w[0]}, kInitStd, rng);
  patch_b_ = store.add_constant("image.patch.b", {w[0]}, 0.0);
  pos_ = store.add_normal("image.pos", {config_.num_patches, w[0]}, kInitStd, rng);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string prefix = "image.stage" + std::to_string(s + 1);
    if (s > 0 && w[s] != w[s - 1]) {
      merge_w_[s] = store.add_normal(prefix + ".merge.w", {w[s - 1], w[s]}, kInitStd, rng);
    }
    blocks_[s] = TransformerBlock::create(store, prefix + ".block", w[s], config_.heads,
                                          config_.mlp_ratio, rng);
  }
  ln_post_gain_ = store.add_constant("image.ln_post.gain", {config_.width}, 1.0);
  ln_post_bias_ = store.add_constant("image.ln_post.bias", {config_.width}, 0.0);
  proj_ = store.add_normal("image.proj", {config_.width, config_.width}, kInitStd, rng);
}

StageEmbeddings ImageEncoder::encode(const ImageBatch& batch, const StageObserver& observer) const {
  const auto& p = batch.patches;
  if (!p.defined() || p.rank() != 3 || p.dim(2) != config_.patch_dim) {
    throw ConfigError("image batch shape " + (p.defined() ? shape_str(p.shape()) : "<undefined>") +
                      " does not match patch_dim " + std::to_string(config_.patch_dim));
  }
  if (p.dim(1) > config_.num_patches) {
    throw ConfigError("image batch has " + std::to_string(p.dim(1)) +
                      " patches; encoder configured for at most " +
                      std::to_string(config_.num_patches));
  }
  const std::size_t n = p.dim(0), l1 = p.dim(1);
  Tensor x = ops::add(ops::linear(p, patch_w_, patch_b_), tiled_positions(pos_, n, l1));
  StageEmbeddings out;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (merge_w_[s].defined()) x = ops::linear(x, merge_w_[s]);
    if (observer) observer(s, x);
    x = blocks_[s].forward(x, {});
    out.stages[s] = x;
  }
  Tensor pooled = ops::mean(out.stages[kNumStages - 1], 1);
  Tensor projected = ops::linear(ops::layer_norm(pooled, ln_post_gain_, ln_post_bias_), proj_);
  out.global = ops::l2_normalize(projected, 1);
  return out;
}

TextEncoder::TextEncoder(const EncoderConfig& config, ParameterStore& store, Rng& rng)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.width;
  token_embedding_ = store.add_normal("text.token_embedding", {config_.vocab_size, d}, kInitStd, rng);
  pos_ = store.add_normal("text.pos", {config_.max_text_len, d}, kInitStd, rng);
  for (std::size_t i = 0; i < config_.text_layers; ++i) {
    layers_.push_back(TransformerBlock::create(store, "text.layer" + std::to_string(i + 1), d,
                                               config_.heads, config_.mlp_ratio, rng));
  }
  ln_final_gain_ = store.add_constant("text.ln_final.gain", {d}, 1.0);
  ln_final_bias_ = store.add_constant("text.ln_final.bias", {d}, 0.0);
  proj_ = store.add_normal("text.proj", {d, d}, kInitStd, rng);
}

StageEmbeddings TextEncoder::encode(const TokenBatch& batch, const StageObserver& observer) const {
  batch.validate(config_.vocab_size);
  if (batch.length > config_.max_text_len) {
    throw InputError("token batch length " + std::to_string(batch.length) +
                     " exceeds max_text_len " + std::to_string(config_.max_text_len));
  }
  const std::size_t n = batch.n, len = batch.length, d = config_.width;
  std::vector<std::size_t> ids(batch.ids.begin(), batch.ids.end());
  std::vector<std::size_t> eos_rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t tl = batch.true_length(i);
    if (batch.id(i, tl - 1) != vocab::kEos) {
      throw InputError("sample " + std::to_string(i) + " does not end with EOS");
    }
    eos_rows[i] = i * len + tl - 1;
  }
  std::vector<std::uint8_t> key_valid(batch.pad.size());
  for (std::size_t i = 0; i < key_valid.size(); ++i) key_valid[i] = batch.pad[i] ? 0 : 1;

  Tensor x = ops::add(ops::reshape(ops::index_select(token_embedding_, ids), {n, len, d}),
                      tiled_positions(pos_, n, len));
  const std::size_t per_stage = config_.text_layers / kNumStages;
  StageEmbeddings out;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (observer) observer(s, x);
    for (std::size_t l = 0; l < per_stage; ++l) x = layers_[s * per_stage + l].forward(x, key_valid);
    out.stages[s] = x;
  }
  Tensor eos = ops::index_select(ops::reshape(out.stages[kNumStages - 1], {n * len, d}), eos_rows);
  Tensor projected = ops::linear(ops::layer_norm(eos, ln_final_gain_, ln_final_bias_), proj_);
  out.global = ops::l2_normalize(projected, 1);
  return out;
}

}  // namespace lightclip
