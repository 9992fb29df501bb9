#pragma once

#include <span>
#include <vector>

#include "lightclip/encoders.hpp"
#include "lightclip/hungarian.hpp"
#include "lightclip/tensor.hpp"

namespace lightclip {

/// Pairwise cosine similarity of token rows: [l1, d] x [l2, d] -> [l1, l2].
/// Throws DomainError on a zero-norm row.
Tensor cosine_matrix(const Tensor& image_tokens, const Tensor& text_tokens);

/// Differentiable cost 1 - c.
Tensor matching_cost(const Tensor& cosine);

/// Snapshot of 1 - c for the discrete solver.
CostMatrix cost_matrix(const Tensor& cosine);

/// Text positions that take part in matching: non-pad, non-special tokens.
std::vector<std::size_t> matchable_positions(const TokenBatch& tokens, std::size_t sample);

/// Cosine matrix of one sample's image tokens against its matchable text
/// tokens, given batch-flattened stage-4 embeddings.
Tensor sample_cosine(const Tensor& image_flat, const Tensor& text_flat, const TokenBatch& tokens,
                     std::size_t sample, std::size_t l1, std::span<const std::size_t> positions);

struct TokenMatch {
  std::size_t sample = 0;
  Assignment assignment;                   // columns index `positions`
  std::vector<std::size_t> positions;      // text position of each cost column
};

struct TokenLossResult {
  Tensor loss;  // [1]; undefined when every sample was skipped
  std::vector<TokenMatch> matches;
  std::size_t skipped = 0;

  bool active() const { return loss.defined(); }
};

/// Relaxed token-level alignment on stage-4 embeddings of paired samples.
///
/// Per sample the minimum-cost assignment is solved on detached costs and
/// held fixed; the loss is the mean matched cost over matched pairs,
/// averaged over the non-skipped samples. A sample with no matchable text
/// token is skipped and counted. `frozen`, when given, supplies one
/// assignment per sample in place of the solver.
TokenLossResult token_loss(const Tensor& image_stage4, const Tensor& text_stage4,
                           const TokenBatch& tokens,
                           const std::vector<Assignment>* frozen = nullptr);

}  // namespace lightclip
