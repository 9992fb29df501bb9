#include "lightclip/token_alignment.hpp"

#include "lightclip/errors.hpp"
#include "lightclip/instrumentation.hpp"
#include "lightclip/ops.hpp"

namespace lightclip {

Tensor cosine_matrix(const Tensor& image_tokens, const Tensor& text_tokens) {
  if (image_tokens.rank() != 2 || text_tokens.rank() != 2 ||
      image_tokens.dim(1) != text_tokens.dim(1)) {
    throw DimensionError("cosine_matrix: " + shape_str(image_tokens.shape()) + " vs " +
                         shape_str(text_tokens.shape()));
  }
  return ops::matmul(ops::l2_normalize(image_tokens, 1),
                     ops::transpose(ops::l2_normalize(text_tokens, 1)));
}

Tensor matching_cost(const Tensor& cosine) { return ops::add_scalar(ops::scale(cosine, -1.0), 1.0); }

CostMatrix cost_matrix(const Tensor& cosine) {
  if (cosine.rank() != 2) throw DimensionError("cost_matrix expects rank 2, got " + shape_str(cosine.shape()));
  std::vector<double> values(cosine.numel());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = 1.0 - cosine.data()[i];
  return {cosine.dim(0), cosine.dim(1), std::move(values)};
}

std::vector<std::size_t> matchable_positions(const TokenBatch& tokens, std::size_t sample) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < tokens.length; ++t) {
    if (!tokens.is_pad(sample, t) && !vocab::is_special(tokens.id(sample, t))) out.push_back(t);
  }
  return out;
}

Tensor sample_cosine(const Tensor& image_flat, const Tensor& text_flat, const TokenBatch& tokens,
                     std::size_t sample, std::size_t l1, std::span<const std::size_t> positions) {
  const std::size_t l2 = tokens.length;
  std::vector<std::size_t> image_rows(l1), text_rows;
  for (std::size_t s = 0; s < l1; ++s) image_rows[s] = sample * l1 + s;
  for (auto t : positions) text_rows.push_back(sample * l2 + t);
  return cosine_matrix(ops::index_select(image_flat, image_rows),
                       ops::index_select(text_flat, text_rows));
}

TokenLossResult token_loss(const Tensor& image_stage4, const Tensor& text_stage4,
                           const TokenBatch& tokens, const std::vector<Assignment>* frozen) {
  instrumentation::count_token_loss();
  if (image_stage4.rank() != 3 || text_stage4.rank() != 3 ||
      image_stage4.dim(0) != text_stage4.dim(0) || image_stage4.dim(2) != text_stage4.dim(2)) {
    throw DimensionError("token_loss: image " + shape_str(image_stage4.shape()) + " vs text " +
                         shape_str(text_stage4.shape()));
  }
  const std::size_t n = image_stage4.dim(0), l1 = image_stage4.dim(1);
  const std::size_t l2 = text_stage4.dim(1), d = image_stage4.dim(2);
  if (tokens.n != n || tokens.length != l2) {
    throw DimensionError("token_loss: token batch [" + std::to_string(tokens.n) + "," +
                         std::to_string(tokens.length) + "] does not match text " +
                         shape_str(text_stage4.shape()));
  }
  if (frozen && frozen->size() != n) throw DimensionError("token_loss: one frozen assignment per sample");

  Tensor image_flat = ops::reshape(image_stage4, {n * l1, d});
  Tensor text_flat = ops::reshape(text_stage4, {n * l2, d});
  TokenLossResult result;
  std::vector<Tensor> per_sample;
  for (std::size_t i = 0; i < n; ++i) {
    auto positions = matchable_positions(tokens, i);
    if (positions.empty()) {
      ++result.skipped;
      instrumentation::count_skipped_token_sample();
      continue;
    }
    Tensor cost = matching_cost(sample_cosine(image_flat, text_flat, tokens, i, l1, positions));
    TokenMatch match;
    match.sample = i;
    match.positions = positions;
    if (frozen) {
      match.assignment = (*frozen)[i];
    } else {
      CostMatrix snapshot(l1, positions.size(),
                          std::vector<double>(cost.data().begin(), cost.data().end()));
      match.assignment = hungarian(snapshot);
    }
    std::vector<std::size_t> flat;
    for (const auto& [r, c] : match.assignment.pairs) {
      if (r >= l1 || c >= positions.size()) throw DimensionError("token_loss: assignment outside cost matrix");
      flat.push_back(r * positions.size() + c);
    }
    per_sample.push_back(ops::mean(ops::take(cost, flat)));
    result.matches.push_back(std::move(match));
  }
  if (!per_sample.empty()) result.loss = ops::mean(ops::concat(per_sample, 0));
  return result;
}

}  // namespace lightclip
