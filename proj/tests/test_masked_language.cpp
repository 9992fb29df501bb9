#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "lightclip/errors.hpp"
#include "lightclip/grad_check.hpp"
#include "lightclip/instrumentation.hpp"
#include "lightclip/masked_language.hpp"
#include "lightclip/ops.hpp"
#include "test_util.hpp"

using namespace lightclip;
using lightclip::testing::random_tensor;

namespace {

// n sequences of BOS, `names` regular tokens, EOS, padded by two.
TokenBatch regular_batch(std::size_t n, std::size_t names, std::size_t vocab = 128) {
  std::vector<std::vector<std::int32_t>> seqs(n);
  for (std::size_t i = 0; i < n; ++i) {
    seqs[i].push_back(vocab::kBos);
    for (std::size_t k = 0; k < names; ++k) {
      seqs[i].push_back(static_cast<std::int32_t>(vocab::kFirstRegular + (i * 7 + k) % (vocab - 4)));
    }
    seqs[i].push_back(vocab::kEos);
  }
  return TokenBatch::from_sequences(seqs, names + 4);
}

void zero(Tensor& t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

struct SmallFusion {
  ParameterStore store;
  Rng rng{11};
  FusionModule fusion;

  explicit SmallFusion(std::size_t vocab = 16)
      : fusion(FusionConfig{{2, 3}, 2, 8}, {8, 8, 8, 8}, 8, vocab, store, rng) {}
};

}  // namespace

TEST(Masking, ChosenFractionAndKindSplit) {
  // 10^5 eligible tokens: 12,500 sequences of 8 names.
  auto tokens = regular_batch(12500, 8);
  MaskingOptions opt;
  auto m = apply_masking(tokens, opt, 42);
  std::size_t eligible = 0, chosen = 0;
  std::array<double, 3> kinds{};
  for (std::size_t f = 0; f < tokens.ids.size(); ++f) {
    const bool ok = !tokens.pad[f] && !vocab::is_special(tokens.ids[f]);
    eligible += ok;
    if (!m.chosen(f)) continue;
    ++chosen;
    kinds[static_cast<std::size_t>(m.kinds[f]) - 1] += 1.0;
  }
  ASSERT_EQ(eligible, 100000u);
  const double sd = std::sqrt(eligible * 0.15 * 0.85);
  EXPECT_NEAR(static_cast<double>(chosen), 15000.0, 3.0 * sd);

  // Chi-squared over {masked, random, kept} with two degrees of freedom;
  // 13.816 is the 0.001 critical value.
  const std::array<double, 3> p{0.8, 0.1, 0.1};
  double chi2 = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double e = p[k] * chosen;
    chi2 += (kinds[k] - e) * (kinds[k] - e) / e;
    EXPECT_NEAR(kinds[k], e, 3.0 * std::sqrt(chosen * p[k] * (1 - p[k])));
  }
  EXPECT_LT(chi2, 13.816);
  EXPECT_EQ(m.chosen_count(), chosen);
}

TEST(Masking, CorruptionMatchesKind) {
  auto tokens = regular_batch(2000, 6);
  auto m = apply_masking(tokens, {}, 7);
  for (std::size_t f = 0; f < tokens.ids.size(); ++f) {
    const auto id = m.masked.ids[f];
    EXPECT_EQ(m.original_ids[f], tokens.ids[f]);
    switch (m.kinds[f]) {
      case MaskKind::kNone:
      case MaskKind::kKept: EXPECT_EQ(id, tokens.ids[f]); break;
      case MaskKind::kMasked: EXPECT_EQ(id, vocab::kMask); break;
      case MaskKind::kRandom:
        EXPECT_GE(id, vocab::kFirstRegular);
        EXPECT_LT(id, 128);
        break;
    }
  }
}

TEST(Masking, NeverTouchesSpecialOrPadOverAMillionPositions) {
  auto tokens = regular_batch(100000, 6);  // 10 positions each, 4 of them special or pad
  auto m = apply_masking(tokens, {}, 3);
  ASSERT_EQ(tokens.ids.size(), 1000000u);
  std::size_t violations = 0;
  for (std::size_t f = 0; f < tokens.ids.size(); ++f) {
    if (tokens.pad[f] || vocab::is_special(tokens.ids[f])) {
      violations += m.chosen(f) || m.masked.ids[f] != tokens.ids[f];
    }
  }
  EXPECT_EQ(violations, 0u);
}

TEST(Masking, Deterministic) {
  auto tokens = regular_batch(64, 4);
  auto a = apply_masking(tokens, {}, 5), b = apply_masking(tokens, {}, 5), c = apply_masking(tokens, {}, 6);
  EXPECT_EQ(a.masked.ids, b.masked.ids);
  EXPECT_EQ(a.kinds, b.kinds);
  EXPECT_NE(a.kinds, c.kinds);
}

TEST(Masking, ZeroProbabilityIsIdentity) {
  auto tokens = regular_batch(32, 4);
  MaskingOptions opt;
  opt.probability = 0.0;
  auto m = apply_masking(tokens, opt, 1);
  EXPECT_EQ(m.masked.ids, tokens.ids);
  EXPECT_EQ(m.chosen_count(), 0u);
  ParameterStore store;
  Rng rng(1);
  auto head = VocabHead::create(store, "h", 8, 128, rng);
  std::mt19937_64 r(1);
  EXPECT_FALSE(mlm_cross_entropy(random_tensor({32, 8, 8}, r, 1.0, false), m, head).active());
}

TEST(Masking, SamplesWithNothingEligibleAreFlagged) {
  instrumentation::reset();
  auto tokens = TokenBatch::from_sequences({{2, 3}, {2, 9, 3}});
  auto m = apply_masking(tokens, {}, 1);
  EXPECT_EQ(m.no_eligible, (std::vector<std::uint8_t>{1, 0}));
  EXPECT_EQ(instrumentation::snapshot().skipped_mlm_samples, 1u);
}

TEST(Masking, OptionValidation) {
  MaskingOptions opt;
  opt.mask_fraction = 0.95;
  EXPECT_THROW(opt.validate(), ConfigError);
  opt = {};
  opt.probability = 1.5;
  EXPECT_THROW(opt.validate(), ConfigError);
}

TEST(TextMlm, UniformHeadGivesLogV) {
  auto tokens = regular_batch(16, 6, 512);
  MaskingOptions opt;
  opt.vocab_size = 512;
  auto m = apply_masking(tokens, opt, 9);
  ParameterStore store;
  Rng rng(2);
  auto head = VocabHead::create(store, "h", 8, 512, rng);
  zero(head.w);
  std::mt19937_64 r(2);
  auto term = mlm_text_loss(random_tensor({16, 10, 8}, r, 1.0, false), m, head);
  ASSERT_TRUE(term.active());
  EXPECT_NEAR(term.loss.item(), std::log(512.0), 1e-12);
  EXPECT_NEAR(term.loss.item(), 6.2383, 1e-4);
  EXPECT_EQ(term.predictions, m.chosen_count());
}

TEST(TextMlm, ConfidentCorrectHeadVanishes) {
  // Every sequence repeats one id; the head's bias puts margin 50 on it.
  // Closed form (V - 1) e^-50 is about 1.3e-21 at V = 8.
  TokenBatch tokens = TokenBatch::from_sequences(std::vector<std::vector<std::int32_t>>(8, {2, 5, 5, 5, 5, 3}));
  MaskingOptions opt;
  opt.probability = 0.5;
  opt.vocab_size = 8;
  auto m = apply_masking(tokens, opt, 1);
  ParameterStore store;
  Rng rng(3);
  auto head = VocabHead::create(store, "h", 4, 8, rng);
  zero(head.w);
  head.b.mutable_data()[5] = 50.0;
  std::mt19937_64 r(3);
  auto term = mlm_text_loss(random_tensor({8, 6, 4}, r, 1.0, false), m, head);
  ASSERT_TRUE(term.active());
  EXPECT_LT(term.loss.item(), 1e-20);
}

TEST(TextMlm, GradientCheck) {
  auto tokens = regular_batch(3, 5, 16);
  MaskingOptions opt;
  opt.probability = 0.5;
  opt.vocab_size = 16;
  auto m = apply_masking(tokens, opt, 4);
  ParameterStore store;
  Rng rng(4);
  auto head = VocabHead::create(store, "h", 6, 16, rng);
  std::mt19937_64 r(4);
  Tensor emb = random_tensor({3, 9, 6}, r);
  auto report = grad_check([&] { return mlm_text_loss(emb, m, head).loss; }, {emb, head.w, head.b});
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Fusion, ZeroOutputProjectionIsResidualIdentity) {
  SmallFusion f;
  zero(f.fusion.stage(0).attn.wo);
  zero(f.fusion.stage(0).attn.bo);
  std::mt19937_64 r(5);
  Tensor img = random_tensor({2, 9, 8}, r, 1.0, false), txt = random_tensor({2, 16, 8}, r, 1.0, false);
  Tensor fused = fuse_stage(img, txt, f.fusion.stage(0), 2);
  ASSERT_EQ(fused.shape(), txt.shape());
  for (std::size_t i = 0; i < txt.numel(); ++i) EXPECT_EQ(fused.data()[i], txt.data()[i]);
}

TEST(Fusion, StageShapeAtDefaultWidth) {
  ParameterStore store;
  Rng rng(6);
  FusionModule fusion(FusionConfig{}, {64, 64, 64, 64}, 64, 128, store, rng);
  std::mt19937_64 r(6);
  Tensor fused = fuse_stage(random_tensor({3, 9, 64}, r, 1.0, false), random_tensor({3, 16, 64}, r, 1.0, false),
                            fusion.stage(0), 4);
  EXPECT_EQ(fused.shape(), (Shape{3, 16, 64}));
  EXPECT_EQ(fusion.head().w.dim(0), 128u);  // two stages of common width 64
}

TEST(Fusion, WidthMismatchIsConfigError) {
  SmallFusion f;
  std::mt19937_64 r(7);
  EXPECT_THROW(fuse_stage(random_tensor({1, 9, 8}, r, 1.0, false), random_tensor({1, 4, 6}, r, 1.0, false),
                          f.fusion.stage(0), 2),
               ConfigError);
  FusionConfig bad;
  bad.stages = {3, 2};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Fusion, ZeroImageAndAblatedAttentionEqualsTextOnlyThroughFusedHead) {
  SmallFusion f;
  for (std::size_t k = 0; k < 2; ++k) {
    zero(f.fusion.stage(k).attn.wo);
    zero(f.fusion.stage(k).attn.bo);
  }
  auto tokens = regular_batch(2, 5, 16);
  MaskingOptions opt;
  opt.probability = 0.5;
  opt.vocab_size = 16;
  auto m = apply_masking(tokens, opt, 8);
  std::mt19937_64 r(8);
  std::array<Tensor, kNumStages> img, txt;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    img[s] = Tensor::zeros({2, 9, 8});
    txt[s] = random_tensor({2, 9, 8}, r, 1.0, false);
  }
  auto fused = mlm_fused_loss(img, txt, m, f.fusion);
  const auto& s1 = f.fusion.stage(0);
  const auto& s2 = f.fusion.stage(1);
  std::vector<Tensor> parts{ops::linear(txt[1], s1.out_w, s1.out_b), ops::linear(txt[2], s2.out_w, s2.out_b)};
  auto text_only = mlm_cross_entropy(ops::concat(parts, 2), m, f.fusion.head());
  ASSERT_TRUE(fused.active());
  EXPECT_EQ(fused.loss.item(), text_only.loss.item());
}

TEST(Fusion, GradientCheckOnTwoSamples) {
  SmallFusion f;
  auto tokens = regular_batch(2, 4, 16);
  MaskingOptions opt;
  opt.probability = 0.5;
  opt.vocab_size = 16;
  auto m = apply_masking(tokens, opt, 10);
  std::mt19937_64 r(10);
  std::array<Tensor, kNumStages> img, txt;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    img[s] = random_tensor({2, 5, 8}, r);
    txt[s] = random_tensor({2, 8, 8}, r);
  }
  const auto& st = f.fusion.stage(0);
  auto report = grad_check([&] { return mlm_fused_loss(img, txt, m, f.fusion).loss; },
                           {img[1], img[2], txt[1], txt[2], st.conv_w, st.attn.wq, st.attn.wv, st.attn.wo,
                            st.out_w, f.fusion.head().w});
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Fusion, ImageGradientVanishesExactlyWhenAttentionIsAblated) {
  EncoderConfig cfg;
  auto run = [&](bool ablate) {
    ParameterStore store;
    Rng rng(12);
    ImageEncoder image(cfg, store, rng);
    TextEncoder text(cfg, store, rng);
    FusionModule fusion(FusionConfig{}, cfg.image_widths, cfg.width, cfg.vocab_size, store, rng);
    if (ablate) {
      for (std::size_t k = 0; k < 2; ++k) {
        zero(fusion.stage(k).attn.wo);
        zero(fusion.stage(k).attn.bo);
      }
    }
    std::mt19937_64 r(12);
    auto tokens = regular_batch(4, 4);
    MaskingOptions opt;
    opt.probability = 0.5;
    auto m = apply_masking(tokens, opt, 12);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      auto is = image.encode({random_tensor({4, 9, 32}, r, 1.0, false)});
      auto ts = text.encode(m.masked);
      loss = mlm_fused_loss(is.stages, ts.stages, m, fusion).loss;
    }
    tape.backward(loss);
    double sq = 0.0;
    for (const auto& e : store.entries()) {
      if (e.name.rfind("image.", 0) != 0 || !e.value.has_grad()) continue;
      for (double g : e.value.grad()) sq += g * g;
    }
    return sq;
  };
  EXPECT_EQ(run(true), 0.0);
  EXPECT_GT(run(false), 0.0);
}

TEST(MlmLoss, Average) {
  EXPECT_EQ(mlm_loss(2.0, 4.0), 3.0);
  EXPECT_EQ(mlm_loss(1.5, 1.5), 1.5);
  EXPECT_NEAR(mlm_loss(Tensor::scalar(2.0), Tensor::scalar(4.0)).item(), 3.0, 1e-15);
}
