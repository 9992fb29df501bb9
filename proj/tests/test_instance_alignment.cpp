#include <gtest/gtest.h>

#include <cmath>

#include "lightclip/errors.hpp"
#include "lightclip/grad_check.hpp"
#include "lightclip/instance_alignment.hpp"
#include "lightclip/ops.hpp"
#include "test_util.hpp"

using namespace lightclip;
using lightclip::testing::random_unit_rows;

namespace {

// Contrastive loss written directly with log-sum-exp, for one-hot targets.
double reference_infonce(const std::vector<double>& s, std::size_t n, double tau) {
  double total = 0.0;
  for (int dir = 0; dir < 2; ++dir) {
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -1e300;
      auto at = [&](std::size_t j) { return (dir == 0 ? s[i * n + j] : s[j * n + i]) / tau; };
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, at(j));
      double lse = 0.0;
      for (std::size_t j = 0; j < n; ++j) lse += std::exp(at(j) - mx);
      total += mx + std::log(lse) - at(i);
    }
  }
  return total / (2.0 * n);
}

SimilarityLogits from_matrix(std::size_t n, std::vector<double> m) {
  SimilarityLogits l;
  l.i2t = Tensor::from({n, n}, m, true);
  l.t2i = ops::transpose(l.i2t);
  l.tau = 1.0;
  return l;
}

}  // namespace

TEST(SimilarityLogits, GramMatrixWithUnitDiagonal) {
  std::mt19937_64 rng(1);
  Tensor v = random_unit_rows(4, 8, rng);
  auto l = similarity_logits(v, v, 1.0);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(l.i2t.at({i, i}), 1.0, 1e-12);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(l.i2t.at({i, j}), l.i2t.at({j, i}), 1e-15);
  }
}

TEST(SimilarityLogits, OrthonormalPairsAtInitialTemperature) {
  Tensor e = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto l = similarity_logits(e, e, kInitialTemperature);
  EXPECT_NEAR(l.i2t.at({0, 0}), 1.0 / 0.07, 1e-12);
  EXPECT_NEAR(l.i2t.at({0, 0}), 14.2857, 1e-4);
  EXPECT_EQ(l.i2t.at({0, 1}), 0.0);
}

TEST(SimilarityLogits, TextToImageIsTranspose) {
  std::mt19937_64 rng(2);
  Tensor v = random_unit_rows(5, 8, rng), t = random_unit_rows(5, 8, rng);
  Tensor log_tau = Tensor::from({1}, {std::log(0.07)});
  auto l = similarity_logits(v, t, log_tau);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(l.t2i.at({i, j}), l.i2t.at({j, i}));
  }
}

TEST(SimilarityLogits, Errors) {
  std::mt19937_64 rng(3);
  Tensor one = random_unit_rows(1, 4, rng);
  EXPECT_THROW(similarity_logits(one, one, 1.0), BatchError);
  EXPECT_THROW(similarity_logits(Tensor::from({2, 2}, {2, 0, 0, 1}), Tensor::from({2, 2}, {1, 0, 0, 1}), 1.0),
               ContractError);
}

TEST(Temperature, ClampKeepsRange) {
  Tensor lt = Tensor::from({1}, {std::log(1e-4)});
  clamp_log_temperature(lt);
  EXPECT_NEAR(std::exp(lt.item()), kMinTemperature, 1e-12);
  lt.mutable_data()[0] = std::log(1e4);
  clamp_log_temperature(lt);
  EXPECT_NEAR(std::exp(lt.item()), kMaxTemperature, 1e-9);
}

TEST(Targets, OneHot) {
  auto y = one_hot_targets(4);
  std::vector<double> row2(y.row(2).begin(), y.row(2).end());
  EXPECT_EQ(row2, (std::vector<double>{0, 0, 1, 0}));
  auto y2 = one_hot_targets(2);
  EXPECT_EQ(y2.values(), (std::vector<double>{1, 0, 0, 1}));
  EXPECT_THROW(one_hot_targets(1), BatchError);
}

TEST(Targets, SmoothedExamples) {
  auto a = smooth_targets(one_hot_targets(2), 0.2);
  EXPECT_NEAR(a.at(0, 0), 0.8, 1e-15);
  EXPECT_NEAR(a.at(0, 1), 0.2, 1e-15);
  auto b = smooth_targets(one_hot_targets(3), 0.3);
  EXPECT_NEAR(b.at(0, 0), 0.7, 1e-15);
  EXPECT_NEAR(b.at(0, 1), 0.15, 1e-15);
  EXPECT_NEAR(b.at(0, 2), 0.15, 1e-15);
  EXPECT_EQ(smooth_targets(one_hot_targets(3), 0.0).values(), one_hot_targets(3).values());
}

TEST(Targets, ImportanceExamples) {
  std::vector<double> sym{5, 1, 1};
  auto a = importance_targets(sym, 0, 0.2);
  EXPECT_EQ(a[0], 0.8);
  EXPECT_NEAR(a[1], 0.1, 1e-15);
  EXPECT_NEAR(a[2], 0.1, 1e-15);

  std::vector<double> row{0, 1, 0};
  auto b = importance_targets(row, 0, 0.2);
  const double e = std::exp(1.0);
  EXPECT_EQ(b[0], 0.8);
  EXPECT_NEAR(b[1], 0.2 * e / (e + 1.0), 1e-15);
  EXPECT_NEAR(b[2], 0.2 / (e + 1.0), 1e-15);
  EXPECT_NEAR(b[1], 0.14622, 1e-5);
  EXPECT_NEAR(b[2], 0.05378, 1e-5);

  auto c = importance_targets(row, 1, 0.0);
  EXPECT_EQ(c, (std::vector<double>{0, 1, 0}));
}

TEST(Targets, ImportanceShiftInvariant) {
  std::vector<double> row{0.3, -2.0, 1.5, 0.7}, shifted(row);
  for (auto& v : shifted) v += 12.5;
  auto a = importance_targets(row, 2, 0.4), b = importance_targets(shifted, 2, 0.4);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a[j], b[j], 1e-15);
}

TEST(Targets, LiteralLabelsDegenerateToUniformSmoothing) {
  std::vector<double> row{0.3, -2.0, 1.5, 0.7};
  auto lit = importance_targets(row, 1, 0.3, ImportanceSource::kLiteralLabels);
  auto smooth = smooth_targets(one_hot_targets(4), 0.3);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(lit[j], smooth.at(1, j), 1e-15);
}

TEST(Schedule, ThresholdsAtDefaultRatios) {
  LabelSchedule s;  // E = 32, r1 = 0.33, r2 = 0.66
  EXPECT_EQ(s.phase_at(10), LabelPhase::kOneHot);
  EXPECT_EQ(s.phase_at(11), LabelPhase::kSmoothed);
  EXPECT_EQ(s.phase_at(21), LabelPhase::kSmoothed);
  EXPECT_EQ(s.phase_at(22), LabelPhase::kImportanceAware);
  EXPECT_THROW(s.phase_at(32), ScheduleError);
}

TEST(Schedule, Boundaries) {
  LabelSchedule s;
  s.r1 = 0.0;
  EXPECT_EQ(s.phase_at(0), LabelPhase::kSmoothed);
  s.r1 = 0.33;
  s.r2 = 1.0;
  for (std::size_t e = 0; e < s.epochs; ++e) EXPECT_NE(s.phase_at(e), LabelPhase::kImportanceAware);
  s.r1 = 0.7;
  s.r2 = 0.6;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Schedule, SelectTargetsPicksPhase) {
  LabelSchedule s;
  auto y = one_hot_targets(3), ys = smooth_targets(y, 0.2);
  auto yi = importance_targets(Tensor::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}), 0.2);
  EXPECT_EQ(&select_targets(0, s, y, ys, yi), &y);
  EXPECT_EQ(&select_targets(15, s, y, ys, yi), &ys);
  EXPECT_EQ(&select_targets(31, s, y, ys, yi), &yi);
}

TEST(Infonce, UniformLogitsGiveLogN) {
  auto l = from_matrix(4, std::vector<double>(16, 0.3));
  EXPECT_NEAR(infonce(l, one_hot_targets(4)).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(infonce(l, one_hot_targets(4)).item(), 1.386294, 1e-6);
}

TEST(Infonce, DominantDiagonalVanishes) {
  auto l = from_matrix(2, {50, 0, 0, 50});
  EXPECT_LT(infonce(l, one_hot_targets(2)).item(), 1e-20);
}

TEST(Infonce, MatchesLogSumExpReference) {
  std::mt19937_64 rng(4);
  Tensor v = random_unit_rows(6, 8, rng), t = random_unit_rows(6, 8, rng);
  auto l = similarity_logits(v, t, 0.1);
  std::vector<double> s(36);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) s[i * 6 + j] = l.i2t.at({i, j}) * 0.1;
  }
  EXPECT_NEAR(infonce(l, one_hot_targets(6)).item(), reference_infonce(s, 6, 0.1), 1e-12);
}

TEST(Infonce, GradientOnRandomEmbeddingsAllTargetTypes) {
  std::mt19937_64 rng(5);
  Tensor raw_v = lightclip::testing::random_tensor({4, 8}, rng), raw_t = lightclip::testing::random_tensor({4, 8}, rng);
  Tensor log_tau = Tensor::from({1}, {std::log(0.3)}, true);
  for (int kind = 0; kind < 3; ++kind) {
    auto logits = [&] {
      return similarity_logits(ops::l2_normalize(raw_v, 1), ops::l2_normalize(raw_t, 1), log_tau);
    };
    // Targets are constants of the loss, so they are fixed at the base point.
    TargetDistribution ti, tt;
    {
      NoGradScope constant;
      auto base = logits();
      if (kind == 0) ti = tt = one_hot_targets(4);
      if (kind == 1) ti = tt = smooth_targets(one_hot_targets(4), 0.2);
      if (kind == 2) {
        ti = importance_targets(base.i2t, 0.2);
        tt = importance_targets(base.t2i, 0.2);
      }
    }
    auto f = [&] { return infonce(logits(), ti, tt); };
    auto report = grad_check(f, {raw_v, raw_t, log_tau});
    EXPECT_TRUE(report.passed) << "kind " << kind << " rel error " << report.max_rel_error;
  }
}
