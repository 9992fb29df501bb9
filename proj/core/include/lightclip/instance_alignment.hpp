#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "lightclip/tensor.hpp"

namespace lightclip {

inline constexpr double kInitialTemperature = 0.07;
inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 100.0;

/// Temperature-scaled similarity logits in both retrieval directions.
struct SimilarityLogits {
  Tensor i2t;  // [n, n], i2t[i][j] = <v_i, t_j> / tau
  Tensor t2i;  // [n, n], t2i[i][j] = <t_i, v_j> / tau
  double tau = kInitialTemperature;

  std::size_t size() const { return i2t.dim(0); }
};

/// `log_tau` is the learnable [1] parameter holding log(tau).
SimilarityLogits similarity_logits(const Tensor& img_global, const Tensor& txt_global,
                                   const Tensor& log_tau);
SimilarityLogits similarity_logits(const Tensor& img_global, const Tensor& txt_global, double tau);

/// Clamps a log-temperature parameter in place to [log 0.01, log 100].
void clamp_log_temperature(Tensor& log_tau);

/// Row-stochastic n x n matrix of contrastive targets. Never differentiated.
class TargetDistribution {
 public:
  TargetDistribution() = default;
  TargetDistribution(std::size_t n, std::vector<double> rows);

  std::size_t size() const { return n_; }
  double at(std::size_t i, std::size_t j) const { return rows_[i * n_ + j]; }
  std::span<const double> row(std::size_t i) const { return {rows_.data() + i * n_, n_}; }
  const std::vector<double>& values() const { return rows_; }
  Tensor as_tensor() const;
  /// Mean row entropy in nats.
  double mean_entropy() const;

 private:
  std::size_t n_ = 0;
  std::vector<double> rows_;
};

TargetDistribution one_hot_targets(std::size_t n);

/// (1 - delta) * y + delta / (n - 1) * (1 - y) for one-hot y.
TargetDistribution smooth_targets(const TargetDistribution& y, double delta);

/// Where the negative weights of importance-aware targets come from.
enum class ImportanceSource {
  kSimilarity,     // softmax over the row's similarity logits (default)
  kLiteralLabels,  // softmax over the one-hot label row; degenerates to uniform
};

/// (1 - delta) * one_hot(diag) + delta * softmax(row with diag set to -inf).
std::vector<double> importance_targets(std::span<const double> logits_row, std::size_t diag,
                                       double delta,
                                       ImportanceSource source = ImportanceSource::kSimilarity);

/// Applies the row rule to every row i of a square logit matrix with diag = i.
TargetDistribution importance_targets(const Tensor& logits, double delta,
                                      ImportanceSource source = ImportanceSource::kSimilarity);

enum class LabelPhase { kOneHot, kSmoothed, kImportanceAware };

std::string_view phase_name(LabelPhase phase);

/// Epoch-gated progression one-hot -> smoothed -> importance-aware.
struct LabelSchedule {
  std::size_t epochs = 32;
  double r1 = 0.33;
  double r2 = 0.66;
  double delta = 0.2;

  void validate() const;
  /// Throws ScheduleError when epoch >= epochs.
  LabelPhase phase_at(std::size_t epoch) const;
};

const TargetDistribution& select_targets(std::size_t epoch, const LabelSchedule& schedule,
                                         const TargetDistribution& one_hot,
                                         const TargetDistribution& smoothed,
                                         const TargetDistribution& importance);

/// Targets for both directions at a given epoch. Each direction is softened
/// from its own logit rows.
struct InstanceTargets {
  TargetDistribution i2t;
  TargetDistribution t2i;
  LabelPhase phase = LabelPhase::kOneHot;
};

InstanceTargets targets_for_epoch(const SimilarityLogits& logits, std::size_t epoch,
                                  const LabelSchedule& schedule,
                                  ImportanceSource source = ImportanceSource::kSimilarity);

/// 0.5 * (mean_i H(i2t_targets_i, softmax(i2t_i)) + mean_i H(t2i_targets_i, softmax(t2i_i))).
Tensor infonce(const SimilarityLogits& logits, const TargetDistribution& i2t_targets,
               const TargetDistribution& t2i_targets);
Tensor infonce(const SimilarityLogits& logits, const TargetDistribution& targets);

}  // namespace lightclip
