#include "lightclip/instance_alignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lightclip/errors.hpp"
#include "lightclip/ops.hpp"

namespace lightclip {

namespace {

void check_unit_rows(const Tensor& x, const char* name) {
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += x.data()[i * d + k] * x.data()[i * d + k];
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
      throw ContractError(std::string(name) + " row " + std::to_string(i) +
                          " is not unit-norm (norm " + std::to_string(std::sqrt(sq)) + ")");
    }
  }
}

SimilarityLogits build_logits(const Tensor& img, const Tensor& txt, const Tensor& inv_tau) {
  if (img.rank() != 2 || txt.rank() != 2 || img.shape() != txt.shape()) {
    throw DimensionError("similarity_logits: image " + shape_str(img.shape()) + " vs text " +
                         shape_str(txt.shape()));
  }
  if (img.dim(0) < 2) throw BatchError("contrastive loss needs a batch of at least 2 pairs");
  check_unit_rows(img, "image embedding");
  check_unit_rows(txt, "text embedding");
  SimilarityLogits out;
  out.i2t = ops::scale_by(ops::matmul(img, ops::transpose(txt)), inv_tau);
  out.t2i = ops::transpose(out.i2t);
  out.tau = 1.0 / inv_tau.item();
  return out;
}

void check_delta(double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) {
    throw ConfigError("label softening delta must lie in [0,1], got " + std::to_string(delta));
  }
}

}  // namespace

SimilarityLogits similarity_logits(const Tensor& img_global, const Tensor& txt_global,
                                   const Tensor& log_tau) {
  return build_logits(img_global, txt_global, ops::exp(ops::scale(log_tau, -1.0)));
}

SimilarityLogits similarity_logits(const Tensor& img_global, const Tensor& txt_global, double tau) {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive");
  return build_logits(img_global, txt_global, Tensor::scalar(1.0 / tau));
}

void clamp_log_temperature(Tensor& log_tau) {
  double& v = log_tau.mutable_data()[0];
  v = std::clamp(v, std::log(kMinTemperature), std::log(kMaxTemperature));
}

TargetDistribution::TargetDistribution(std::size_t n, std::vector<double> rows)
    : n_(n), rows_(std::move(rows)) {
  if (rows_.size() != n * n) throw DimensionError("target distribution must be n x n");
}

Tensor TargetDistribution::as_tensor() const { return Tensor::from({n_, n_}, rows_); }

double TargetDistribution::mean_entropy() const {
  double total = 0.0;
  for (double p : rows_) {
    if (p > 0.0) total -= p * std::log(p);
  }
  return total / static_cast<double>(n_);
}

TargetDistribution one_hot_targets(std::size_t n) {
  if (n < 2) throw BatchError("contrastive targets need n >= 2");
  std::vector<double> rows(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) rows[i * n + i] = 1.0;
  return {n, std::move(rows)};
}

TargetDistribution smooth_targets(const TargetDistribution& y, double delta) {
  check_delta(delta);
  const std::size_t n = y.size();
  if (n < 2) throw BatchError("label smoothing divides by n - 1; need n >= 2");
  const double off = delta / static_cast<double>(n - 1);
  std::vector<double> rows(n * n);
  for (std::size_t i = 0; i < n * n; ++i) rows[i] = (1.0 - delta) * y.values()[i] + off * (1.0 - y.values()[i]);
  return {n, std::move(rows)};
}

std::vector<double> importance_targets(std::span<const double> logits_row, std::size_t diag,
                                       double delta, ImportanceSource source) {
  check_delta(delta);
  const std::size_t n = logits_row.size();
  if (n < 2) throw BatchError("importance-aware targets need n >= 2");
  if (diag >= n) throw DimensionError("diagonal index out of range");
  std::vector<double> filled(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (source == ImportanceSource::kSimilarity) {
      if (!std::isfinite(logits_row[j])) throw DomainError("importance targets need finite logits");
      filled[j] = logits_row[j];
    } else {
      filled[j] = j == diag ? 1.0 : 0.0;
    }
  }
  filled[diag] = -std::numeric_limits<double>::infinity();
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : filled) mx = std::max(mx, v);
  double total = 0.0;
  for (auto& v : filled) {
    v = std::exp(v - mx);
    total += v;
  }
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = delta * filled[j] / total;
  out[diag] = 1.0 - delta;
  return out;
}

TargetDistribution importance_targets(const Tensor& logits, double delta, ImportanceSource source) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1)) {
    throw DimensionError("importance targets need square logits, got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0);
  std::vector<double> rows;
  rows.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = importance_targets(logits.data().subspan(i * n, n), i, delta, source);
    rows.insert(rows.end(), row.begin(), row.end());
  }
  return {n, std::move(rows)};
}

std::string_view phase_name(LabelPhase phase) {
  switch (phase) {
    case LabelPhase::kOneHot:
      return "one-hot";
    case LabelPhase::kSmoothed:
      return "smoothed";
    case LabelPhase::kImportanceAware:
      return "importance-aware";
  }
  return "unknown";
}

void LabelSchedule::validate() const {
  if (epochs == 0) throw ConfigError("labels: total epochs must be positive");
  if (!(r1 >= 0.0 && r1 <= 1.0 && r2 >= 0.0 && r2 <= 1.0)) {
    throw ConfigError("labels.r1 and labels.r2 must lie in [0,1]");
  }
  if (!(r1 < r2)) throw ConfigError("labels.r1 must be strictly less than labels.r2");
  check_delta(delta);
}

LabelPhase LabelSchedule::phase_at(std::size_t epoch) const {
  if (epoch >= epochs) {
    throw ScheduleError("epoch " + std::to_string(epoch) + " outside schedule of " +
                        std::to_string(epochs) + " epochs");
  }
  const double e = static_cast<double>(epoch);
  const double total = static_cast<double>(epochs);
  if (e < r1 * total) return LabelPhase::kOneHot;
  if (e < r2 * total) return LabelPhase::kSmoothed;
  return LabelPhase::kImportanceAware;
}

const TargetDistribution& select_targets(std::size_t epoch, const LabelSchedule& schedule,
                                         const TargetDistribution& one_hot,
                                         const TargetDistribution& smoothed,
                                         const TargetDistribution& importance) {
  switch (schedule.phase_at(epoch)) {
    case LabelPhase::kOneHot:
      return one_hot;
    case LabelPhase::kSmoothed:
      return smoothed;
    case LabelPhase::kImportanceAware:
      return importance;
  }
  return one_hot;
}

InstanceTargets targets_for_epoch(const SimilarityLogits& logits, std::size_t epoch,
                                  const LabelSchedule& schedule, ImportanceSource source) {
  InstanceTargets out;
  out.phase = schedule.phase_at(epoch);
  const std::size_t n = logits.size();
  switch (out.phase) {
    case LabelPhase::kOneHot:
      out.i2t = one_hot_targets(n);
      out.t2i = out.i2t;
      break;
    case LabelPhase::kSmoothed:
      out.i2t = smooth_targets(one_hot_targets(n), schedule.delta);
      out.t2i = out.i2t;
      break;
    case LabelPhase::kImportanceAware:
      out.i2t = importance_targets(logits.i2t, schedule.delta, source);
      out.t2i = importance_targets(logits.t2i, schedule.delta, source);
      break;
  }
  return out;
}

Tensor infonce(const SimilarityLogits& logits, const TargetDistribution& i2t_targets,
               const TargetDistribution& t2i_targets) {
  const std::size_t n = logits.size();
  if (i2t_targets.size() != n || t2i_targets.size() != n) {
    throw DimensionError("infonce: targets do not match batch of " + std::to_string(n));
  }
  auto direction = [](const Tensor& l, const TargetDistribution& t) {
    return ops::sum(ops::mul(t.as_tensor(), ops::log_softmax(l, 1)));
  };
  Tensor total = ops::add(direction(logits.i2t, i2t_targets), direction(logits.t2i, t2i_targets));
  return ops::scale(total, -0.5 / static_cast<double>(n));
}

Tensor infonce(const SimilarityLogits& logits, const TargetDistribution& targets) {
  return infonce(logits, targets, targets);
}

}  // namespace lightclip
