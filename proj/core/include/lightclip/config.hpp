#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lightclip/encoders.hpp"
#include "lightclip/instance_alignment.hpp"
#include "lightclip/masked_language.hpp"
#include "lightclip/synthetic_corpus.hpp"

namespace lightclip {

struct LossWeights {
  double alpha = 0.8;  // instance alignment
  double beta = 0.1;   // token alignment
  double gamma = 0.1;  // masked language modeling

  /// Each weight in [0, 1] and the sum equal to 1 within 1e-9.
  void validate() const;
};

struct OptimizerConfig {
  double peak_lr = 5e-4;
  double warmup_fraction = 0.05;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

struct EvalConfig {
  std::size_t heldout_samples = 1000;
  std::size_t gallery_size = 100;  // retrieval candidates per query
  std::uint64_t heldout_seed = 2;
  std::size_t chance_trials = 10000;

  void validate() const;
};

struct TrainConfig {
  std::size_t samples = 4096;
  std::size_t epochs = 32;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;       // parameter init, shuffling, masking
  std::uint64_t data_seed = 1;  // training-split generation

  OptimizerConfig optimizer;
  LossWeights weights;
  LabelSchedule labels;  // labels.epochs mirrors `epochs`
  ImportanceSource importance = ImportanceSource::kSimilarity;
  FusionConfig fusion;
  EncoderConfig encoder;
  WorldConfig world;  // patch_dim, num_patches and vocab_size mirror `encoder`
  MaskingOptions masking;
  EvalConfig eval;

  /// Syncs mirrored fields, then throws ConfigError naming the first
  /// violated constraint.
  void validate();
};

/// Parses a JSON document. Missing keys keep their defaults; unknown keys
/// and wrongly typed values raise ConfigError with the dotted key path.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
/// Complete, resolved configuration as pretty-printed JSON.
std::string config_to_json(const TrainConfig& config);

}  // namespace lightclip
