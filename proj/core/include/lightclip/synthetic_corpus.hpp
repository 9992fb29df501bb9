#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "lightclip/encoders.hpp"
#include "lightclip/hungarian.hpp"

namespace lightclip {

struct WorldConfig {
  std::size_t concepts = 64;  // K
  std::size_t patch_dim = 32;
  std::size_t num_patches = 9;
  std::size_t min_concepts = 1;
  std::size_t max_concepts = 4;
  double noise_sigma = 0.1;       // per-coordinate Gaussian noise
  double duplication_rate = 0.1;  // q
  double distractor_rate = 0.3;   // chance a non-concept slot holds a distractor
  std::size_t vocab_size = 128;
  std::uint64_t seed = 1234;

  void validate() const;
};

/// Fixed concept inventory: one unit prototype and one name token per concept.
class ConceptWorld {
 public:
  /// Draws prototypes from `config.seed` and assigns name ids 4, 5, ...
  explicit ConceptWorld(const WorldConfig& config);
  /// Uses the given name tokens; throws ConfigError on reserved or repeated ids.
  ConceptWorld(const WorldConfig& config, std::vector<std::int32_t> names);
  ConceptWorld(const WorldConfig& config, std::vector<double> prototypes,
               std::vector<std::int32_t> names);

  const WorldConfig& config() const { return config_; }
  std::size_t size() const { return config_.concepts; }
  std::span<const double> prototype(std::size_t k) const {
    return {prototypes_.data() + k * config_.patch_dim, config_.patch_dim};
  }
  const std::vector<double>& prototypes() const { return prototypes_; }
  std::int32_t name(std::size_t k) const { return names_[k]; }
  const std::vector<std::int32_t>& names() const { return names_; }

 private:
  void draw_prototypes();
  void check() const;

  WorldConfig config_;
  std::vector<double> prototypes_;  // [K, patch_dim]
  std::vector<std::int32_t> names_;
};

struct PairedSample {
  std::vector<double> patches;        // [num_patches, patch_dim]
  std::vector<std::int32_t> text;     // BOS, names, EOS (unpadded)
  std::vector<long> truth;            // per patch: text position of its name, or -1
  std::vector<std::size_t> concepts;  // concept ids in slot order
  bool duplicate = false;             // concept set copied from an earlier sample
};

/// Deterministic in (world, n, seed). Each sample draws uniformly between
/// min_concepts and max_concepts distinct concepts; with probability q it
/// instead reuses the concept set of a uniformly chosen earlier sample.
std::vector<PairedSample> generate(const ConceptWorld& world, std::size_t n, std::uint64_t seed);

/// Fraction of concept patches whose assigned column is their true name
/// token. Columns of `assignment` index `positions` (text position per
/// column); pass an empty `positions` when columns are text positions.
/// Returns 1 for a sample without concept patches.
double oracle_matching_accuracy(const Assignment& assignment, const std::vector<long>& truth,
                                const std::vector<std::size_t>& positions = {});

ImageBatch image_batch(const std::vector<PairedSample>& samples, std::span<const std::size_t> indices);
TokenBatch token_batch(const std::vector<PairedSample>& samples, std::span<const std::size_t> indices);

struct Dataset {
  ConceptWorld world;
  std::vector<PairedSample> samples;
};

void dump_dataset(const std::filesystem::path& manifest, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& manifest);

}  // namespace lightclip
