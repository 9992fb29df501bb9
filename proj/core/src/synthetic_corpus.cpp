#include "lightclip/synthetic_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "lightclip/container.hpp"
#include "lightclip/errors.hpp"

namespace lightclip {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void random_unit(std::span<double> out, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& v : out) {
      v = normal(rng);
      norm += v * v;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& v : out) v /= norm;
}

}  // namespace

void WorldConfig::validate() const {
  if (concepts < 2) throw ConfigError("world.concepts must be at least 2");
  if (patch_dim == 0 || num_patches == 0) throw ConfigError("world patch dimensions must be positive");
  if (min_concepts < 1 || min_concepts > max_concepts) {
    throw ConfigError("world.min_concepts must satisfy 1 <= min_concepts <= max_concepts");
  }
  if (max_concepts > num_patches || max_concepts > concepts) {
    throw ConfigError("world.max_concepts cannot exceed the patch count or the concept count");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("world.noise_sigma must be non-negative");
  if (!(duplication_rate >= 0.0 && duplication_rate < 1.0)) {
    throw ConfigError("world.duplication_rate must lie in [0, 1)");
  }
  if (!(distractor_rate >= 0.0 && distractor_rate < 1.0)) {
    throw ConfigError("world.distractor_rate must lie in [0, 1)");
  }
}

ConceptWorld::ConceptWorld(const WorldConfig& config) : config_(config) {
  config_.validate();
  if (config_.concepts + vocab::kFirstRegular > config_.vocab_size) {
    throw ConfigError("world.concepts " + std::to_string(config_.concepts) +
                      " does not fit in a vocabulary of " + std::to_string(config_.vocab_size) +
                      " with 4 reserved ids");
  }
  names_.resize(config_.concepts);
  std::iota(names_.begin(), names_.end(), vocab::kFirstRegular);
  draw_prototypes();
  check();
}

ConceptWorld::ConceptWorld(const WorldConfig& config, std::vector<std::int32_t> names)
    : config_(config), names_(std::move(names)) {
  config_.validate();
  draw_prototypes();
  check();
}

void ConceptWorld::draw_prototypes() {
  prototypes_.resize(config_.concepts * config_.patch_dim);
  Rng rng(config_.seed);
  for (std::size_t k = 0; k < config_.concepts; ++k) {
    random_unit({prototypes_.data() + k * config_.patch_dim, config_.patch_dim}, rng);
  }
}

ConceptWorld::ConceptWorld(const WorldConfig& config, std::vector<double> prototypes,
                           std::vector<std::int32_t> names)
    : config_(config), prototypes_(std::move(prototypes)), names_(std::move(names)) {
  config_.validate();
  check();
}

void ConceptWorld::check() const {
  if (names_.size() != config_.concepts) {
    throw ConfigError("world needs exactly one name token per concept");
  }
  if (prototypes_.size() != config_.concepts * config_.patch_dim) {
    throw ConfigError("world prototype table has the wrong size");
  }
  std::set<std::int32_t> seen;
  for (auto id : names_) {
    if (vocab::is_special(id)) {
      throw ConfigError("concept name token " + std::to_string(id) + " collides with a reserved id");
    }
    if (static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw ConfigError("concept name token " + std::to_string(id) + " is outside the vocabulary");
    }
    if (!seen.insert(id).second) throw ConfigError("concept name token " + std::to_string(id) + " is repeated");
  }
  for (std::size_t a = 0; a < config_.concepts; ++a) {
    for (std::size_t b = a + 1; b < config_.concepts; ++b) {
      if (std::equal(prototype(a).begin(), prototype(a).end(), prototype(b).begin())) {
        throw ConfigError("concept prototypes " + std::to_string(a) + " and " + std::to_string(b) +
                          " coincide");
      }
    }
  }
}

std::vector<PairedSample> generate(const ConceptWorld& world, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("generate needs n >= 1");
  const auto& cfg = world.config();
  const std::size_t d = cfg.patch_dim, l1 = cfg.num_patches;

  // Concept sets are drawn sequentially because duplicates refer back to
  // earlier samples; everything else uses a per-sample derived stream.
  Rng sets_rng(splitmix(seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_concepts, cfg.max_concepts);
  std::vector<std::size_t> all(cfg.concepts);
  std::iota(all.begin(), all.end(), 0);

  std::vector<PairedSample> out(n);
  std::vector<std::vector<std::size_t>> sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool dup = unit(sets_rng) < cfg.duplication_rate;
    if (dup && i > 0) {
      sets[i] = sets[std::uniform_int_distribution<std::size_t>(0, i - 1)(sets_rng)];
      out[i].duplicate = true;
    } else {
      const std::size_t m = count_dist(sets_rng);
      std::vector<std::size_t> chosen;
      std::sample(all.begin(), all.end(), std::back_inserter(chosen), m, sets_rng);
      sets[i] = std::move(chosen);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(splitmix(seed ^ splitmix(i + 1)));
    std::normal_distribution<double> noise(0.0, 1.0);
    auto& s = out[i];
    const auto& concepts = sets[i];
    const std::size_t m = concepts.size();

    std::vector<std::size_t> slots(l1);
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng);
    std::vector<std::size_t> order(m);  // order[p] = index into concepts at text position 1 + p
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    s.patches.assign(l1 * d, 0.0);
    s.truth.assign(l1, -1);
    s.text.push_back(vocab::kBos);
    std::vector<long> position_of(m);
    for (std::size_t p = 0; p < m; ++p) {
      s.text.push_back(world.name(concepts[order[p]]));
      position_of[order[p]] = static_cast<long>(p + 1);
    }
    s.text.push_back(vocab::kEos);

    std::vector<std::size_t> slot_concept(l1, cfg.concepts);
    for (std::size_t c = 0; c < m; ++c) {
      slot_concept[slots[c]] = concepts[c];
      s.truth[slots[c]] = position_of[c];
    }
    for (std::size_t slot = 0; slot < l1; ++slot) {
      std::span<double> patch(s.patches.data() + slot * d, d);
      if (slot_concept[slot] < cfg.concepts) {
        auto proto = world.prototype(slot_concept[slot]);
        std::copy(proto.begin(), proto.end(), patch.begin());
        s.concepts.push_back(slot_concept[slot]);
      } else if (unit(rng) < cfg.distractor_rate) {
        random_unit(patch, rng);
      }
      if (cfg.noise_sigma > 0.0) {
        for (auto& v : patch) v += cfg.noise_sigma * noise(rng);
      }
    }
  }
  return out;
}

double oracle_matching_accuracy(const Assignment& assignment, const std::vector<long>& truth,
                                const std::vector<std::size_t>& positions) {
  std::size_t total = 0, correct = 0;
  for (std::size_t s = 0; s < truth.size(); ++s) {
    if (truth[s] < 0) continue;
    ++total;
    const long c = assignment.column_of(s);
    if (c < 0) continue;
    const auto pos = positions.empty() ? static_cast<std::size_t>(c) : positions.at(static_cast<std::size_t>(c));
    correct += static_cast<long>(pos) == truth[s];
  }
  return total == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(total);
}

ImageBatch image_batch(const std::vector<PairedSample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw BatchError("image_batch: empty index list");
  const std::size_t per = samples.at(indices[0]).patches.size();
  std::vector<double> data;
  data.reserve(indices.size() * per);
  for (auto i : indices) {
    const auto& p = samples.at(i).patches;
    if (p.size() != per) throw DimensionError("image_batch: samples differ in patch layout");
    data.insert(data.end(), p.begin(), p.end());
  }
  const std::size_t l1 = samples[indices[0]].truth.size();
  return {Tensor::from({indices.size(), l1, per / l1}, std::move(data))};
}

TokenBatch token_batch(const std::vector<PairedSample>& samples, std::span<const std::size_t> indices) {
  std::vector<std::vector<std::int32_t>> seqs;
  seqs.reserve(indices.size());
  for (auto i : indices) seqs.push_back(samples.at(i).text);
  return TokenBatch::from_sequences(seqs);
}

void dump_dataset(const std::filesystem::path& manifest, const Dataset& dataset) {
  const auto& cfg = dataset.world.config();
  const std::size_t n = dataset.samples.size(), l1 = cfg.num_patches, d = cfg.patch_dim;
  const std::size_t text_len = cfg.max_concepts + 2;
  Container c;
  c.format = "lightclip.dataset";
  c.meta = {{"concepts", std::to_string(cfg.concepts)},
            {"patch_dim", std::to_string(d)},
            {"num_patches", std::to_string(l1)},
            {"min_concepts", std::to_string(cfg.min_concepts)},
            {"max_concepts", std::to_string(cfg.max_concepts)},
            {"vocab_size", std::to_string(cfg.vocab_size)},
            {"world_seed", std::to_string(cfg.seed)}};
  c.arrays.push_back({"world.prototypes", {cfg.concepts, d}, dataset.world.prototypes()});
  c.arrays.push_back({"world.names", {cfg.concepts},
                      std::vector<double>(dataset.world.names().begin(), dataset.world.names().end())});
  NamedArray patches{"patches", {n, l1, d}, {}}, text{"text", {n, text_len}, {}};
  NamedArray truth{"truth", {n, l1}, {}}, dup{"duplicate", {n}, {}};
  for (const auto& s : dataset.samples) {
    patches.values.insert(patches.values.end(), s.patches.begin(), s.patches.end());
    for (std::size_t t = 0; t < text_len; ++t) {
      text.values.push_back(t < s.text.size() ? s.text[t] : vocab::kPad);
    }
    truth.values.insert(truth.values.end(), s.truth.begin(), s.truth.end());
    dup.values.push_back(s.duplicate ? 1.0 : 0.0);
  }
  c.arrays.push_back(std::move(patches));
  c.arrays.push_back(std::move(text));
  c.arrays.push_back(std::move(truth));
  c.arrays.push_back(std::move(dup));
  write_container(manifest, c);
}

Dataset load_dataset(const std::filesystem::path& manifest) {
  Container c = read_container(manifest, "lightclip.dataset");
  auto meta = [&](const char* key) -> std::size_t {
    auto it = c.meta.find(key);
    if (it == c.meta.end()) throw FormatError(std::string("dataset manifest lacks meta '") + key + "'");
    return std::stoull(it->second);
  };
  WorldConfig cfg;
  cfg.concepts = meta("concepts");
  cfg.patch_dim = meta("patch_dim");
  cfg.num_patches = meta("num_patches");
  cfg.min_concepts = meta("min_concepts");
  cfg.max_concepts = meta("max_concepts");
  cfg.vocab_size = meta("vocab_size");
  cfg.seed = meta("world_seed");
  const auto& names = c.find("world.names").values;
  ConceptWorld world(cfg, c.find("world.prototypes").values,
                     std::vector<std::int32_t>(names.begin(), names.end()));

  const auto& patches = c.find("patches");
  const auto& text = c.find("text");
  const auto& truth = c.find("truth");
  const auto& dup = c.find("duplicate");
  const std::size_t n = dup.values.size(), l1 = cfg.num_patches, d = cfg.patch_dim;
  if (patches.shape != Shape{n, l1, d} || truth.shape != Shape{n, l1} || text.shape.size() != 2 ||
      text.shape[0] != n) {
    throw FormatError("dataset arrays disagree on sample count or patch layout");
  }
  const std::size_t text_len = text.shape[1];
  std::vector<PairedSample> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = samples[i];
    s.patches.assign(patches.values.begin() + static_cast<long>(i * l1 * d),
                     patches.values.begin() + static_cast<long>((i + 1) * l1 * d));
    for (std::size_t t = 0; t < text_len; ++t) {
      auto id = static_cast<std::int32_t>(text.values[i * text_len + t]);
      if (id == vocab::kPad) break;
      s.text.push_back(id);
    }
    for (std::size_t slot = 0; slot < l1; ++slot) {
      s.truth.push_back(static_cast<long>(truth.values[i * l1 + slot]));
    }
    for (std::size_t slot = 0; slot < l1; ++slot) {
      if (s.truth[slot] >= 0) {
        auto id = s.text.at(static_cast<std::size_t>(s.truth[slot]));
        auto it = std::find(world.names().begin(), world.names().end(), id);
        s.concepts.push_back(static_cast<std::size_t>(it - world.names().begin()));
      }
    }
    s.duplicate = dup.values[i] != 0.0;
  }
  return {std::move(world), std::move(samples)};
}

}  // namespace lightclip
