#include "lightclip/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lightclip/errors.hpp"

namespace lightclip {

using nlohmann::json;

void LossWeights::validate() const {
  for (double w : {alpha, beta, gamma}) {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("loss_weights: each of alpha, beta, gamma must lie in [0, 1]");
  }
  const double sum = alpha + beta + gamma;
  if (std::abs(sum - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg << "loss_weights: alpha + beta + gamma must equal 1 (got " << sum << ")";
    throw ConfigError(msg.str());
  }
}

void OptimizerConfig::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("train.peak_lr must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw ConfigError("train.warmup_fraction must lie in (0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
}

void EvalConfig::validate() const {
  if (gallery_size < 2) throw ConfigError("eval.gallery_size must be at least 2");
  if (heldout_samples < gallery_size) throw ConfigError("eval.heldout_samples must be at least eval.gallery_size");
  if (chance_trials == 0) throw ConfigError("eval.chance_trials must be positive");
}

void TrainConfig::validate() {
  labels.epochs = epochs;
  world.patch_dim = encoder.patch_dim;
  world.num_patches = encoder.num_patches;
  world.vocab_size = encoder.vocab_size;
  masking.vocab_size = encoder.vocab_size;

  if (epochs == 0) throw ConfigError("train.epochs must be positive");
  if (batch_size < 2) throw ConfigError("train.batch_size must be at least 2");
  if (samples < batch_size) throw ConfigError("train.samples must be at least train.batch_size");
  optimizer.validate();
  weights.validate();
  labels.validate();
  encoder.validate();
  fusion.validate();
  world.validate();
  masking.validate();
  eval.validate();
  if (fusion.common_width == 0 || encoder.width % fusion.heads != 0) {
    throw ConfigError("fusion.heads must divide encoder.width");
  }
  if (world.concepts + vocab::kFirstRegular > encoder.vocab_size) {
    throw ConfigError("world.concepts + 4 reserved ids must fit in encoder.vocab_size");
  }
  if (world.max_concepts + 2 > encoder.max_text_len) {
    throw ConfigError("world.max_concepts + 2 (BOS, EOS) must fit in encoder.max_text_len");
  }
}

namespace {

// Reads known keys from one object and rejects anything else.
class Section {
 public:
  Section(const json& doc, std::string path) : path_(std::move(path)) {
    if (!doc.is_object()) throw ConfigError(where() + "must be an object");
    doc_ = &doc;
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : doc_->items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + full(key) + "'");
    }
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = doc_->find(key);
    if (it == doc_->end()) return;
    try {
      if constexpr (std::is_unsigned_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config key '" + full(key) + "' has the wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = doc_->find(key);
    return it == doc_->end() ? nullptr : &*it;
  }

  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config " : "config section '" + path_ + "' "; }

  const json* doc_ = nullptr;
  std::string path_;
  std::set<std::string> seen_;
};

std::string importance_name(ImportanceSource s) {
  return s == ImportanceSource::kSimilarity ? "similarity" : "literal";
}

}  // namespace

TrainConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig c;
  {
    Section root(doc, "");
    if (const json* j = root.child("train")) {
      Section s(*j, "train");
      s.read("samples", c.samples);
      s.read("epochs", c.epochs);
      s.read("batch_size", c.batch_size);
      s.read("seed", c.seed);
      s.read("data_seed", c.data_seed);
      s.read("peak_lr", c.optimizer.peak_lr);
      s.read("warmup_fraction", c.optimizer.warmup_fraction);
      s.read("weight_decay", c.optimizer.weight_decay);
      s.read("beta1", c.optimizer.beta1);
      s.read("beta2", c.optimizer.beta2);
      s.read("eps", c.optimizer.eps);
    }
    if (const json* j = root.child("loss_weights")) {
      Section s(*j, "loss_weights");
      s.read("alpha", c.weights.alpha);
      s.read("beta", c.weights.beta);
      s.read("gamma", c.weights.gamma);
    }
    if (const json* j = root.child("labels")) {
      Section s(*j, "labels");
      s.read("r1", c.labels.r1);
      s.read("r2", c.labels.r2);
      s.read("delta", c.labels.delta);
      std::string source = importance_name(c.importance);
      s.read("importance_source", source);
      if (source == "similarity") {
        c.importance = ImportanceSource::kSimilarity;
      } else if (source == "literal") {
        c.importance = ImportanceSource::kLiteralLabels;
      } else {
        throw ConfigError("labels.importance_source must be \"similarity\" or \"literal\"");
      }
    }
    if (const json* j = root.child("fusion")) {
      Section s(*j, "fusion");
      std::vector<std::size_t> stages{c.fusion.stages[0], c.fusion.stages[1]};
      s.read("stages", stages);
      if (stages.size() != 2) throw ConfigError("fusion.stages must list exactly two stages");
      c.fusion.stages = {stages[0], stages[1]};
      s.read("heads", c.fusion.heads);
      s.read("common_width", c.fusion.common_width);
    }
    if (const json* j = root.child("encoder")) {
      Section s(*j, "encoder");
      auto& e = c.encoder;
      s.read("width", e.width);
      s.read("heads", e.heads);
      s.read("mlp_ratio", e.mlp_ratio);
      s.read("vocab_size", e.vocab_size);
      s.read("text_layers", e.text_layers);
      s.read("max_text_len", e.max_text_len);
      s.read("patch_dim", e.patch_dim);
      s.read("num_patches", e.num_patches);
      std::vector<std::size_t> widths(e.image_widths.begin(), e.image_widths.end());
      s.read("image_widths", widths);
      if (widths.size() != kNumStages) throw ConfigError("encoder.image_widths must list four widths");
      std::copy(widths.begin(), widths.end(), e.image_widths.begin());
    }
    if (const json* j = root.child("world")) {
      Section s(*j, "world");
      auto& w = c.world;
      s.read("concepts", w.concepts);
      s.read("min_concepts", w.min_concepts);
      s.read("max_concepts", w.max_concepts);
      s.read("noise_sigma", w.noise_sigma);
      s.read("duplication_rate", w.duplication_rate);
      s.read("distractor_rate", w.distractor_rate);
      s.read("seed", w.seed);
    }
    if (const json* j = root.child("masking")) {
      Section s(*j, "masking");
      s.read("probability", c.masking.probability);
      s.read("mask_fraction", c.masking.mask_fraction);
      s.read("random_fraction", c.masking.random_fraction);
    }
    if (const json* j = root.child("eval")) {
      Section s(*j, "eval");
      s.read("heldout_samples", c.eval.heldout_samples);
      s.read("gallery_size", c.eval.gallery_size);
      s.read("heldout_seed", c.eval.heldout_seed);
      s.read("chance_trials", c.eval.chance_trials);
    }
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string config_to_json(const TrainConfig& c) {
  json doc;
  doc["train"] = {{"samples", c.samples},
                  {"epochs", c.epochs},
                  {"batch_size", c.batch_size},
                  {"seed", c.seed},
                  {"data_seed", c.data_seed},
                  {"peak_lr", c.optimizer.peak_lr},
                  {"warmup_fraction", c.optimizer.warmup_fraction},
                  {"weight_decay", c.optimizer.weight_decay},
                  {"beta1", c.optimizer.beta1},
                  {"beta2", c.optimizer.beta2},
                  {"eps", c.optimizer.eps}};
  doc["loss_weights"] = {{"alpha", c.weights.alpha}, {"beta", c.weights.beta}, {"gamma", c.weights.gamma}};
  doc["labels"] = {{"r1", c.labels.r1},
                   {"r2", c.labels.r2},
                   {"delta", c.labels.delta},
                   {"importance_source", importance_name(c.importance)}};
  doc["fusion"] = {{"stages", c.fusion.stages}, {"heads", c.fusion.heads}, {"common_width", c.fusion.common_width}};
  const auto& e = c.encoder;
  doc["encoder"] = {{"width", e.width},           {"heads", e.heads},
                    {"mlp_ratio", e.mlp_ratio},   {"vocab_size", e.vocab_size},
                    {"text_layers", e.text_layers}, {"max_text_len", e.max_text_len},
                    {"patch_dim", e.patch_dim},   {"num_patches", e.num_patches},
                    {"image_widths", e.image_widths}};
  const auto& w = c.world;
  doc["world"] = {{"concepts", w.concepts},
                  {"min_concepts", w.min_concepts},
                  {"max_concepts", w.max_concepts},
                  {"noise_sigma", w.noise_sigma},
                  {"duplication_rate", w.duplication_rate},
                  {"distractor_rate", w.distractor_rate},
                  {"seed", w.seed}};
  doc["masking"] = {{"probability", c.masking.probability},
                    {"mask_fraction", c.masking.mask_fraction},
                    {"random_fraction", c.masking.random_fraction}};
  doc["eval"] = {{"heldout_samples", c.eval.heldout_samples},
                 {"gallery_size", c.eval.gallery_size},
                 {"heldout_seed", c.eval.heldout_seed},
                 {"chance_trials", c.eval.chance_trials}};
  return doc.dump(2) + "\n";
}

}  // namespace lightclip
