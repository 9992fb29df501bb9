#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "lightclip/config.hpp"
#include "lightclip/model.hpp"
#include "lightclip/synthetic_corpus.hpp"

namespace lightclip {

/// alpha * inst + beta * token + gamma * mlm. Validates the weights.
double total_loss(double inst, double token, double mlm, const LossWeights& w);
/// Taped version; an undefined term contributes nothing.
Tensor total_loss(const Tensor& inst, const Tensor& token, const Tensor& mlm, const LossWeights& w);

/// Linear warm-up from 0 to peak over warmup_fraction * total_steps, then
/// cosine decay reaching 0 at total_steps. Throws ScheduleError when
/// step >= total_steps.
double lr_at(std::size_t step, std::size_t total_steps, const OptimizerConfig& cfg);

/// AdamW with decoupled weight decay applied to parameters flagged `decay`.
class AdamW {
 public:
  AdamW(ParameterStore& store, const OptimizerConfig& cfg);

  /// Applies one update from the current gradients. Returns false, leaving
  /// every parameter and moment untouched, when any gradient is non-finite.
  bool step(double lr);

  std::size_t steps() const { return t_; }
  std::size_t rejected_steps() const { return rejected_; }

 private:
  ParameterStore& store_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
  std::size_t rejected_ = 0;
};

struct RetrievalScores {
  double i2t_r1 = 0, i2t_r5 = 0;
  double t2i_r1 = 0, t2i_r5 = 0;
};

struct RetrievalReport {
  RetrievalScores retrieval;
  double token_accuracy = 0;   // concept patches matched to their own name token
  std::size_t queries = 0;
  std::size_t gallery_size = 0;
};

/// Unit global embeddings [n, d] of every sample, without gradient.
struct GlobalEmbeddings {
  Tensor image;
  Tensor text;
};
GlobalEmbeddings encode_global(const Model& model, const std::vector<PairedSample>& samples,
                               std::size_t chunk = 100);

/// Recall@1 and @5 in consecutive galleries of `gallery` pairs (a trailing
/// partial gallery is dropped). Ties rank against the query.
RetrievalScores retrieval_recall(const Tensor& image_global, const Tensor& text_global,
                                 std::size_t gallery);

/// Hungarian matching of stage-4 patch and name-token embeddings per
/// sample, scored against ground truth. Pooled over all concept patches.
double token_matching_accuracy(const Model& model, const std::vector<PairedSample>& samples,
                               std::size_t chunk = 100);

/// Monte Carlo accuracy of uniformly random assignments with the same shapes.
double chance_token_accuracy(const std::vector<PairedSample>& samples, std::size_t trials,
                             std::uint64_t seed);
/// Monte Carlo Recall@k of a random ranking within a gallery.
double chance_recall(std::size_t gallery, std::size_t k, std::size_t trials, std::uint64_t seed);

RetrievalReport evaluate(const Model& model, const std::vector<PairedSample>& heldout,
                         const EvalConfig& cfg);

struct LossBreakdown {
  double total = 0, inst = 0, token = 0, mlm_text = 0, mlm_fuse = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps completed
  double lr = 0;         // rate used by the epoch's last step
  double tau = 0;
  LossBreakdown loss;    // epoch means
  LabelPhase phase = LabelPhase::kOneHot;
  double target_entropy = 0;  // mean image-to-text target entropy
  RetrievalReport eval;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: write nothing
  bool eval_each_epoch = true;
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::unique_ptr<Model> model;
  std::vector<EpochRecord> epochs;
  RetrievalReport final_eval;
  std::size_t rejected_steps = 0;
  double seconds = 0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,step,lr,tau,loss_total,loss_inst,loss_token,loss_mlm_text,loss_mlm_fuse,phase";

/// Builds the corpus from the config, trains, and evaluates on the held-out
/// split. With an out dir it writes metrics.csv, eval.csv, checkpoint.json
/// (+ .bin) and config.resolved.json. Throws DivergenceError on a
/// non-finite loss after saving the last good parameters.
TrainResult train(const TrainConfig& config, const TrainOptions& options = {});

/// Corpus splits used by `train` and `evaluate`.
struct Splits {
  ConceptWorld world;
  std::vector<PairedSample> train;
  std::vector<PairedSample> heldout;
};
Splits make_splits(const TrainConfig& config);

/// Shortest round-trip decimal form.
std::string format_real(double value);

}  // namespace lightclip
