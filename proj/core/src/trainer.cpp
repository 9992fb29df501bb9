#include "lightclip/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>

#include "lightclip/errors.hpp"
#include "lightclip/hungarian.hpp"
#include "lightclip/ops.hpp"
#include "lightclip/token_alignment.hpp"

namespace lightclip {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent streams derived from the run seed.
enum class Stream : std::uint64_t { kInit = 1, kShuffle = 2, kMasking = 3 };

std::uint64_t stream_seed(std::uint64_t seed, Stream s, std::uint64_t index = 0) {
  return mix(mix(seed) ^ mix(static_cast<std::uint64_t>(s) * 0x100000001b3ULL + index));
}

}  // namespace

std::string format_real(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

double total_loss(double inst, double token, double mlm, const LossWeights& w) {
  w.validate();
  return w.alpha * inst + w.beta * token + w.gamma * mlm;
}

Tensor total_loss(const Tensor& inst, const Tensor& token, const Tensor& mlm, const LossWeights& w) {
  w.validate();
  Tensor out;
  auto accumulate = [&](const Tensor& term, double weight) {
    if (!term.defined() || weight == 0.0) return;
    Tensor scaled = ops::scale(term, weight);
    out = out.defined() ? ops::add(out, scaled) : scaled;
  };
  accumulate(inst, w.alpha);
  accumulate(token, w.beta);
  accumulate(mlm, w.gamma);
  if (!out.defined()) throw ContractError("total_loss: no active term carries weight");
  return out;
}

double lr_at(std::size_t step, std::size_t total_steps, const OptimizerConfig& cfg) {
  if (step >= total_steps) {
    throw ScheduleError("lr_at: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + ")");
  }
  const double warm = cfg.warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.peak_lr * s / warm;
  const double progress = (s - warm) / (static_cast<double>(total_steps) - warm);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(ParameterStore& store, const OptimizerConfig& cfg) : store_(store), cfg_(cfg) {
  cfg_.validate();
  for (const auto& e : store_.entries()) {
    m_.emplace_back(e.value.numel(), 0.0);
    v_.emplace_back(e.value.numel(), 0.0);
  }
}

bool AdamW::step(double lr) {
  auto& entries = store_.entries();
  if (entries.size() != m_.size()) throw ContractError("AdamW: parameter store changed after construction");
  for (const auto& e : entries) {
    if (!e.value.has_grad()) continue;
    for (double g : e.value.grad()) {
      if (!std::isfinite(g)) {
        ++rejected_;
        return false;
      }
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    auto p = e.value.mutable_data();
    std::span<const double> g = e.value.has_grad() ? e.value.grad() : std::span<const double>{};
    auto& m = m_[k];
    auto& v = v_[k];
    const double shrink = e.decay ? 1.0 - lr * cfg_.weight_decay : 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      p[i] *= shrink;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
  return true;
}

GlobalEmbeddings encode_global(const Model& model, const std::vector<PairedSample>& samples,
                               std::size_t chunk) {
  NoGradScope no_grad;
  std::vector<double> img, txt;
  std::size_t d = 0;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto gi = model.image().encode(image_batch(samples, idx)).global;
    auto gt = model.text().encode(token_batch(samples, idx)).global;
    d = gi.dim(1);
    img.insert(img.end(), gi.data().begin(), gi.data().end());
    txt.insert(txt.end(), gt.data().begin(), gt.data().end());
  }
  return {Tensor::from({samples.size(), d}, std::move(img)), Tensor::from({samples.size(), d}, std::move(txt))};
}

RetrievalScores retrieval_recall(const Tensor& image_global, const Tensor& text_global,
                                 std::size_t gallery) {
  if (image_global.rank() != 2 || image_global.shape() != text_global.shape()) {
    throw DimensionError("retrieval_recall: " + shape_str(image_global.shape()) + " vs " +
                         shape_str(text_global.shape()));
  }
  const std::size_t n = image_global.dim(0), d = image_global.dim(1);
  if (gallery < 2 || n < gallery) throw BatchError("retrieval_recall: need at least one gallery of >= 2 pairs");
  const auto a = image_global.data();
  const auto b = text_global.data();
  std::size_t i1 = 0, i5 = 0, t1 = 0, t5 = 0, queries = 0;
  std::vector<double> sim(gallery * gallery);
  for (std::size_t g0 = 0; g0 + gallery <= n; g0 += gallery) {
    for (std::size_t i = 0; i < gallery; ++i) {
      for (std::size_t j = 0; j < gallery; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += a[(g0 + i) * d + k] * b[(g0 + j) * d + k];
        sim[i * gallery + j] = s;
      }
    }
    for (std::size_t q = 0; q < gallery; ++q) {
      std::size_t rank_i = 0, rank_t = 0;
      const double own = sim[q * gallery + q];
      for (std::size_t o = 0; o < gallery; ++o) {
        if (o == q) continue;
        rank_i += sim[q * gallery + o] >= own;
        rank_t += sim[o * gallery + q] >= own;
      }
      i1 += rank_i == 0;
      i5 += rank_i < 5;
      t1 += rank_t == 0;
      t5 += rank_t < 5;
      ++queries;
    }
  }
  const double q = static_cast<double>(queries);
  return {static_cast<double>(i1) / q, static_cast<double>(i5) / q, static_cast<double>(t1) / q,
          static_cast<double>(t5) / q};
}

double token_matching_accuracy(const Model& model, const std::vector<PairedSample>& samples,
                               std::size_t chunk) {
  NoGradScope no_grad;
  std::size_t total = 0, correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    TokenBatch tokens = token_batch(samples, idx);
    Tensor img = model.image().encode(image_batch(samples, idx)).stages[kNumStages - 1];
    Tensor txt = model.text().encode(tokens).stages[kNumStages - 1];
    const std::size_t l1 = img.dim(1), l2 = txt.dim(1), d = img.dim(2);
    Tensor img_flat = ops::reshape(img, {idx.size() * l1, d});
    Tensor txt_flat = ops::reshape(txt, {idx.size() * l2, d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& truth = samples[idx[i]].truth;
      auto positions = matchable_positions(tokens, i);
      if (positions.empty()) continue;
      auto assignment = hungarian(cost_matrix(sample_cosine(img_flat, txt_flat, tokens, i, l1, positions)));
      for (std::size_t s = 0; s < truth.size(); ++s) {
        if (truth[s] < 0) continue;
        ++total;
        const long c = assignment.column_of(s);
        correct += c >= 0 && static_cast<long>(positions[static_cast<std::size_t>(c)]) == truth[s];
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double chance_token_accuracy(const std::vector<PairedSample>& samples, std::size_t trials,
                             std::uint64_t seed) {
  if (samples.empty() || trials == 0) throw BatchError("chance_token_accuracy: nothing to sample");
  Rng rng(seed);
  std::size_t total = 0, correct = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto& s = samples[t % samples.size()];
    const std::size_t m = s.text.size() - 2;  // name tokens between BOS and EOS
    if (m == 0) continue;
    auto assignment = random_assignment(s.truth.size(), m, rng);
    for (std::size_t slot = 0; slot < s.truth.size(); ++slot) {
      if (s.truth[slot] < 0) continue;
      ++total;
      const long c = assignment.column_of(slot);
      correct += c >= 0 && c + 1 == s.truth[slot];
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double chance_recall(std::size_t gallery, std::size_t k, std::size_t trials, std::uint64_t seed) {
  if (gallery < 2 || k == 0 || trials == 0) throw BatchError("chance_recall: invalid gallery or trial count");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t hits = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const double own = unit(rng);
    std::size_t rank = 0;
    for (std::size_t o = 1; o < gallery; ++o) rank += unit(rng) >= own;
    hits += rank < k;
  }
  return static_cast<double>(hits) / static_cast<double>(trials);
}

RetrievalReport evaluate(const Model& model, const std::vector<PairedSample>& heldout,
                         const EvalConfig& cfg) {
  RetrievalReport report;
  auto emb = encode_global(model, heldout);
  report.retrieval = retrieval_recall(emb.image, emb.text, cfg.gallery_size);
  report.gallery_size = cfg.gallery_size;
  report.queries = heldout.size() / cfg.gallery_size * cfg.gallery_size;
  report.token_accuracy = token_matching_accuracy(model, heldout);
  return report;
}

Splits make_splits(const TrainConfig& config) {
  TrainConfig c = config;
  c.validate();
  ConceptWorld world(c.world);
  auto train = generate(world, c.samples, c.data_seed);
  auto heldout = generate(world, c.eval.heldout_samples, c.eval.heldout_seed);
  return {std::move(world), std::move(train), std::move(heldout)};
}

TrainResult train(const TrainConfig& config_in, const TrainOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  TrainConfig cfg = config_in;
  cfg.validate();
  if (cfg.data_seed == cfg.eval.heldout_seed) {
    throw ConfigError("train.data_seed and eval.heldout_seed must differ so the splits are disjoint");
  }
  Splits splits = make_splits(cfg);

  TrainResult result;
  result.model = std::make_unique<Model>(cfg, stream_seed(cfg.seed, Stream::kInit));
  Model& model = *result.model;
  AdamW optimizer(model.params(), cfg.optimizer);

  const std::size_t steps_per_epoch = cfg.samples / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  Rng shuffle_rng(stream_seed(cfg.seed, Stream::kShuffle));

  std::ofstream metrics, evals;
  const bool write = !options.out_dir.empty();
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    std::ofstream(options.out_dir / "config.resolved.json") << config_to_json(cfg);
    metrics.open(options.out_dir / "metrics.csv", std::ios::trunc);
    evals.open(options.out_dir / "eval.csv", std::ios::trunc);
    if (!metrics || !evals) throw InputError("cannot write into " + options.out_dir.string());
    metrics << kMetricsHeader << '\n';
    evals << "epoch,i2t_r1,i2t_r5,t2i_r1,t2i_r5,token_accuracy,target_entropy\n";
  }
  auto save = [&](std::size_t epoch, std::size_t step) {
    if (write) {
      save_checkpoint(options.out_dir / "checkpoint.json", model,
                      {{"epoch", std::to_string(epoch)}, {"step", std::to_string(step)}});
    }
  };

  // Parameters as they were before the most recent update: the newest values
  // whose forward pass was still finite.
  std::vector<Buffer> last_good;
  auto diverge = [&](std::size_t epoch, std::size_t step, const std::string& why) {
    auto& entries = model.params().entries();
    for (std::size_t i = 0; i < last_good.size(); ++i) {
      std::copy(last_good[i].begin(), last_good[i].end(), entries[i].value.mutable_data().begin());
    }
    save(epoch, step);
    throw DivergenceError(why + " at epoch " + std::to_string(epoch) + ", step " +
                          std::to_string(step) + "; last good parameters saved");
  };

  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = cfg.labels.phase_at(epoch);
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      std::span<const std::size_t> idx(order.data() + b * cfg.batch_size, cfg.batch_size);
      ImageBatch images = image_batch(splits.train, idx);
      TokenBatch tokens = token_batch(splits.train, idx);
      const double lr = lr_at(step, total_steps, cfg.optimizer);

      Tape tape;
      Tensor loss;
      LossBreakdown parts;
      try {
        TapeScope scope(tape);
        StageEmbeddings img = model.image().encode(images);
        StageEmbeddings txt = model.text().encode(tokens);
        for (const Tensor* t : {&img.stages[kNumStages - 1], &txt.stages[kNumStages - 1],
                                &img.global, &txt.global}) {
          auto v = t->data();
          if (!std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); })) {
            diverge(epoch, step, "non-finite activations");
          }
        }
        SimilarityLogits logits = similarity_logits(img.global, txt.global, model.log_tau());
        InstanceTargets targets = targets_for_epoch(logits, epoch, cfg.labels, cfg.importance);
        rec.target_entropy += targets.i2t.mean_entropy();
        Tensor inst = infonce(logits, targets.i2t, targets.t2i);
        parts.inst = inst.item();

        Tensor token;
        if (cfg.weights.beta > 0.0) {
          auto tl = token_loss(img.stages[kNumStages - 1], txt.stages[kNumStages - 1], tokens);
          token = tl.loss;
        } else {
          NoGradScope monitor_only;
          auto tl = token_loss(img.stages[kNumStages - 1], txt.stages[kNumStages - 1], tokens);
          if (tl.active()) parts.token = tl.loss.item();
        }
        if (token.defined()) parts.token = token.item();

        Tensor mlm;
        if (cfg.weights.gamma > 0.0) {
          auto masked = apply_masking(tokens, cfg.masking, stream_seed(cfg.seed, Stream::kMasking, step));
          StageEmbeddings mtxt = model.text().encode(masked.masked);
          MlmTerm text_term = mlm_text_loss(mtxt.stages[kNumStages - 1], masked, model.text_head());
          MlmTerm fused_term = mlm_fused_loss(img.stages, mtxt.stages, masked, model.fusion());
          if (text_term.active() && fused_term.active()) {
            mlm = mlm_loss(text_term.loss, fused_term.loss);
            parts.mlm_text = text_term.loss.item();
            parts.mlm_fuse = fused_term.loss.item();
          }
        }
        loss = total_loss(inst, token, mlm, cfg.weights);
      } catch (const DomainError& e) {
        // The corpus is validated up front, so a domain failure here comes
        // from overflowed activations.
        diverge(epoch, step, std::string("numerical failure (") + e.what() + ")");
      }
      parts.total = loss.item();
      if (!std::isfinite(parts.total)) diverge(epoch, step, "non-finite loss");
      model.params().zero_grad();
      tape.backward(loss);
      last_good.resize(model.params().entries().size());
      for (std::size_t i = 0; i < last_good.size(); ++i) {
        auto values = model.params().entries()[i].value.data();
        last_good[i].assign(values.begin(), values.end());
      }
      if (!optimizer.step(lr) && options.log) {
        *options.log << "step " << step << ": non-finite gradient, update skipped\n";
      }
      clamp_log_temperature(model.log_tau());

      rec.loss.total += parts.total;
      rec.loss.inst += parts.inst;
      rec.loss.token += parts.token;
      rec.loss.mlm_text += parts.mlm_text;
      rec.loss.mlm_fuse += parts.mlm_fuse;
      rec.lr = lr;
    }
    const double k = static_cast<double>(steps_per_epoch);
    rec.loss.total /= k;
    rec.loss.inst /= k;
    rec.loss.token /= k;
    rec.loss.mlm_text /= k;
    rec.loss.mlm_fuse /= k;
    rec.target_entropy /= k;
    rec.step = step;
    rec.tau = model.tau();
    if (options.eval_each_epoch || epoch + 1 == cfg.epochs) {
      rec.eval = evaluate(model, splits.heldout, cfg.eval);
    }

    if (write) {
      metrics << rec.epoch << ',' << rec.step << ',' << format_real(rec.lr) << ',' << format_real(rec.tau)
              << ',' << format_real(rec.loss.total) << ',' << format_real(rec.loss.inst) << ','
              << format_real(rec.loss.token) << ',' << format_real(rec.loss.mlm_text) << ','
              << format_real(rec.loss.mlm_fuse) << ',' << phase_name(rec.phase) << '\n';
      metrics.flush();
      if (options.eval_each_epoch || epoch + 1 == cfg.epochs) {
        const auto& r = rec.eval.retrieval;
        evals << rec.epoch << ',' << format_real(r.i2t_r1) << ',' << format_real(r.i2t_r5) << ','
              << format_real(r.t2i_r1) << ',' << format_real(r.t2i_r5) << ','
              << format_real(rec.eval.token_accuracy) << ',' << format_real(rec.target_entropy) << '\n';
        evals.flush();
      }
    }
    if (options.log) {
      *options.log << "epoch " << epoch << " [" << phase_name(rec.phase) << "] loss " << rec.loss.total
                   << " inst " << rec.loss.inst << " token " << rec.loss.token << " mlm "
                   << rec.loss.mlm_text << "/" << rec.loss.mlm_fuse << " tau " << rec.tau
                   << " | i2t R@1 " << rec.eval.retrieval.i2t_r1 << " token acc "
                   << rec.eval.token_accuracy << std::endl;
    }
    result.epochs.push_back(rec);
  }
  save(cfg.epochs, step);
  result.final_eval = result.epochs.back().eval;
  result.rejected_steps = optimizer.rejected_steps();
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace lightclip
