#include <benchmark/benchmark.h>

#include <random>

#include "lightclip/hungarian.hpp"
#include "lightclip/instance_alignment.hpp"
#include "lightclip/masked_language.hpp"
#include "lightclip/model.hpp"
#include "lightclip/token_alignment.hpp"
#include "lightclip/trainer.hpp"

using namespace lightclip;

namespace {

CostMatrix random_costs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::vector<double> v(n * n);
  for (auto& x : v) x = u(rng);
  return CostMatrix(n, n, std::move(v));
}

void BM_Hungarian(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto costs = random_costs(n, 1);
  for (auto _ : state) benchmark::DoNotOptimize(hungarian(costs).total_cost);
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Hungarian)->RangeMultiplier(2)->Range(4, 128)->Complexity(benchmark::oNCubed);

void BM_BruteForce8(benchmark::State& state) {
  auto costs = random_costs(8, 2);
  for (auto _ : state) benchmark::DoNotOptimize(brute_force_match(costs).total_cost);
}
BENCHMARK(BM_BruteForce8);

struct Fixture {
  TrainConfig cfg;
  Splits splits;
  Model model;
  std::vector<std::size_t> idx;

  Fixture() : cfg(validated()), splits(make_splits(cfg)), model(cfg, cfg.seed), idx(cfg.batch_size) {
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  static TrainConfig validated() {
    TrainConfig c;
    c.samples = 256;
    c.validate();
    return c;
  }
};

void BM_EncodeBatch(benchmark::State& state) {
  Fixture f;
  auto images = image_batch(f.splits.train, f.idx);
  auto tokens = token_batch(f.splits.train, f.idx);
  for (auto _ : state) {
    NoGradScope off;
    benchmark::DoNotOptimize(f.model.image().encode(images).global.data().data());
    benchmark::DoNotOptimize(f.model.text().encode(tokens).global.data().data());
  }
}
BENCHMARK(BM_EncodeBatch)->Unit(benchmark::kMillisecond);

// Forward and backward of the full objective for one batch of 64.
void BM_TrainStep(benchmark::State& state) {
  Fixture f;
  auto images = image_batch(f.splits.train, f.idx);
  auto tokens = token_batch(f.splits.train, f.idx);
  std::uint64_t step = 0;
  for (auto _ : state) {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      auto img = f.model.image().encode(images);
      auto txt = f.model.text().encode(tokens);
      auto logits = similarity_logits(img.global, txt.global, f.model.log_tau());
      auto targets = targets_for_epoch(logits, 0, f.cfg.labels, f.cfg.importance);
      auto inst = infonce(logits, targets.i2t, targets.t2i);
      auto token = token_loss(img.stages[kNumStages - 1], txt.stages[kNumStages - 1], tokens).loss;
      auto masked = apply_masking(tokens, f.cfg.masking, ++step);
      auto mtxt = f.model.text().encode(masked.masked);
      auto text_term = mlm_text_loss(mtxt.stages[kNumStages - 1], masked, f.model.text_head());
      auto fused_term = mlm_fused_loss(img.stages, mtxt.stages, masked, f.model.fusion());
      loss = total_loss(inst, token, mlm_loss(text_term.loss, fused_term.loss), f.cfg.weights);
    }
    f.model.params().zero_grad();
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
  Fixture f;
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(f.model, f.splits.heldout, f.cfg.eval).token_accuracy);
}
BENCHMARK(BM_Evaluate)->Unit(benchmark::kMillisecond)->Iterations(2);

}  // namespace

BENCHMARK_MAIN();
