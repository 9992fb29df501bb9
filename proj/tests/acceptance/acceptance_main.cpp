// Acceptance checks: one PASS/FAIL line per criterion. Criteria 7 and 9 train
// the default configuration several times and take tens of minutes on one
// core; pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "../test_util.hpp"
#include "lightclip/grad_check.hpp"
#include "lightclip/hungarian.hpp"
#include "lightclip/instance_alignment.hpp"
#include "lightclip/instrumentation.hpp"
#include "lightclip/masked_language.hpp"
#include "lightclip/ops.hpp"
#include "lightclip/token_alignment.hpp"
#include "lightclip/trainer.hpp"

using namespace lightclip;
using lightclip::testing::random_tensor;
using lightclip::testing::random_unit_rows;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

// Accumulates named sub-checks into one verdict line.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      failures_ += (failures_.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& s) { notes_ += (notes_.empty() ? "" : ", ") + s; }
  Verdict verdict() const {
    return {pass_, failures_.empty() ? notes_ : "failed: " + failures_ + (notes_.empty() ? "" : " | " + notes_)};
  }

 private:
  bool pass_ = true;
  std::string failures_, notes_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Verdict matching_oracle() {
  Checks c;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::uniform_int_distribution<std::size_t> side(1, 8);
  const int trials = 600;
  double worst = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int t = 0; t < trials; ++t) {
    // Every fifth matrix is a full 8x8; the rest have random shapes.
    std::size_t r = t % 5 == 0 ? 8 : side(rng), k = t % 5 == 0 ? 8 : side(rng);
    if (r > k) std::swap(r, k);
    std::vector<double> v(r * k);
    for (auto& x : v) x = u(rng);
    CostMatrix m(r, k, v);
    const double gap = std::abs(hungarian(m).total_cost - brute_force_match(m).total_cost);
    worst = std::max(worst, gap);
  }
  const double secs = seconds_since(t0);
  c.expect(worst <= 1e-12, "max gap " + fmt(worst));
  c.expect(secs < 5.0, "took " + fmt(secs) + " s");
  c.note(std::to_string(trials) + " matrices up to 8x8, max |hungarian - brute| " + fmt(worst) + ", " +
         fmt(secs, 3) + " s");
  return c.verdict();
}

TokenBatch regular_batch(std::size_t n, std::size_t names, std::size_t vocab_size) {
  std::vector<std::vector<std::int32_t>> seqs(n);
  for (std::size_t i = 0; i < n; ++i) {
    seqs[i].push_back(vocab::kBos);
    for (std::size_t k = 0; k < names; ++k) {
      seqs[i].push_back(static_cast<std::int32_t>(vocab::kFirstRegular + (i * 7 + k) % (vocab_size - 4)));
    }
    seqs[i].push_back(vocab::kEos);
  }
  return TokenBatch::from_sequences(seqs, names + 4);
}

Verdict gradient_integrity() {
  Checks c;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    c.expect(r.passed && r.max_rel_error <= 1e-5, name + " rel error " + fmt(r.max_rel_error));
    c.note(name + " " + fmt(r.max_rel_error, 2));
  };

  std::mt19937_64 rng(7);
  Tensor raw_v = random_tensor({6, 8}, rng), raw_t = random_tensor({6, 8}, rng);
  Tensor log_tau = Tensor::from({1}, {std::log(0.2)}, true);
  const char* names[] = {"inst/one-hot", "inst/smoothed", "inst/importance"};
  for (int kind = 0; kind < 3; ++kind) {
    auto logits = [&] {
      return similarity_logits(ops::l2_normalize(raw_v, 1), ops::l2_normalize(raw_t, 1), log_tau);
    };
    TargetDistribution ti, tt;
    {
      // Targets are constants of the loss, taken at the base point.
      NoGradScope constant;
      auto base = logits();
      if (kind == 0) ti = tt = one_hot_targets(6);
      if (kind == 1) ti = tt = smooth_targets(one_hot_targets(6), 0.2);
      if (kind == 2) {
        ti = importance_targets(base.i2t, 0.2);
        tt = importance_targets(base.t2i, 0.2);
      }
    }
    record(names[kind], grad_check([&] { return infonce(logits(), ti, tt); }, {raw_v, raw_t, log_tau}));
  }

  {
    Tensor img = random_tensor({3, 6, 5}, rng), txt = random_tensor({3, 6, 5}, rng);
    auto tokens = TokenBatch::from_sequences({{2, 5, 6, 7, 3}, {2, 8, 3}, {2, 9, 10, 11, 12, 3}});
    std::vector<Assignment> frozen;
    {
      NoGradScope off;
      for (auto& m : token_loss(img, txt, tokens).matches) frozen.push_back(m.assignment);
    }
    record("token", grad_check([&] { return token_loss(img, txt, tokens, &frozen).loss; }, {img, txt}));
  }

  {
    auto tokens = regular_batch(3, 5, 16);
    MaskingOptions opt;
    opt.probability = 0.5;
    opt.vocab_size = 16;
    auto m = apply_masking(tokens, opt, 4);
    ParameterStore store;
    Rng init(4);
    auto head = VocabHead::create(store, "h", 6, 16, init);
    Tensor emb = random_tensor({3, 9, 6}, rng);
    record("mlm/text", grad_check([&] { return mlm_text_loss(emb, m, head).loss; }, {emb, head.w, head.b}));
  }

  {
    ParameterStore store;
    Rng init(11);
    FusionModule fusion(FusionConfig{{2, 3}, 2, 8}, {8, 8, 8, 8}, 8, 16, store, init);
    auto tokens = regular_batch(2, 4, 16);
    MaskingOptions opt;
    opt.probability = 0.5;
    opt.vocab_size = 16;
    auto m = apply_masking(tokens, opt, 10);
    std::array<Tensor, kNumStages> img, txt;
    for (std::size_t s = 0; s < kNumStages; ++s) {
      img[s] = random_tensor({2, 5, 8}, rng);
      txt[s] = random_tensor({2, 8, 8}, rng);
    }
    const auto& st = fusion.stage(0);
    record("mlm/fused", grad_check([&] { return mlm_fused_loss(img, txt, m, fusion).loss; },
                                   {img[1], img[2], txt[1], txt[2], st.conv_w, st.attn.wq, st.attn.wk,
                                    st.attn.wv, st.attn.wo, st.out_w, fusion.head().w}));
  }
  return c.verdict();
}

Verdict target_laws() {
  Checks c;
  std::mt19937_64 rng(31);
  std::normal_distribution<double> normal(0.0, 3.0);
  const std::size_t n = 10, rows = 1000;
  double worst_sum = 0.0;
  std::size_t diag_misses = 0, order_misses = 0, onehot_misses = 0;
  for (double delta : {0.0, 0.2, 0.5, 1.0}) {
    auto smoothed = smooth_targets(one_hot_targets(n), delta);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (double v : smoothed.row(i)) s += v;
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      if (delta == 0.0) {
        for (std::size_t j = 0; j < n; ++j) onehot_misses += smoothed.at(i, j) != (i == j ? 1.0 : 0.0);
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> logits(n);
      for (auto& x : logits) x = normal(rng);
      const std::size_t diag = r % n;
      auto y = importance_targets(logits, diag, delta);
      worst_sum = std::max(worst_sum, std::abs(std::accumulate(y.begin(), y.end(), 0.0) - 1.0));
      diag_misses += y[diag] != 1.0 - delta;
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
          if (a == diag || b == diag) continue;
          // Strict logit order must give weakly ordered mass; strictly when delta > 0.
          if (logits[a] > logits[b]) order_misses += delta > 0.0 ? !(y[a] > y[b]) : !(y[a] >= y[b]);
        }
      }
      if (delta == 0.0) {
        for (std::size_t j = 0; j < n; ++j) onehot_misses += y[j] != (j == diag ? 1.0 : 0.0);
      }
    }
  }
  c.expect(worst_sum <= 1e-9, "row sum off by " + fmt(worst_sum));
  c.expect(diag_misses == 0, std::to_string(diag_misses) + " diagonals differ from 1 - delta");
  c.expect(order_misses == 0, std::to_string(order_misses) + " negative pairs out of order");
  c.expect(onehot_misses == 0, std::to_string(onehot_misses) + " entries differ from one-hot at delta 0");
  c.note("1000 rows x 4 deltas, max |row sum - 1| " + fmt(worst_sum) + ", diagonal exact, ordering kept");
  return c.verdict();
}

Verdict schedule() {
  Checks c;
  LabelSchedule s;
  s.epochs = 32;
  s.r1 = 0.33;
  s.r2 = 0.66;
  std::vector<std::size_t> changes;
  for (std::size_t e = 1; e < s.epochs; ++e) {
    if (s.phase_at(e) != s.phase_at(e - 1)) changes.push_back(e);
  }
  c.expect(s.phase_at(0) == LabelPhase::kOneHot, "epoch 0 is not one-hot");
  c.expect(changes == std::vector<std::size_t>{11, 22}, "changes at other epochs");
  c.expect(s.phase_at(31) == LabelPhase::kImportanceAware, "epoch 31 is not importance-aware");
  std::string at;
  for (auto e : changes) at += (at.empty() ? "" : ",") + std::to_string(e);
  c.note("phase changes at epochs " + at);
  return c.verdict();
}

Verdict masking_statistics() {
  Checks c;
  auto tokens = regular_batch(12500, 8, 512);
  MaskingOptions opt;
  auto m = apply_masking(tokens, opt, 1234);
  std::size_t eligible = 0, chosen = 0;
  std::array<double, 3> kinds{};
  for (std::size_t f = 0; f < tokens.ids.size(); ++f) {
    eligible += !tokens.pad[f] && !vocab::is_special(tokens.ids[f]);
    if (!m.chosen(f)) continue;
    ++chosen;
    kinds[static_cast<std::size_t>(m.kinds[f]) - 1] += 1.0;
  }
  // Chosen vs not chosen, one degree of freedom: 10.828 at 0.001.
  const double e1 = 0.15 * eligible, e0 = 0.85 * eligible;
  const double chi_choice = std::pow(chosen - e1, 2) / e1 + std::pow((eligible - chosen) - e0, 2) / e0;
  // Masked / random / kept, two degrees of freedom: 13.816 at 0.001.
  const std::array<double, 3> p{0.8, 0.1, 0.1};
  double chi_kind = 0.0;
  for (std::size_t k = 0; k < 3; ++k) chi_kind += std::pow(kinds[k] - p[k] * chosen, 2) / (p[k] * chosen);
  c.expect(eligible == 100000, "eligible count " + std::to_string(eligible));
  c.expect(chi_choice < 10.828, "choice chi2 " + fmt(chi_choice));
  c.expect(chi_kind < 13.816, "kind chi2 " + fmt(chi_kind));
  c.note("chosen " + std::to_string(chosen) + "/" + std::to_string(eligible) + " chi2 " + fmt(chi_choice) +
         " (crit 10.828), kinds " + fmt(kinds[0], 6) + "/" + fmt(kinds[1], 6) + "/" + fmt(kinds[2], 6) +
         " chi2 " + fmt(chi_kind) + " (crit 13.816)");
  return c.verdict();
}

Verdict loss_anchors() {
  Checks c;
  SimilarityLogits uniform;
  uniform.i2t = Tensor::full({4, 4}, 0.7);
  uniform.t2i = Tensor::full({4, 4}, 0.7);
  const double inst = infonce(uniform, one_hot_targets(4)).item();
  c.expect(std::abs(inst - std::log(4.0)) <= 1e-9, "InfoNCE " + fmt(inst, 12));

  auto tokens = regular_batch(16, 6, 512);
  MaskingOptions opt;
  opt.vocab_size = 512;
  auto m = apply_masking(tokens, opt, 9);
  ParameterStore store;
  Rng init(2);
  auto head = VocabHead::create(store, "h", 8, 512, init);
  for (auto& v : head.w.mutable_data()) v = 0.0;
  for (auto& v : head.b.mutable_data()) v = 0.0;
  std::mt19937_64 rng(2);
  auto term = mlm_text_loss(random_tensor({16, 10, 8}, rng, 1.0, false), m, head);
  const double mlm = term.active() ? term.loss.item() : NAN;
  c.expect(std::abs(mlm - std::log(512.0)) <= 1e-9, "MLM " + fmt(mlm, 12));
  c.note("InfoNCE n=4 " + fmt(inst, 10) + ", MLM V=512 " + fmt(mlm, 10));
  return c.verdict();
}

// Shared by criteria 7, 8 and 9: the default-config run with artifacts.
struct ReferenceRun {
  fs::path dir;
  TrainResult result;
};

fs::path scratch_root() {
  auto root = fs::temp_directory_path() / "lightclip_acceptance";
  fs::create_directories(root);
  return root;
}

ReferenceRun& reference_run() {
  static std::unique_ptr<ReferenceRun> run;
  if (!run) {
    run = std::make_unique<ReferenceRun>();
    run->dir = scratch_root() / "run_a";
    fs::remove_all(run->dir);
    TrainConfig cfg;
    cfg.validate();
    std::cerr << "training default config (seed 0) into " << run->dir << "\n";
    run->result = train(cfg, {run->dir, true, &std::cerr});
  }
  return *run;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

Verdict synthetic_end_to_end() {
  Checks c;
  auto& ref = reference_run();
  TrainConfig cfg;
  cfg.validate();
  const auto heldout = make_splits(cfg).heldout;
  const double r1 = ref.result.final_eval.retrieval.i2t_r1;
  const double acc = ref.result.final_eval.token_accuracy;
  const double chance_r1 = chance_recall(cfg.eval.gallery_size, 1, cfg.eval.chance_trials, 99);
  const double chance_acc = chance_token_accuracy(heldout, cfg.eval.chance_trials, 99);

  c.expect(r1 >= 0.80, "i2t R@1 " + fmt(r1) + " < 0.80");
  c.expect(acc >= 0.70, "token accuracy " + fmt(acc) + " < 0.70");
  c.expect(r1 >= 5.0 * chance_r1, "R@1 below 5x chance");
  c.expect(acc >= 5.0 * chance_acc, "token accuracy below 5x chance");
  c.expect(ref.result.seconds <= 900.0, "runtime " + fmt(ref.result.seconds) + " s");

  // Directional check: instance-only training against the full objective.
  std::vector<double> full{acc}, inst_only;
  for (std::uint64_t seed : {0, 1, 2}) {
    TrainConfig b = cfg;
    b.seed = seed;
    b.weights = {1.0, 0.0, 0.0};
    b.validate();
    std::cerr << "instance-only baseline, seed " << seed << "\n";
    inst_only.push_back(train(b, {{}, false, nullptr}).final_eval.token_accuracy);
    if (seed == 0) continue;
    TrainConfig f = cfg;
    f.seed = seed;
    f.validate();
    std::cerr << "full objective, seed " << seed << "\n";
    full.push_back(train(f, {{}, false, nullptr}).final_eval.token_accuracy);
  }
  const double med_full = median3(full), med_inst = median3(inst_only);
  c.expect(med_inst < med_full, "instance-only median " + fmt(med_inst) + " not below full " + fmt(med_full));

  c.note("R@1 " + fmt(r1) + " (chance " + fmt(chance_r1) + "), token acc " + fmt(acc) + " (chance " +
         fmt(chance_acc) + "), " + fmt(ref.result.seconds, 4) + " s; token acc median full " + fmt(med_full) +
         " [" + fmt(full[0]) + "," + fmt(full[1]) + "," + fmt(full[2]) + "] vs instance-only " + fmt(med_inst) +
         " [" + fmt(inst_only[0]) + "," + fmt(inst_only[1]) + "," + fmt(inst_only[2]) + "]");
  return c.verdict();
}

Verdict inference_purity() {
  Checks c;
  TrainConfig cfg;
  cfg.validate();
  const auto heldout = make_splits(cfg).heldout;
  auto& ref = reference_run();

  instrumentation::reset();
  auto g = encode_global(*ref.result.model, heldout);
  retrieval_recall(g.image, g.text, cfg.eval.gallery_size);
  auto retrieval = instrumentation::snapshot();
  c.expect(retrieval.fusion_calls == 0, "retrieval ran fusion");
  c.expect(retrieval.token_loss_calls == 0, "retrieval ran the token loss");
  c.expect(retrieval.hungarian_calls == 0, "retrieval ran matching");

  // The token-accuracy diagnostic scores embeddings against ground truth
  // with its own matching; it never touches fusion or the matching loss.
  instrumentation::reset();
  evaluate(*ref.result.model, heldout, cfg.eval);
  auto full = instrumentation::snapshot();
  c.expect(full.fusion_calls == 0, "evaluation ran fusion");
  c.expect(full.token_loss_calls == 0, "evaluation ran the token loss");
  c.note("retrieval: fusion " + std::to_string(retrieval.fusion_calls) + ", token loss " +
         std::to_string(retrieval.token_loss_calls) + ", matching " + std::to_string(retrieval.hungarian_calls) +
         "; full evaluate: fusion " + std::to_string(full.fusion_calls) + ", token loss " +
         std::to_string(full.token_loss_calls) + ", diagnostic matchings " + std::to_string(full.hungarian_calls));
  return c.verdict();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Verdict determinism() {
  Checks c;
  auto& ref = reference_run();
  const auto dir_b = scratch_root() / "run_b";
  fs::remove_all(dir_b);
  TrainConfig cfg;
  cfg.validate();
  std::cerr << "second default run (seed 0) into " << dir_b << "\n";
  train(cfg, {dir_b, true, nullptr});
  const auto a = slurp(ref.dir / "metrics.csv"), b = slurp(dir_b / "metrics.csv");
  c.expect(!a.empty() && a == b, "metrics.csv differs");
  c.expect(slurp(ref.dir / "eval.csv") == slurp(dir_b / "eval.csv"), "eval.csv differs");
  c.note("metrics.csv " + std::to_string(a.size()) + " bytes identical across two runs");
  return c.verdict();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lightclip acceptance checks"};
  std::vector<int> only;
  app.add_option("criteria", only, "criterion numbers to run (default: all)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::map<int, std::pair<const char*, std::function<Verdict()>>> criteria{
      {1, {"matching oracle", matching_oracle}},
      {2, {"gradient integrity", gradient_integrity}},
      {3, {"target laws", target_laws}},
      {4, {"label schedule", schedule}},
      {5, {"masking statistics", masking_statistics}},
      {6, {"closed-form anchors", loss_anchors}},
      {7, {"synthetic end-to-end", synthetic_end_to_end}},
      {8, {"inference purity", inference_purity}},
      {9, {"determinism", determinism}},
  };
  const std::set<int> wanted(only.begin(), only.end());
  int failed = 0;
  for (const auto& [id, entry] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Verdict v;
    try {
      v = entry.second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << id << "] " << entry.first << ": " << v.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
