#include "lightclip_cli/commands.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lightclip/config.hpp"
#include "lightclip/errors.hpp"
#include "lightclip/hungarian.hpp"
#include "lightclip/instance_alignment.hpp"
#include "lightclip/instrumentation.hpp"
#include "lightclip/model.hpp"
#include "lightclip/trainer.hpp"

namespace lightclip::cli {

namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

void print_matrix(std::ostream& out, std::size_t n, std::span<const double> values) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << format_real(values[i * n + j]);
    out << '\n';
  }
}

TrainConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    TrainConfig c;
    c.validate();
    return c;
  }
  return load_config(path);
}

int cmd_train(const std::string& config_path, const std::optional<std::uint64_t>& seed,
              std::string out_dir, std::ostream& out) {
  TrainConfig cfg = config_or_default(config_path);
  if (seed) cfg.seed = *seed;
  if (out_dir.empty()) {
    if (const char* env = std::getenv("LIGHTCLIP_OUT_DIR")) out_dir = env;
  }
  if (out_dir.empty()) throw ConfigError("train needs --out or LIGHTCLIP_OUT_DIR");
  TrainOptions options;
  options.out_dir = out_dir;
  options.log = &out;
  auto result = train(cfg, options);
  const auto& r = result.final_eval;
  out << "done in " << std::fixed << std::setprecision(1) << result.seconds << std::defaultfloat
      << " s: i2t R@1 " << format_real(r.retrieval.i2t_r1) << ", token accuracy "
      << format_real(r.token_accuracy) << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path, std::string report_path,
             std::ostream& out) {
  TrainConfig cfg = config_or_default(config_path);
  auto model = load_checkpoint(checkpoint, cfg);
  Splits splits = make_splits(cfg);

  instrumentation::reset();
  auto emb = encode_global(*model, splits.heldout);
  RetrievalScores scores = retrieval_recall(emb.image, emb.text, cfg.eval.gallery_size);
  const auto inference = instrumentation::snapshot();
  const double token_acc = token_matching_accuracy(*model, splits.heldout);
  const auto after = instrumentation::snapshot();

  const double chance_r1 = chance_recall(cfg.eval.gallery_size, 1, cfg.eval.chance_trials, cfg.eval.heldout_seed);
  const double chance_r5 = chance_recall(cfg.eval.gallery_size, 5, cfg.eval.chance_trials, cfg.eval.heldout_seed);
  const double chance_tok = chance_token_accuracy(splits.heldout, cfg.eval.chance_trials, cfg.eval.heldout_seed);

  struct Row {
    const char* name;
    double value;
    double chance;
  };
  const Row rows[] = {{"i2t_r1", scores.i2t_r1, chance_r1},   {"i2t_r5", scores.i2t_r5, chance_r5},
                      {"t2i_r1", scores.t2i_r1, chance_r1},   {"t2i_r5", scores.t2i_r5, chance_r5},
                      {"token_accuracy", token_acc, chance_tok}};
  out << std::left << std::setw(16) << "metric" << std::setw(24) << "value" << "chance\n";
  nlohmann::json report;
  for (const auto& r : rows) {
    out << std::left << std::setw(16) << r.name << std::setw(24) << format_real(r.value)
        << format_real(r.chance) << '\n';
    report[r.name] = r.value;
    report["chance_" + std::string(r.name)] = r.chance;
  }
  out << "gallery " << cfg.eval.gallery_size << ", queries "
      << splits.heldout.size() / cfg.eval.gallery_size * cfg.eval.gallery_size
      << ", fusion calls " << after.fusion_calls << ", token-loss calls " << after.token_loss_calls
      << ", retrieval-path matching calls " << inference.hungarian_calls << '\n';
  report["gallery_size"] = cfg.eval.gallery_size;
  report["fusion_calls"] = after.fusion_calls;
  report["token_loss_calls"] = after.token_loss_calls;
  report["retrieval_hungarian_calls"] = inference.hungarian_calls;

  if (report_path.empty()) report_path = (fs::path(checkpoint).parent_path() / "report.json").string();
  std::ofstream file(report_path, std::ios::trunc);
  file << report.dump(2) << '\n';
  if (!file) throw InputError("cannot write report " + report_path);
  out << "report written to " << report_path << '\n';
  return kExitOk;
}

int cmd_match(const std::string& csv, std::ostream& out) {
  auto rows = read_csv_matrix(csv);
  std::vector<double> values;
  for (const auto& r : rows) values.insert(values.end(), r.begin(), r.end());
  CostMatrix costs(rows.size(), rows.front().size(), std::move(values));
  Assignment a = hungarian(costs);
  for (const auto& [r, c] : a.pairs) out << r << "→" << c << ' ';
  out << "total=" << format_real(a.total_cost) << '\n';
  return kExitOk;
}

int cmd_labels(const std::string& csv, double delta, std::size_t epoch, const std::string& config_path,
               std::ostream& out) {
  TrainConfig cfg = config_or_default(config_path);
  LabelSchedule schedule = cfg.labels;
  schedule.delta = delta;
  schedule.validate();
  auto rows = read_csv_matrix(csv);
  const std::size_t n = rows.size();
  if (rows.front().size() != n) {
    throw InputError("logits must be square, got " + std::to_string(n) + "x" + std::to_string(rows.front().size()));
  }
  if (n < 2) throw InputError("logits need at least two rows");
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  Tensor logits = Tensor::from({n, n}, std::move(flat));

  auto one_hot = one_hot_targets(n);
  auto smoothed = smooth_targets(one_hot, delta);
  auto importance = importance_targets(logits, delta, cfg.importance);
  const auto phase = schedule.phase_at(epoch);
  out << "[one-hot]\n";
  print_matrix(out, n, one_hot.values());
  out << "[smoothed]\n";
  print_matrix(out, n, smoothed.values());
  out << "[importance-aware]\n";
  print_matrix(out, n, importance.values());
  out << "phase=" << phase_name(phase) << '\n';
  return kExitOk;
}

}  // namespace

std::vector<std::vector<double>> read_csv_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<double> row;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      auto cell = trim(rest.substr(0, comma));
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw InputError(path + ":" + std::to_string(lineno) + ": '" + std::string(cell) +
                         "' is not a finite real");
      }
      row.push_back(v);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw InputError(path + ":" + std::to_string(lineno) + ": ragged row with " + std::to_string(row.size()) +
                       " entries, expected " + std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError(path + ": empty matrix");
  return rows;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Toy contrastive image-text pre-training with token alignment and fused masked LM"};
  app.require_subcommand(1);

  std::string config, out_dir, checkpoint, report, csv;
  std::optional<std::uint64_t> seed;
  double delta = 0.2;
  std::size_t epoch = 0;

  auto* train_cmd = app.add_subcommand("train", "Train on the synthetic corpus");
  train_cmd->add_option("--config", config, "JSON run configuration (defaults when omitted)");
  train_cmd->add_option("--seed", seed, "Seed for initialization, shuffling and masking");
  train_cmd->add_option("--out", out_dir, "Output directory (or LIGHTCLIP_OUT_DIR)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint.json written by train")->required();
  eval_cmd->add_option("--config", config, "Configuration the checkpoint was trained with");
  eval_cmd->add_option("--report", report, "Report path (default: report.json beside the checkpoint)");

  auto* match_cmd = app.add_subcommand("match", "Minimum-cost assignment of a cost matrix");
  match_cmd->add_option("--cost-csv", csv, "Rectangular CSV of costs")->required();

  auto* labels_cmd = app.add_subcommand("labels", "Print the three contrastive target matrices");
  labels_cmd->add_option("--logits-csv", csv, "Square CSV of image-to-text logits")->required();
  labels_cmd->add_option("--delta", delta, "Softening strength in [0, 1]");
  labels_cmd->add_option("--epoch", epoch, "Epoch whose schedule phase is reported");
  labels_cmd->add_option("--config", config, "Configuration supplying the schedule");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }

  try {
    if (*train_cmd) return cmd_train(config, seed, out_dir, out);
    if (*eval_cmd) return cmd_eval(checkpoint, config, report, out);
    if (*match_cmd) return cmd_match(csv, out);
    if (*labels_cmd) return cmd_labels(csv, delta, epoch, config, out);
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace lightclip::cli
