// Command-line surface: dataset generation, training, threshold calibration,
// evaluation, raw-run prediction, and the full multi-repetition experiment.

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ovrn/config.hpp"
#include "ovrn/eval.hpp"
#include "ovrn/model_io.hpp"

namespace {

using namespace ovrn;

ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return parse_config_file(path);
}

void apply_overrides(ExperimentConfig& cfg, const std::string& out_flag,
                     bool seed_set, std::uint64_t seed_flag) {
  if (!out_flag.empty()) cfg.out_dir = out_flag;
  if (const char* env = std::getenv("OVRN_OUT_DIR"); env && *env)
    cfg.out_dir = env;
  if (seed_set) cfg.seed = seed_flag;
}

std::vector<WindowedSample> windows_for_test(const ExperimentConfig& cfg,
                                             const Model<float>& model) {
  std::vector<RawRun> runs;
  if (cfg.dataset == "synthetic") {
    runs = generate_synthetic(cfg.synth).test;
  } else {
    if (cfg.test_csv.empty())
      throw SpecError("evaluate: config has no test_csv and dataset is csv");
    runs = load_runs_csv(cfg.test_csv);
  }
  std::vector<WindowedSample> raw;
  for (const auto& run : runs)
    for (auto& w : window(run, model.spec.window_len, cfg.stride))
      raw.push_back(std::move(w));
  if (!model.norm_stats)
    throw Error("model file carries no normalization statistics; retrain and "
                "save with this build");
  return apply_normalization(std::move(raw), *model.norm_stats);
}

int cmd_gen_synth(const std::string& config_path, const std::string& prefix) {
  auto cfg = load_config_or_default(config_path);
  cfg.synth.validate();
  auto ds = generate_synthetic(cfg.synth);
  const std::string train_path = prefix + "_train.csv";
  const std::string test_path = prefix + "_test.csv";
  save_runs_csv(train_path, ds.train);
  save_runs_csv(test_path, ds.test);
  std::cout << "wrote " << train_path << " (" << ds.train.size()
            << " runs) and " << test_path << " (" << ds.test.size()
            << " runs)\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& model_out,
              const std::string& log_out, bool seed_set,
              std::uint64_t seed_flag) {
  auto cfg = load_config_or_default(config_path);
  apply_overrides(cfg, "", seed_set, seed_flag);
  auto data = prepare_data(cfg);
  const ModelSpec spec = resolve_model_spec(cfg, data);
  auto model = build<float>(spec, cfg.seed);
  TrainConfig tc = cfg.train_cfg;
  tc.seed = cfg.seed;
  auto log = train(model, data.train_windows, tc);
  model.norm_stats = data.stats;
  model.stats_fingerprint = data.stats.fitted_on;
  save_model(model, model_out);
  if (!log_out.empty()) export_train_log(log, log_out);
  std::cout << "trained " << log.epochs.size() << " epochs (stop="
            << log.stop_reason << ", final loss "
            << log.epochs.back().mean_loss << ", accuracy "
            << log.epochs.back().accuracy << ", "
            << log.wall_seconds << "s); model -> " << model_out << "\n";
  return 0;
}

int cmd_calibrate(const std::string& config_path, const std::string& model_path,
                  const std::string& out_path, double quantile_flag,
                  bool quantile_set) {
  auto cfg = load_config_or_default(config_path);
  if (quantile_set) cfg.quantile = quantile_flag;
  auto model = load_model(model_path);
  auto data = prepare_data(cfg);
  if (model.norm_stats &&
      model.norm_stats->fitted_on != data.stats.fitted_on)
    std::cerr << "warning: calibration data fingerprint differs from the one "
                 "the model was trained on\n";
  auto thresholds = calibrate(model, data.train_windows, cfg.quantile);
  save_thresholds(thresholds, out_path);
  std::cout << format_thresholds(thresholds);
  return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& model_path,
                 const std::string& thresholds_path, const std::string& rule_flag,
                 const std::string& out_flag, bool seed_set,
                 std::uint64_t seed_flag) {
  auto cfg = load_config_or_default(config_path);
  apply_overrides(cfg, out_flag, seed_set, seed_flag);
  if (!rule_flag.empty()) cfg.rule = parse_rule_kind(rule_flag);
  if (cfg.out_dir.empty())
    throw SpecError("evaluate: no output directory (flag --out or config "
                    "out_dir or OVRN_OUT_DIR)");
  auto model = load_model(model_path);
  auto test_windows = windows_for_test(cfg, model);

  DecisionThresholds thresholds;
  const DecisionThresholds* thr = nullptr;
  if (cfg.rule == RuleKind::collective) {
    if (thresholds_path.empty())
      throw SpecError("evaluate: the collective rule needs --thresholds");
    thresholds = load_thresholds(thresholds_path);
    thr = &thresholds;
  }
  auto report = evaluate(model, test_windows, cfg.rule, thr,
                         cfg.fixed_threshold);
  report.seed = cfg.seed;
  export_report(report, cfg.out_dir);
  std::cout << "overall_accuracy=" << report.overall_accuracy
            << " UFC=" << report.unknown_rejection_rate << " -> "
            << cfg.out_dir << "\n";
  return 0;
}

int cmd_predict(const std::string& model_path, const std::string& input_path,
                const std::string& out_path, const std::string& thresholds_path,
                const std::string& rule_flag, int stride) {
  auto model = load_model(model_path);
  if (!model.norm_stats)
    throw Error("model file carries no normalization statistics; retrain and "
                "save with this build");
  const RuleKind rule =
      rule_flag.empty() ? RuleKind::collective : parse_rule_kind(rule_flag);
  DecisionThresholds thresholds;
  if (rule == RuleKind::collective) {
    if (thresholds_path.empty())
      throw SpecError("predict: the collective rule needs --thresholds");
    thresholds = load_thresholds(thresholds_path);
  }

  auto runs = load_runs_csv(input_path);
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot open '" + out_path + "' for writing");
  out << "run_id,window_index,winning_state,winning_score,accepted,predicted\n";
  char buf[64];
  for (const auto& run : runs) {
    auto windows = apply_normalization(
        window(run, model.spec.window_len, stride), *model.norm_stats);
    const Eigen::MatrixXf probs = predict_probabilities(model, windows);
    for (std::size_t i = 0; i < windows.size(); ++i) {
      const Eigen::VectorXd row =
          probs.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
      Decision d;
      switch (rule) {
        case RuleKind::collective:
          d = decide(collective_scores(row), thresholds);
          break;
        case RuleKind::softmax_baseline:
          d = decide_softmax_baseline(row);
          break;
        case RuleKind::ovrn_max_baseline:
          d = decide_ovrn_max_baseline(row);
          break;
      }
      std::snprintf(buf, sizeof(buf), "%.17g", d.winning_score);
      out << run.run_id << "," << i << "," << d.winning_class << "," << buf
          << "," << (d.accepted ? 1 : 0) << ","
          << (d.predicted == kUnknownLabel ? "UNKNOWN"
                                           : std::to_string(d.predicted))
          << "\n";
    }
  }
  if (!out) throw IoError("failed while writing '" + out_path + "'");
  return 0;
}

int cmd_experiment(const std::string& config_path, const std::string& out_flag,
                   bool seed_set, std::uint64_t seed_flag) {
  auto cfg = parse_config_file(config_path);
  apply_overrides(cfg, out_flag, seed_set, seed_flag);
  auto result = run_experiment(cfg);
  std::cout << "repetitions=" << result.repetitions
            << " rule=" << result.rule
            << " overall_accuracy=" << result.overall_mean
            << " (stddev " << result.overall_stddev << ")"
            << " UFC=" << result.ufc_mean << "\n";
  if (!cfg.out_dir.empty())
    std::cout << "artifacts -> " << cfg.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set health-state recognition: CNN-family extractors with "
               "a one-vs-rest head and a collective decision rule"};
  app.require_subcommand(1);

  std::string config_path, model_path, thresholds_path, input_path;
  std::string out_path, prefix, rule_flag, log_out;
  std::uint64_t seed_flag = 0;
  double quantile_flag = 0.05;
  int stride = 1;

  auto* gen = app.add_subcommand("gen-synth", "Emit a synthetic dataset as CSV");
  gen->add_option("--config", config_path, "Config file (synth.* keys)");
  gen->add_option("--out-prefix", prefix, "Output prefix for _train/_test CSVs")
      ->required();

  auto* tr = app.add_subcommand("train", "Fit a model and save it with its "
                                          "normalization statistics");
  tr->add_option("--config", config_path, "Config file")->required();
  tr->add_option("--out", out_path, "Model output path")->required();
  tr->add_option("--log", log_out, "Optional training-log output path");
  auto* tr_seed = tr->add_option("--seed", seed_flag, "Seed override");

  auto* cal = app.add_subcommand("calibrate",
                                 "Compute collective-score thresholds");
  cal->add_option("--config", config_path, "Config file")->required();
  cal->add_option("--model", model_path, "Trained model file")->required();
  cal->add_option("--out", out_path, "Thresholds output path")->required();
  auto* cal_q = cal->add_option("--quantile", quantile_flag,
                                "Rejection quantile (default 0.05)");

  auto* ev = app.add_subcommand("evaluate", "Score a test set and write a "
                                            "report");
  ev->add_option("--config", config_path, "Config file")->required();
  ev->add_option("--model", model_path, "Trained model file")->required();
  ev->add_option("--thresholds", thresholds_path, "Thresholds file");
  ev->add_option("--rule", rule_flag, "Decision rule override");
  ev->add_option("--out", out_path, "Report output directory");
  auto* ev_seed = ev->add_option("--seed", seed_flag, "Seed recorded in the report");

  auto* pr = app.add_subcommand("predict", "Emit decisions for raw runs in a "
                                           "CSV");
  pr->add_option("--model", model_path, "Trained model file")->required();
  pr->add_option("--input", input_path, "Input runs CSV")->required();
  pr->add_option("--out", out_path, "Decisions CSV output path")->required();
  pr->add_option("--thresholds", thresholds_path, "Thresholds file");
  pr->add_option("--rule", rule_flag, "Decision rule (default collective)");
  pr->add_option("--stride", stride, "Window stride (default 1)");

  auto* ex = app.add_subcommand("experiment", "Full multi-repetition pipeline "
                                              "from one config file");
  ex->add_option("--config", config_path, "Config file")->required();
  ex->add_option("--out", out_path, "Output directory override");
  auto* ex_seed = ex->add_option("--seed", seed_flag, "Seed override");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_synth(config_path, prefix);
    if (tr->parsed())
      return cmd_train(config_path, out_path, log_out, tr_seed->count() > 0,
                       seed_flag);
    if (cal->parsed())
      return cmd_calibrate(config_path, model_path, out_path, quantile_flag,
                           cal_q->count() > 0);
    if (ev->parsed())
      return cmd_evaluate(config_path, model_path, thresholds_path, rule_flag,
                          out_path, ev_seed->count() > 0, seed_flag);
    if (pr->parsed())
      return cmd_predict(model_path, input_path, out_path, thresholds_path,
                         rule_flag, stride);
    if (ex->parsed())
      return cmd_experiment(config_path, out_path, ex_seed->count() > 0,
                            seed_flag);
  } catch (const std::exception& e) {
    std::cerr << "ovrn: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
