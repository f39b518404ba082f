#include "ovrn/eval.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <thread>

#include "ovrn/config.hpp"
#include "ovrn/model_io.hpp"

namespace ovrn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Histogram build_histogram(const std::vector<double>& scores,
                          const std::vector<bool>& is_unknown) {
  Histogram h;
  h.edges.resize(kHistogramBins + 1);
  h.known_counts = Eigen::VectorXi::Zero(kHistogramBins);
  h.unknown_counts = Eigen::VectorXi::Zero(kHistogramBins);
  if (scores.empty()) {
    for (int i = 0; i <= kHistogramBins; ++i) h.edges[i] = i;
    return h;
  }
  double lo = scores[0], hi = scores[0];
  for (double s : scores) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  if (hi <= lo) {  // degenerate range
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / kHistogramBins;
  for (int i = 0; i <= kHistogramBins; ++i) h.edges[i] = lo + width * i;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    int bin = static_cast<int>((scores[i] - lo) / width);
    bin = std::min(std::max(bin, 0), kHistogramBins - 1);
    if (is_unknown[i])
      h.unknown_counts[bin] += 1;
    else
      h.known_counts[bin] += 1;
  }
  return h;
}

void write_confusion_csv(const Eigen::MatrixXi& confusion, int K,
                         const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "true";
  for (int k = 1; k <= K; ++k) out << ",pred_" << k;
  out << ",pred_UNKNOWN\n";
  for (int r = 0; r <= K; ++r) {
    if (r == K)
      out << "UNKNOWN";
    else
      out << (r + 1);
    for (int c = 0; c <= K; ++c) out << "," << confusion(r, c);
    out << "\n";
  }
  if (!out) throw IoError("failed while writing '" + path + "'");
}

void write_histogram_csv(const Histogram& h, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "bin_lo,bin_hi,known_count,unknown_count\n";
  char buf[96];
  for (int i = 0; i < kHistogramBins; ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%d,%d\n", h.edges[i],
                  h.edges[i + 1], h.known_counts[i], h.unknown_counts[i]);
    out << buf;
  }
  if (!out) throw IoError("failed while writing '" + path + "'");
}

json report_to_json(const EvaluationReport& r) {
  json j;
  j["num_classes"] = r.num_classes;
  j["rule"] = r.rule;
  j["seed"] = r.seed;
  j["per_class_accuracy"] = std::vector<double>(
      r.per_class_accuracy.data(),
      r.per_class_accuracy.data() + r.per_class_accuracy.size());
  j["UFC"] = r.unknown_rejection_rate;
  j["overall_accuracy"] = r.overall_accuracy;
  std::vector<std::vector<int>> conf;
  for (Eigen::Index row = 0; row < r.confusion.rows(); ++row) {
    std::vector<int> cells;
    for (Eigen::Index col = 0; col < r.confusion.cols(); ++col)
      cells.push_back(r.confusion(row, col));
    conf.push_back(std::move(cells));
  }
  j["confusion"] = std::move(conf);
  j["histogram"] =
      json{{"edges", std::vector<double>(r.histogram.edges.data(),
                                         r.histogram.edges.data() +
                                             r.histogram.edges.size())},
           {"known", std::vector<int>(r.histogram.known_counts.data(),
                                      r.histogram.known_counts.data() +
                                          r.histogram.known_counts.size())},
           {"unknown", std::vector<int>(r.histogram.unknown_counts.data(),
                                        r.histogram.unknown_counts.data() +
                                            r.histogram.unknown_counts.size())}};
  j["known_total"] = r.known_total;
  j["unknown_total"] = r.unknown_total;
  j["model_hash"] = r.model_hash_hex;
  j["prob_stream_hash"] = r.prob_stream_hash_hex;
  return j;
}

EvaluationReport report_from_json(const json& j) {
  EvaluationReport r;
  r.num_classes = j.at("num_classes").get<int>();
  r.rule = j.at("rule").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  const auto acc = j.at("per_class_accuracy").get<std::vector<double>>();
  r.per_class_accuracy = Eigen::Map<const Eigen::VectorXd>(
      acc.data(), static_cast<Eigen::Index>(acc.size()));
  r.unknown_rejection_rate = j.at("UFC").get<double>();
  r.overall_accuracy = j.at("overall_accuracy").get<double>();
  const auto conf = j.at("confusion").get<std::vector<std::vector<int>>>();
  r.confusion.resize(static_cast<Eigen::Index>(conf.size()),
                     static_cast<Eigen::Index>(conf.size()));
  for (std::size_t row = 0; row < conf.size(); ++row)
    for (std::size_t col = 0; col < conf.size(); ++col)
      r.confusion(static_cast<Eigen::Index>(row),
                  static_cast<Eigen::Index>(col)) = conf[row][col];
  const auto& hj = j.at("histogram");
  const auto edges = hj.at("edges").get<std::vector<double>>();
  const auto known = hj.at("known").get<std::vector<int>>();
  const auto unknown = hj.at("unknown").get<std::vector<int>>();
  r.histogram.edges = Eigen::Map<const Eigen::VectorXd>(
      edges.data(), static_cast<Eigen::Index>(edges.size()));
  r.histogram.known_counts = Eigen::Map<const Eigen::VectorXi>(
      known.data(), static_cast<Eigen::Index>(known.size()));
  r.histogram.unknown_counts = Eigen::Map<const Eigen::VectorXi>(
      unknown.data(), static_cast<Eigen::Index>(unknown.size()));
  r.known_total = j.at("known_total").get<long>();
  r.unknown_total = j.at("unknown_total").get<long>();
  r.model_hash_hex = j.at("model_hash").get<std::string>();
  r.prob_stream_hash_hex = j.at("prob_stream_hash").get<std::string>();
  return r;
}

}  // namespace

EvaluationReport tally_decisions(const std::vector<int>& labels,
                                 const std::vector<Decision>& decisions,
                                 int K) {
  if (labels.size() != decisions.size())
    throw DimensionError("tally_decisions: " + std::to_string(labels.size()) +
                         " labels vs " + std::to_string(decisions.size()) +
                         " decisions");
  EvaluationReport r;
  r.num_classes = K;
  r.confusion = Eigen::MatrixXi::Zero(K + 1, K + 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int label = labels[i];
    if (label != kUnknownLabel && (label < 1 || label > K))
      throw Error("tally_decisions: window " + std::to_string(i) +
                  " has label " + std::to_string(label) +
                  ", expected 1.." + std::to_string(K) + " or UNKNOWN");
    const int row = label == kUnknownLabel ? K : label - 1;
    const int pred = decisions[i].predicted;
    const int col = pred == kUnknownLabel ? K : pred - 1;
    r.confusion(row, col) += 1;
  }
  r.per_class_accuracy = Eigen::VectorXd::Zero(K);
  for (int k = 0; k < K; ++k) {
    const long row_total = r.confusion.row(k).sum();
    if (row_total > 0)
      r.per_class_accuracy[k] =
          static_cast<double>(r.confusion(k, k)) / static_cast<double>(row_total);
    r.known_total += row_total;
  }
  r.unknown_total = r.confusion.row(K).sum();
  r.unknown_rejection_rate =
      r.unknown_total > 0 ? static_cast<double>(r.confusion(K, K)) /
                                static_cast<double>(r.unknown_total)
                          : 0.0;
  const long total = r.known_total + r.unknown_total;
  r.overall_accuracy =
      total > 0 ? static_cast<double>(r.confusion.trace()) /
                      static_cast<double>(total)
                : 0.0;
  return r;
}

EvaluationReport evaluate(Model<float>& model,
                          const std::vector<WindowedSample>& test_windows,
                          RuleKind rule, const DecisionThresholds* thresholds,
                          double fixed_threshold) {
  if (test_windows.empty()) throw Error("evaluate: no test windows");
  if (rule == RuleKind::collective && thresholds == nullptr)
    throw Error("evaluate: the collective rule needs calibrated thresholds");
  const int K = model.spec.num_classes;

  const Eigen::MatrixXf probs = predict_probabilities(model, test_windows);
  std::vector<int> labels(test_windows.size());
  std::vector<Decision> decisions(test_windows.size());
  std::vector<double> hist_scores(test_windows.size());
  std::vector<bool> is_unknown(test_windows.size());
  for (std::size_t i = 0; i < test_windows.size(); ++i) {
    labels[i] = test_windows[i].label;
    if (labels[i] == kUnlabeled)
      throw Error("evaluate: window " + std::to_string(i) +
                  " carries no ground-truth label");
    const Eigen::VectorXd row =
        probs.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
    switch (rule) {
      case RuleKind::collective:
        decisions[i] = decide(collective_scores(row), *thresholds);
        break;
      case RuleKind::softmax_baseline:
        decisions[i] = decide_softmax_baseline(row, fixed_threshold);
        break;
      case RuleKind::ovrn_max_baseline:
        decisions[i] = decide_ovrn_max_baseline(row, fixed_threshold);
        break;
    }
    hist_scores[i] = decisions[i].winning_score;
    is_unknown[i] = labels[i] == kUnknownLabel;
  }

  EvaluationReport r = tally_decisions(labels, decisions, K);
  r.histogram = build_histogram(hist_scores, is_unknown);
  r.rule = to_string(rule);
  r.model_hash_hex = model_hash(model);
  r.prob_stream_hash_hex = prob_stream_hash(probs);
  return r;
}

void ExperimentConfig::validate() const {
  if (dataset != "synthetic" && dataset != "csv")
    throw SpecError("experiment config: dataset must be 'synthetic' or 'csv', "
                    "got '" + dataset + "'");
  if (dataset == "csv" && (train_csv.empty() || test_csv.empty()))
    throw SpecError("experiment config: csv dataset needs train_csv and "
                    "test_csv paths");
  if (window_len < 1 || stride < 1)
    throw SpecError("experiment config: window and stride must be positive");
  if (quantile <= 0 || quantile >= 1)
    throw SpecError("experiment config: quantile must lie in (0,1)");
  if (repetitions < 1)
    throw SpecError("experiment config: repetitions must be >= 1");
  train_cfg.validate();
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<RawRun> train_runs, test_runs;
  if (cfg.dataset == "synthetic") {
    auto ds = generate_synthetic(cfg.synth);
    train_runs = std::move(ds.train);
    test_runs = std::move(ds.test);
  } else {
    train_runs = load_runs_csv(cfg.train_csv);
    test_runs = load_runs_csv(cfg.test_csv);
  }
  if (train_runs.empty()) throw Error("prepare_data: no training runs");
  if (test_runs.empty()) throw Error("prepare_data: no test runs");

  PreparedData data;
  data.num_variables = static_cast<int>(train_runs.front().samples.cols());
  int K = 0;
  std::vector<WindowedSample> raw_train, raw_test;
  for (const auto& run : train_runs) {
    if (run.state_label == kUnknownLabel)
      throw Error("prepare_data: training run '" + run.run_id +
                  "' carries the UNKNOWN label");
    K = std::max(K, run.state_label);
    for (auto& w : window(run, cfg.window_len, cfg.stride))
      raw_train.push_back(std::move(w));
  }
  for (const auto& run : test_runs)
    for (auto& w : window(run, cfg.window_len, cfg.stride))
      raw_test.push_back(std::move(w));

  data.num_classes = K;
  data.stats = fit_normalization(raw_train);
  data.train_windows = apply_normalization(std::move(raw_train), data.stats);
  data.test_windows = apply_normalization(std::move(raw_test), data.stats);
  return data;
}

ModelSpec resolve_model_spec(const ExperimentConfig& cfg,
                             const PreparedData& data) {
  ModelSpec spec = cfg.model;
  if (spec.num_classes == 0) spec.num_classes = data.num_classes;
  if (spec.num_variables == 0) spec.num_variables = data.num_variables;
  spec.window_len = cfg.window_len;
  if (spec.num_classes != data.num_classes)
    throw SpecError("model spec declares " + std::to_string(spec.num_classes) +
                    " classes but the training data has " +
                    std::to_string(data.num_classes));
  if (spec.num_variables != data.num_variables)
    throw SpecError("model spec declares " + std::to_string(spec.num_variables) +
                    " variables but the data has " +
                    std::to_string(data.num_variables));
  spec.validate();
  return spec;
}

RunArtifacts run_single(const ExperimentConfig& cfg, const PreparedData& data,
                        std::uint64_t run_seed) {
  RunArtifacts art;
  const ModelSpec spec = resolve_model_spec(cfg, data);
  art.model = build<float>(spec, run_seed);
  TrainConfig tc = cfg.train_cfg;
  tc.seed = run_seed;
  art.log = train(art.model, data.train_windows, tc);
  art.model.norm_stats = data.stats;
  art.model.stats_fingerprint = data.stats.fitted_on;
  const DecisionThresholds* thr = nullptr;
  if (cfg.rule == RuleKind::collective) {
    art.thresholds = calibrate(art.model, data.train_windows, cfg.quantile);
    thr = &art.thresholds;
  }
  art.report =
      evaluate(art.model, data.test_windows, cfg.rule, thr, cfg.fixed_threshold);
  art.report.seed = run_seed;
  return art;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const PreparedData data = prepare_data(cfg);

  const int reps = cfg.repetitions;
  std::vector<RunArtifacts> runs(static_cast<std::size_t>(reps));
  std::vector<std::string> failures(static_cast<std::size_t>(reps));

  unsigned workers = cfg.max_threads > 0
                         ? static_cast<unsigned>(cfg.max_threads)
                         : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, static_cast<unsigned>(reps));
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= reps) return;
      try {
        runs[static_cast<std::size_t>(r)] =
            run_single(cfg, data, cfg.seed + static_cast<std::uint64_t>(r));
      } catch (const std::exception& e) {
        failures[static_cast<std::size_t>(r)] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < workers; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (int r = 0; r < reps; ++r)
    if (!failures[static_cast<std::size_t>(r)].empty()) {
      std::vector<EvaluationReport> partial;
      for (int k = 0; k < reps; ++k)
        if (failures[static_cast<std::size_t>(k)].empty() &&
            runs[static_cast<std::size_t>(k)].report.num_classes > 0)
          partial.push_back(runs[static_cast<std::size_t>(k)].report);
      throw ExperimentError("repetition " + std::to_string(r) + " failed: " +
                                failures[static_cast<std::size_t>(r)],
                            std::move(partial));
    }

  ExperimentResult result;
  result.repetitions = reps;
  result.num_classes = data.num_classes;
  result.rule = to_string(cfg.rule);
  result.per_class_accuracy_mean = Eigen::VectorXd::Zero(data.num_classes);
  result.confusion_sum =
      Eigen::MatrixXi::Zero(data.num_classes + 1, data.num_classes + 1);
  double sum = 0, sumsq = 0;
  for (int r = 0; r < reps; ++r) {
    const auto& rep = runs[static_cast<std::size_t>(r)].report;
    result.per_class_accuracy_mean += rep.per_class_accuracy;
    result.ufc_mean += rep.unknown_rejection_rate;
    sum += rep.overall_accuracy;
    sumsq += rep.overall_accuracy * rep.overall_accuracy;
    result.confusion_sum += rep.confusion;
    result.per_run.push_back(rep);
  }
  result.per_class_accuracy_mean /= reps;
  result.ufc_mean /= reps;
  result.overall_mean = sum / reps;
  if (reps > 1) {
    const double var =
        (sumsq - sum * sum / reps) / static_cast<double>(reps - 1);
    result.overall_stddev = std::sqrt(std::max(0.0, var));
  }

  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    {
      std::ofstream cfg_out(fs::path(cfg.out_dir) / "effective_config.cfg");
      if (!cfg_out)
        throw IoError("cannot write effective config under '" + cfg.out_dir + "'");
      cfg_out << format_config(cfg);
    }
    export_experiment(result, cfg.out_dir);
    for (int r = 0; r < reps; ++r) {
      char name[16];
      std::snprintf(name, sizeof(name), "rep%02d", r);
      const fs::path dir = fs::path(cfg.out_dir) / name;
      fs::create_directories(dir);
      auto& art = runs[static_cast<std::size_t>(r)];
      export_report(art.report, dir.string());
      export_train_log(art.log, (dir / "train_log.txt").string());
      save_model(art.model, (dir / "model.ovrn").string());
      if (cfg.rule == RuleKind::collective) {
        save_thresholds(art.thresholds, (dir / "thresholds.json").string());
        std::ofstream txt(dir / "thresholds.txt");
        txt << format_thresholds(art.thresholds);
      }
    }
  }
  return result;
}

void export_report(const EvaluationReport& report, const std::string& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "report.json");
    if (!out) throw IoError("cannot write report under '" + dir + "'");
    out << report_to_json(report).dump(2) << "\n";
    if (!out) throw IoError("failed while writing report under '" + dir + "'");
  }
  write_confusion_csv(report.confusion, report.num_classes,
                      (fs::path(dir) / "confusion.csv").string());
  write_histogram_csv(report.histogram,
                      (fs::path(dir) / "histogram.csv").string());
}

EvaluationReport import_report(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open '" + json_path + "' for reading");
  json j;
  try {
    in >> j;
    return report_from_json(j);
  } catch (const json::exception& e) {
    throw IoError("'" + json_path + "' is not a report file: " + e.what());
  }
}

void export_experiment(const ExperimentResult& result,
                       const std::string& dir) {
  fs::create_directories(dir);
  json j;
  j["repetitions"] = result.repetitions;
  j["num_classes"] = result.num_classes;
  j["rule"] = result.rule;
  j["per_class_accuracy"] = std::vector<double>(
      result.per_class_accuracy_mean.data(),
      result.per_class_accuracy_mean.data() +
          result.per_class_accuracy_mean.size());
  j["UFC"] = result.ufc_mean;
  j["overall_accuracy"] = result.overall_mean;
  j["overall_accuracy_stddev"] = result.overall_stddev;
  std::vector<std::vector<int>> conf;
  for (Eigen::Index r = 0; r < result.confusion_sum.rows(); ++r) {
    std::vector<int> row;
    for (Eigen::Index c = 0; c < result.confusion_sum.cols(); ++c)
      row.push_back(result.confusion_sum(r, c));
    conf.push_back(std::move(row));
  }
  j["confusion_sum"] = std::move(conf);
  std::vector<double> per_run_overall, per_run_ufc;
  for (const auto& rep : result.per_run) {
    per_run_overall.push_back(rep.overall_accuracy);
    per_run_ufc.push_back(rep.unknown_rejection_rate);
  }
  j["per_run_overall"] = per_run_overall;
  j["per_run_UFC"] = per_run_ufc;

  std::ofstream out(fs::path(dir) / "averaged_report.json");
  if (!out) throw IoError("cannot write averaged report under '" + dir + "'");
  out << j.dump(2) << "\n";
  write_confusion_csv(result.confusion_sum, result.num_classes,
                      (fs::path(dir) / "confusion_sum.csv").string());
}

}  // namespace ovrn
