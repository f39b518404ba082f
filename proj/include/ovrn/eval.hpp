#pragma once

// Open-set evaluation (per-class accuracy, UFC, confusion, score histograms),
// the end-to-end experiment runner with repetition averaging, and report
// import/export.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "ovrn/decision.hpp"
#include "ovrn/train.hpp"

namespace ovrn {

enum class RuleKind { collective, softmax_baseline, ovrn_max_baseline };

inline std::string to_string(RuleKind r) {
  switch (r) {
    case RuleKind::collective: return "collective";
    case RuleKind::softmax_baseline: return "softmax_baseline";
    case RuleKind::ovrn_max_baseline: return "ovrn_max_baseline";
  }
  return "?";
}

inline RuleKind parse_rule_kind(const std::string& s) {
  if (s == "collective") return RuleKind::collective;
  if (s == "softmax_baseline") return RuleKind::softmax_baseline;
  if (s == "ovrn_max_baseline") return RuleKind::ovrn_max_baseline;
  throw SpecError("unknown decision rule '" + s + "'");
}

constexpr int kHistogramBins = 50;

// Decision-score histogram split by ground truth; shared uniform bin edges.
struct Histogram {
  Eigen::VectorXd edges;         // kHistogramBins + 1 edges
  Eigen::VectorXi known_counts;  // kHistogramBins
  Eigen::VectorXi unknown_counts;
};

struct EvaluationReport {
  int num_classes = 0;
  Eigen::VectorXd per_class_accuracy;  // K entries
  double unknown_rejection_rate = 0;   // exported as "UFC"
  double overall_accuracy = 0;
  Eigen::MatrixXi confusion;  // (K+1)x(K+1); index K is UNKNOWN
  Histogram histogram;
  long known_total = 0;
  long unknown_total = 0;
  std::string rule;
  std::uint64_t seed = 0;
  std::string model_hash_hex;
  std::string prob_stream_hash_hex;
};

// Tally of pre-made decisions against ground-truth labels (1..K known,
// kUnknownLabel unknown). The full evaluate() path reduces to this.
EvaluationReport tally_decisions(const std::vector<int>& labels,
                                 const std::vector<Decision>& decisions, int K);

// Scores every test window with the model, applies the chosen rule, and
// tallies. Thresholds are required for the collective rule only. The
// histogrammed score is the winning collective score, or the max posterior
// for the baselines.
EvaluationReport evaluate(Model<float>& model,
                          const std::vector<WindowedSample>& test_windows,
                          RuleKind rule,
                          const DecisionThresholds* thresholds = nullptr,
                          double fixed_threshold = 0.5);

struct ExperimentConfig {
  std::string dataset = "synthetic";  // "synthetic" | "csv"
  std::string train_csv;
  std::string test_csv;
  SyntheticSpec synth;
  int window_len = 20;
  int stride = 1;
  ModelSpec model;  // num_classes/num_variables of 0 are inferred from data
  TrainConfig train_cfg;
  RuleKind rule = RuleKind::collective;
  double quantile = 0.05;
  double fixed_threshold = 0.5;
  int repetitions = 1;
  std::uint64_t seed = 42;
  std::string out_dir;  // empty runs in memory only
  int max_threads = 0;  // 0 = hardware concurrency

  void validate() const;
};

struct PreparedData {
  std::vector<WindowedSample> train_windows;  // normalized
  std::vector<WindowedSample> test_windows;   // normalized with train stats
  NormalizationStats stats;
  int num_classes = 0;
  int num_variables = 0;
};

// Load or generate runs, window them, fit normalization on training windows
// and apply it everywhere.
PreparedData prepare_data(const ExperimentConfig& cfg);

// The config's model spec completed with data-derived extents.
ModelSpec resolve_model_spec(const ExperimentConfig& cfg,
                             const PreparedData& data);

struct RunArtifacts {
  Model<float> model;
  DecisionThresholds thresholds;  // empty for baseline rules
  TrainLog log;
  EvaluationReport report;
};

// One train + calibrate + evaluate pass with the given seed.
RunArtifacts run_single(const ExperimentConfig& cfg, const PreparedData& data,
                        std::uint64_t run_seed);

struct ExperimentResult {
  int repetitions = 0;
  int num_classes = 0;
  std::string rule;
  Eigen::VectorXd per_class_accuracy_mean;
  double ufc_mean = 0;
  double overall_mean = 0;
  double overall_stddev = 0;  // sample stddev across runs, 0 for one run
  Eigen::MatrixXi confusion_sum;
  std::vector<EvaluationReport> per_run;
};

class ExperimentError : public Error {
 public:
  ExperimentError(const std::string& msg,
                  std::vector<EvaluationReport> partial)
      : Error(msg), partial_reports(std::move(partial)) {}
  std::vector<EvaluationReport> partial_reports;
};

// Repetitions run with seeds seed+0..seed+r-1 (concurrently, aggregation in
// repetition order); artifacts land under cfg.out_dir when it is set.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

void export_report(const EvaluationReport& report, const std::string& dir);
EvaluationReport import_report(const std::string& json_path);
void export_experiment(const ExperimentResult& result, const std::string& dir);

}  // namespace ovrn
