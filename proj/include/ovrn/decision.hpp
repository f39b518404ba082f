#pragma once

// Collective decision scores over OVRN probabilities, per-class threshold
// calibration from training windows, and the decision rules (collective plus
// the two fixed-threshold baselines).

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "ovrn/model.hpp"

namespace ovrn {

// The quantile calibration degenerates below this many windows per class.
constexpr int kMinCalibrationWindows = 20;

struct DecisionThresholds {
  Eigen::VectorXd epsilon;  // index k-1 holds the cutoff for class k
  double quantile = 0.05;
  std::string fingerprint;  // model hash + training-set hash
  std::vector<int> calibration_counts;
};

struct Decision {
  int predicted = kUnknownLabel;  // class 1..K when accepted, else UNKNOWN
  int winning_class = 0;          // argmax class, 1..K
  double winning_score = 0;
  bool accepted = false;
};

// S[k] = log p_k - (1/(K-1)) sum_{j!=k} log p_j, probabilities clamped to
// [1e-7, 1-1e-7]. Requires K >= 2.
Eigen::VectorXd collective_scores(const Eigen::VectorXd& probs);

// Largest observed score that still accepts at least (1-quantile) of the
// samples; lower-interpolation, so the cutoff is always an observed value.
double lower_quantile_threshold(std::vector<double> scores, double quantile);

// Per-class score quantiles over the labeled training windows.
DecisionThresholds calibrate(Model<float>& model,
                             const std::vector<WindowedSample>& training,
                             double quantile = 0.05);

// Collective rule: argmax class wins iff its score clears its threshold
// (inclusive); ties break to the smallest class index.
Decision decide(const Eigen::VectorXd& scores, const DecisionThresholds& thr);

// Fixed-threshold baselines: argmax probability wins iff strictly above the
// threshold.
Decision decide_softmax_baseline(const Eigen::VectorXd& probs,
                                 double fixed_threshold = 0.5);
Decision decide_ovrn_max_baseline(const Eigen::VectorXd& probs,
                                  double fixed_threshold = 0.5);

void save_thresholds(const DecisionThresholds& thr, const std::string& path);
DecisionThresholds load_thresholds(const std::string& path);

// One line per class: id, epsilon, quantile, calibration count.
std::string format_thresholds(const DecisionThresholds& thr);

}  // namespace ovrn
