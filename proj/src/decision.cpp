#include "ovrn/decision.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

namespace ovrn {

namespace {

double clamp01(double p) {
  return std::min(std::max(p, kProbEpsilon), 1.0 - kProbEpsilon);
}

int argmax_smallest_index(const Eigen::VectorXd& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

Decision threshold_baseline(const Eigen::VectorXd& probs,
                            double fixed_threshold) {
  Decision d;
  const int k = argmax_smallest_index(probs);
  d.winning_class = k + 1;
  d.winning_score = probs[k];
  d.accepted = probs[k] > fixed_threshold;
  d.predicted = d.accepted ? d.winning_class : kUnknownLabel;
  return d;
}

}  // namespace

Eigen::VectorXd collective_scores(const Eigen::VectorXd& probs) {
  const Eigen::Index K = probs.size();
  if (K < 2)
    throw Error("collective_scores: undefined for K=" + std::to_string(K) +
                " (needs at least 2 known states)");
  Eigen::VectorXd logs(K);
  for (Eigen::Index k = 0; k < K; ++k) logs[k] = std::log(clamp01(probs[k]));
  const double total = logs.sum();
  Eigen::VectorXd s(K);
  for (Eigen::Index k = 0; k < K; ++k)
    s[k] = logs[k] - (total - logs[k]) / static_cast<double>(K - 1);
  return s;
}

double lower_quantile_threshold(std::vector<double> scores, double quantile) {
  if (scores.empty())
    throw CalibrationError("lower_quantile_threshold: no scores");
  if (quantile <= 0.0 || quantile >= 1.0)
    throw CalibrationError("lower_quantile_threshold: quantile must lie in "
                           "(0,1), got " + std::to_string(quantile));
  std::sort(scores.begin(), scores.end(), std::greater<double>());
  const double n = static_cast<double>(scores.size());
  const auto need = static_cast<std::size_t>(
      std::ceil((1.0 - quantile) * n - 1e-9));
  return scores[std::max<std::size_t>(need, 1) - 1];
}

DecisionThresholds calibrate(Model<float>& model,
                             const std::vector<WindowedSample>& training,
                             double quantile) {
  const int K = model.spec.num_classes;
  if (quantile <= 0.0 || quantile >= 1.0)
    throw CalibrationError("calibrate: quantile must lie in (0,1), got " +
                           std::to_string(quantile));

  std::vector<std::vector<double>> per_class(static_cast<std::size_t>(K));
  const Eigen::MatrixXf probs = predict_probabilities(model, training);
  for (std::size_t i = 0; i < training.size(); ++i) {
    const int label = training[i].label;
    if (label < 1 || label > K)
      throw CalibrationError("calibrate: window " + std::to_string(i) +
                             " has label " + std::to_string(label) +
                             ", calibration windows must carry labels 1.." +
                             std::to_string(K));
    const Eigen::VectorXd row =
        probs.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
    per_class[static_cast<std::size_t>(label - 1)].push_back(
        collective_scores(row)[label - 1]);
  }

  DecisionThresholds thr;
  thr.quantile = quantile;
  thr.epsilon.resize(K);
  thr.calibration_counts.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const auto& scores = per_class[static_cast<std::size_t>(k)];
    if (static_cast<int>(scores.size()) < kMinCalibrationWindows)
      throw CalibrationError(
          "calibrate: class " + std::to_string(k + 1) + " has only " +
          std::to_string(scores.size()) + " calibration windows, need at least " +
          std::to_string(kMinCalibrationWindows));
    thr.epsilon[k] = lower_quantile_threshold(scores, quantile);
    thr.calibration_counts[static_cast<std::size_t>(k)] =
        static_cast<int>(scores.size());
  }
  thr.fingerprint = model_hash(model) + ":" + dataset_fingerprint(training);
  return thr;
}

Decision decide(const Eigen::VectorXd& scores, const DecisionThresholds& thr) {
  if (scores.size() != thr.epsilon.size())
    throw DimensionError("decide: " + std::to_string(scores.size()) +
                         " scores vs " + std::to_string(thr.epsilon.size()) +
                         " thresholds");
  Decision d;
  const int k = argmax_smallest_index(scores);
  d.winning_class = k + 1;
  d.winning_score = scores[k];
  d.accepted = scores[k] >= thr.epsilon[k];
  d.predicted = d.accepted ? d.winning_class : kUnknownLabel;
  return d;
}

Decision decide_softmax_baseline(const Eigen::VectorXd& probs,
                                 double fixed_threshold) {
  return threshold_baseline(probs, fixed_threshold);
}

Decision decide_ovrn_max_baseline(const Eigen::VectorXd& probs,
                                  double fixed_threshold) {
  return threshold_baseline(probs, fixed_threshold);
}

void save_thresholds(const DecisionThresholds& thr, const std::string& path) {
  nlohmann::json j;
  j["epsilon"] = std::vector<double>(thr.epsilon.data(),
                                     thr.epsilon.data() + thr.epsilon.size());
  j["quantile"] = thr.quantile;
  j["fingerprint"] = thr.fingerprint;
  j["calibration_counts"] = thr.calibration_counts;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed while writing '" + path + "'");
}

DecisionThresholds load_thresholds(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + path + "' is not a thresholds file: " + e.what());
  }
  DecisionThresholds thr;
  try {
    const auto eps = j.at("epsilon").get<std::vector<double>>();
    thr.epsilon = Eigen::Map<const Eigen::VectorXd>(
        eps.data(), static_cast<Eigen::Index>(eps.size()));
    thr.quantile = j.at("quantile").get<double>();
    thr.fingerprint = j.value("fingerprint", "");
    thr.calibration_counts =
        j.value("calibration_counts", std::vector<int>{});
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + path + "' has malformed threshold fields: " + e.what());
  }
  return thr;
}

std::string format_thresholds(const DecisionThresholds& thr) {
  std::string out;
  char buf[160];
  for (Eigen::Index k = 0; k < thr.epsilon.size(); ++k) {
    const int count =
        k < static_cast<Eigen::Index>(thr.calibration_counts.size())
            ? thr.calibration_counts[static_cast<std::size_t>(k)]
            : 0;
    std::snprintf(buf, sizeof(buf), "class=%lld epsilon=%.17g quantile=%g count=%d\n",
                  static_cast<long long>(k + 1), thr.epsilon[k], thr.quantile,
                  count);
    out += buf;
  }
  return out;
}

}  // namespace ovrn
