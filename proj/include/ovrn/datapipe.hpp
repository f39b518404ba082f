#pragma once

// Raw-run ingestion, sliding-window matrixing, training-set normalization,
// and the seeded synthetic open-set benchmark generator.

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "ovrn/common.hpp"

namespace ovrn {

// Known states are 1..K; UNKNOWN marks test-only classes and is never trained
// on; kUnlabeled marks windows with no ground truth at all.
constexpr int kUnknownLabel = 0;
constexpr int kUnlabeled = -1;

class InputTooShortError : public Error {
 public:
  using Error::Error;
};

struct RawRun {
  std::string run_id;
  int state_label = kUnlabeled;
  Eigen::MatrixXd samples;  // n time steps x m variables
};

struct WindowedSample {
  Eigen::MatrixXd matrix;  // w x m
  int label = kUnlabeled;
};

struct NormalizationStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std_dev;  // floored at kStdFloor
  std::string fitted_on;    // fingerprint of the dataset the stats came from
};

constexpr double kStdFloor = 1e-8;

struct SyntheticSpec {
  int known_classes = 4;
  int unknown_classes = 2;
  int variables = 8;
  int run_length = 120;
  int train_runs_per_class = 20;
  int test_runs_per_class = 20;
  double signature_scale = 1.0;  // drift/oscillation amplitude unit
  double noise_scale = 0.25;
  std::uint64_t seed = 42;

  void validate() const;
};

struct SyntheticDataset {
  std::vector<RawRun> train;  // known classes only
  std::vector<RawRun> test;   // known classes plus unknown-labeled classes
};

// floor((n-w)/stride)+1 windows, each carrying the run's label.
std::vector<WindowedSample> window(const RawRun& run, int w, int stride = 1);

// Per-variable mean and population standard deviation over every cell of the
// given windows; std floored so constant variables normalize to zero.
NormalizationStats fit_normalization(const std::vector<WindowedSample>& windows);

// Cellwise (x - mean_j) / std_j with the supplied (training) statistics.
std::vector<WindowedSample> apply_normalization(
    std::vector<WindowedSample> windows, const NormalizationStats& stats);

std::string dataset_fingerprint(const std::vector<WindowedSample>& windows);

// CSV schema: header `run_id,state,<variable names...>`, one row per time
// step, comma separated, no quoting. Rows group into one RawRun per
// (run_id, state) pair, file order preserved.
std::vector<RawRun> load_runs_csv(const std::string& path);
void save_runs_csv(const std::string& path, const std::vector<RawRun>& runs);

// Deterministic class-signature benchmark: each class is drift ramp plus
// sinusoid on a class-specific variable subset, plus white noise. Unknown
// classes get signatures (and frequency bands) disjoint from the known ones.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace ovrn
