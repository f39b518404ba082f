#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "ovrn/datapipe.hpp"

using namespace ovrn;

namespace {

RawRun make_run(int n, int m, int label, std::uint64_t seed = 1) {
  RawRun run;
  run.run_id = "r" + std::to_string(label);
  run.state_label = label;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-3, 3);
  run.samples = Eigen::MatrixXd::NullaryExpr(n, m, [&]() { return dist(rng); });
  return run;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("window counts match the sliding formula") {
  CHECK(window(make_run(500, 15, 1), 20, 1).size() == 481);
  CHECK(window(make_run(960, 15, 1), 20, 1).size() == 941);

  auto run = make_run(20, 4, 2);
  auto ws = window(run, 20, 1);
  REQUIRE(ws.size() == 1);
  CHECK(ws[0].matrix == run.samples);
  CHECK(ws[0].label == 2);

  // property over random (n, w, stride)
  std::mt19937_64 rng(5);
  for (int i = 0; i < 30; ++i) {
    const int w = 1 + static_cast<int>(rng() % 30);
    const int n = w + static_cast<int>(rng() % 200);
    const int stride = 1 + static_cast<int>(rng() % 7);
    auto windows = window(make_run(n, 3, 1), w, stride);
    CHECK(windows.size() == static_cast<std::size_t>((n - w) / stride + 1));
  }

  CHECK_THROWS_AS(window(make_run(10, 3, 1), 11, 1), InputTooShortError);
}

TEST_CASE("fit_normalization handles constant and two-point variables") {
  WindowedSample ws;
  ws.matrix.resize(2, 2);
  ws.matrix << 5.0, 0.0,
               5.0, 2.0;
  auto stats = fit_normalization({ws});
  CHECK(stats.mean[0] == doctest::Approx(5.0));
  CHECK(stats.std_dev[0] == doctest::Approx(kStdFloor));
  CHECK(stats.mean[1] == doctest::Approx(1.0));
  CHECK(stats.std_dev[1] == doctest::Approx(1.0));

  auto normed = apply_normalization({ws}, stats);
  CHECK(normed[0].matrix(0, 0) == doctest::Approx(0.0));
  CHECK(normed[0].matrix(1, 0) == doctest::Approx(0.0));
  CHECK(normed[0].matrix(0, 1) == doctest::Approx(-1.0));
  CHECK(normed[0].matrix(1, 1) == doctest::Approx(1.0));

  CHECK_THROWS_AS(fit_normalization({}), Error);
}

TEST_CASE("fitted stats standardize the data they came from") {
  std::vector<WindowedSample> windows;
  for (int i = 0; i < 40; ++i)
    windows.push_back(window(make_run(25, 6, 1, 100 + i), 25, 1)[0]);
  auto stats = fit_normalization(windows);
  auto normed = apply_normalization(windows, stats);

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(6);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(6);
  Eigen::Index cells = 0;
  for (const auto& w : normed) {
    sum += w.matrix.colwise().sum().transpose();
    sq += w.matrix.array().square().colwise().sum().matrix().transpose();
    cells += w.matrix.rows();
  }
  for (int j = 0; j < 6; ++j) {
    const double mean = sum[j] / static_cast<double>(cells);
    const double sd = std::sqrt(sq[j] / static_cast<double>(cells) - mean * mean);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(sd - 1.0) < 1e-6);
  }
}

TEST_CASE("apply_normalization identity, inverse, and mismatch") {
  auto run = make_run(30, 4, 1, 7);
  auto windows = window(run, 10, 5);

  NormalizationStats ident;
  ident.mean = Eigen::VectorXd::Zero(4);
  ident.std_dev = Eigen::VectorXd::Ones(4);
  auto same = apply_normalization(windows, ident);
  for (std::size_t i = 0; i < windows.size(); ++i)
    CHECK(same[i].matrix == windows[i].matrix);

  auto stats = fit_normalization(windows);
  auto normed = apply_normalization(windows, stats);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    Eigen::MatrixXd back =
        (normed[i].matrix.array().rowwise() * stats.std_dev.transpose().array())
            .matrix()
            .rowwise() +
        stats.mean.transpose();
    CHECK((back - windows[i].matrix).cwiseAbs().maxCoeff() < 1e-9);
  }

  NormalizationStats wrong;
  wrong.mean = Eigen::VectorXd::Zero(5);
  wrong.std_dev = Eigen::VectorXd::Ones(5);
  CHECK_THROWS_AS(apply_normalization(windows, wrong), DimensionError);
}

TEST_CASE("test data keeps the training fingerprint") {
  auto train = window(make_run(60, 3, 1, 11), 10);
  auto test = window(make_run(60, 3, 2, 12), 10);
  auto stats = fit_normalization(train);
  CHECK(stats.fitted_on == dataset_fingerprint(train));
  CHECK(stats.fitted_on != dataset_fingerprint(test));
}

TEST_CASE("csv round trip and grouping") {
  const auto path = temp_file("ovrn_datapipe_roundtrip.csv");
  std::vector<RawRun> runs = {make_run(500, 5, 1, 21), make_run(500, 5, 2, 22)};
  runs[0].run_id = "alpha";
  runs[1].run_id = "beta";
  save_runs_csv(path.string(), runs);

  auto loaded = load_runs_csv(path.string());
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].run_id == "alpha");
  CHECK(loaded[0].state_label == 1);
  CHECK(loaded[0].samples.rows() == 500);
  CHECK(loaded[1].samples.rows() == 500);
  CHECK((loaded[0].samples - runs[0].samples).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("csv parse errors carry line numbers") {
  const auto path = temp_file("ovrn_datapipe_badcell.csv");
  {
    std::ofstream out(path);
    out << "run_id,state,v1,v2\n";
    for (int i = 0; i < 40; ++i) {
      if (i == 35)  // header is line 1, so this data row is line 37
        out << "a,1,0.5,oops\n";
      else
        out << "a,1,0.5,1.5\n";
    }
  }
  CHECK_THROWS_WITH_AS(load_runs_csv(path.string()),
                       doctest::Contains("line 37"), ParseError);
  std::filesystem::remove(path);

  const auto ragged = temp_file("ovrn_datapipe_ragged.csv");
  {
    std::ofstream out(ragged);
    out << "run_id,state,v1,v2\n";
    out << "a,1,0.5\n";
  }
  CHECK_THROWS_WITH_AS(load_runs_csv(ragged.string()),
                       doctest::Contains("line 2"), ParseError);
  std::filesystem::remove(ragged);

  const auto missing = temp_file("ovrn_datapipe_missing.csv");
  {
    std::ofstream out(missing);
    out << "run,state,v1\n";
    out << "a,1,0.5\n";
  }
  CHECK_THROWS_WITH_AS(load_runs_csv(missing.string()),
                       doctest::Contains("run_id"), ParseError);
  std::filesystem::remove(missing);
}

TEST_CASE("52-variable schema loads with m=52") {
  const auto path = temp_file("ovrn_datapipe_tep.csv");
  {
    std::ofstream out(path);
    out << "run_id,state";
    for (int j = 1; j <= 52; ++j) out << ",xmeas_" << j;
    out << "\n";
    for (int t = 0; t < 25; ++t) {
      out << "sim1,3";
      for (int j = 0; j < 52; ++j) out << "," << 0.1 * j + t;
      out << "\n";
    }
  }
  auto runs = load_runs_csv(path.string());
  REQUIRE(runs.size() == 1);
  CHECK(runs[0].samples.cols() == 52);
  CHECK(runs[0].samples.rows() == 25);
  std::filesystem::remove(path);
}

TEST_CASE("synthetic generation is seed-deterministic") {
  SyntheticSpec spec;
  spec.known_classes = 3;
  spec.unknown_classes = 1;
  spec.train_runs_per_class = 2;
  spec.test_runs_per_class = 2;
  spec.run_length = 50;
  auto a = generate_synthetic(spec);
  auto b = generate_synthetic(spec);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].run_id == b.train[i].run_id);
    CHECK((a.train[i].samples - b.train[i].samples).cwiseAbs().maxCoeff() == 0.0);
  }

  spec.seed = 43;
  auto c = generate_synthetic(spec);
  CHECK((a.train[0].samples - c.train[0].samples).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("zero noise collapses runs of a class onto the signature") {
  SyntheticSpec spec;
  spec.noise_scale = 0.0;
  spec.train_runs_per_class = 3;
  spec.run_length = 40;
  auto ds = generate_synthetic(spec);
  CHECK((ds.train[0].samples - ds.train[1].samples).cwiseAbs().maxCoeff() == 0.0);
  CHECK((ds.train[0].samples - ds.train[2].samples).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("synthetic window counts follow the formula") {
  SyntheticSpec spec;
  spec.known_classes = 3;
  spec.unknown_classes = 1;
  spec.variables = 8;
  spec.run_length = 120;
  spec.train_runs_per_class = 10;
  spec.test_runs_per_class = 2;
  auto ds = generate_synthetic(spec);
  std::size_t total = 0;
  for (const auto& run : ds.train) total += window(run, 20, 1).size();
  CHECK(total == 3u * 10u * 101u);

  // unknown test runs carry the sentinel, training runs never do
  for (const auto& run : ds.train) CHECK(run.state_label != kUnknownLabel);
  std::size_t unknown_runs = 0;
  for (const auto& run : ds.test)
    if (run.state_label == kUnknownLabel) ++unknown_runs;
  CHECK(unknown_runs == 2u);
}

TEST_CASE("class mean signatures separate beyond 3x noise") {
  SyntheticSpec spec;  // defaults: K=4, U=2
  spec.test_runs_per_class = 10;
  auto ds = generate_synthetic(spec);

  // group test runs by generating class via run_id prefix
  std::map<std::string, std::pair<Eigen::MatrixXd, int>> means;
  for (const auto& run : ds.test) {
    const auto key = run.run_id.substr(0, run.run_id.find("_r"));
    auto it = means.find(key);
    if (it == means.end())
      means.emplace(key, std::make_pair(run.samples, 1));
    else {
      it->second.first += run.samples;
      it->second.second += 1;
    }
  }
  std::vector<Eigen::MatrixXd> class_means;
  for (auto& [key, entry] : means)
    class_means.push_back(entry.first / entry.second);
  REQUIRE(class_means.size() == 6);

  for (std::size_t a = 0; a < class_means.size(); ++a)
    for (std::size_t b = a + 1; b < class_means.size(); ++b) {
      const double gap =
          (class_means[a] - class_means[b]).cwiseAbs().maxCoeff();
      CHECK(gap > 3.0 * spec.noise_scale);
    }
}

TEST_CASE("synthetic export feeds back through ingestion") {
  SyntheticSpec spec;
  spec.known_classes = 2;
  spec.unknown_classes = 1;
  spec.train_runs_per_class = 2;
  spec.test_runs_per_class = 1;
  spec.run_length = 30;
  auto ds = generate_synthetic(spec);

  const auto path = temp_file("ovrn_datapipe_synth.csv");
  save_runs_csv(path.string(), ds.train);
  auto loaded = load_runs_csv(path.string());
  REQUIRE(loaded.size() == ds.train.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].run_id == ds.train[i].run_id);
    CHECK(loaded[i].state_label == ds.train[i].state_label);
    CHECK((loaded[i].samples - ds.train[i].samples).cwiseAbs().maxCoeff() == 0.0);
  }
  std::filesystem::remove(path);
}
