#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ovrn/config.hpp"
#include "ovrn/eval.hpp"
#include "ovrn/model_io.hpp"

using namespace ovrn;
namespace fs = std::filesystem;

namespace {

Decision accept(int cls, double score = 1.0) {
  Decision d;
  d.predicted = cls;
  d.winning_class = cls;
  d.winning_score = score;
  d.accepted = true;
  return d;
}

Decision reject(int winning, double score = -1.0) {
  Decision d;
  d.predicted = kUnknownLabel;
  d.winning_class = winning;
  d.winning_score = score;
  d.accepted = false;
  return d;
}

ExperimentConfig tiny_config(const std::string& out_dir = "") {
  ExperimentConfig cfg;
  cfg.dataset = "synthetic";
  cfg.synth.known_classes = 2;
  cfg.synth.unknown_classes = 1;
  cfg.synth.variables = 6;
  cfg.synth.run_length = 60;
  cfg.synth.train_runs_per_class = 6;
  cfg.synth.test_runs_per_class = 4;
  cfg.window_len = 20;
  cfg.model.extractor = ExtractorKind::standard;
  cfg.model.kernel_sizes = {3};
  cfg.model.channel_widths = {4};
  cfg.model.head = HeadKind::ovrn;
  cfg.model.ovrn_hidden = 8;
  cfg.train_cfg.batch_size = 32;
  cfg.train_cfg.learning_rate = 0.002;
  cfg.train_cfg.max_epochs = 3;
  cfg.train_cfg.convergence_tol = 1e-6;
  cfg.repetitions = 1;
  cfg.seed = 5;
  cfg.out_dir = out_dir;
  return cfg;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("hand tally of six windows") {
  // classes: 1,1,2,2,UNKNOWN,UNKNOWN
  std::vector<int> labels = {1, 1, 2, 2, kUnknownLabel, kUnknownLabel};
  std::vector<Decision> decisions = {
      accept(1),   // correct
      accept(2),   // wrong class
      accept(2),   // correct
      reject(2),   // known rejected
      reject(1),   // unknown correctly rejected
      accept(1),   // unknown wrongly accepted
  };
  auto r = tally_decisions(labels, decisions, 2);
  CHECK(r.per_class_accuracy[0] == doctest::Approx(0.5));
  CHECK(r.per_class_accuracy[1] == doctest::Approx(0.5));
  CHECK(r.unknown_rejection_rate == doctest::Approx(0.5));
  CHECK(r.overall_accuracy == doctest::Approx(3.0 / 6.0));
  CHECK(r.confusion(0, 0) == 1);
  CHECK(r.confusion(0, 1) == 1);
  CHECK(r.confusion(1, 1) == 1);
  CHECK(r.confusion(1, 2) == 1);
  CHECK(r.confusion(2, 2) == 1);
  CHECK(r.confusion(2, 0) == 1);
  CHECK(r.known_total == 4);
  CHECK(r.unknown_total == 2);

  // confusion row sums equal per-class counts; trace/total equals overall
  for (int row = 0; row < 3; ++row) CHECK(r.confusion.row(row).sum() == 2);
  CHECK(std::abs(r.overall_accuracy -
                 static_cast<double>(r.confusion.trace()) / 6.0) < 1e-12);
}

TEST_CASE("degenerate tallies") {
  std::vector<int> labels = {1, 2, kUnknownLabel};
  auto all_correct = tally_decisions(
      labels, {accept(1), accept(2), reject(1)}, 2);
  CHECK(all_correct.overall_accuracy == 1.0);
  CHECK(all_correct.unknown_rejection_rate == 1.0);

  auto always_unknown = tally_decisions(
      labels, {reject(1), reject(1), reject(1)}, 2);
  CHECK(always_unknown.unknown_rejection_rate == 1.0);
  CHECK(always_unknown.per_class_accuracy[0] == 0.0);
  CHECK(always_unknown.per_class_accuracy[1] == 0.0);
  CHECK(always_unknown.overall_accuracy == doctest::Approx(1.0 / 3.0));

  CHECK_THROWS_AS(tally_decisions({3}, {accept(1)}, 2), Error);
  CHECK_THROWS_AS(tally_decisions({1, 2}, {accept(1)}, 2), DimensionError);
}

TEST_CASE("evaluate wires probabilities through the chosen rule") {
  auto cfg = tiny_config();
  auto data = prepare_data(cfg);
  auto art = run_single(cfg, data, 5);

  // histogram counts partition the test population
  const auto& r = art.report;
  CHECK(r.histogram.known_counts.sum() == r.known_total);
  CHECK(r.histogram.unknown_counts.sum() == r.unknown_total);
  CHECK(r.confusion.sum() == r.known_total + r.unknown_total);
  CHECK(std::abs(r.overall_accuracy -
                 static_cast<double>(r.confusion.trace()) /
                     static_cast<double>(r.known_total + r.unknown_total)) <
        1e-12);

  // same model under collective vs ovrn-max: identical probability streams
  auto base = evaluate(art.model, data.test_windows, RuleKind::ovrn_max_baseline);
  CHECK(base.prob_stream_hash_hex == r.prob_stream_hash_hex);
  CHECK(base.model_hash_hex == r.model_hash_hex);

  // evaluating with mismatched windows fails
  auto bad = data.test_windows;
  bad[0].matrix = Eigen::MatrixXd::Zero(20, 7);
  CHECK_THROWS_AS(
      evaluate(art.model, bad, RuleKind::ovrn_max_baseline), DimensionError);

  // unlabeled window rejected
  auto unlabeled = data.test_windows;
  unlabeled[0].label = kUnlabeled;
  CHECK_THROWS_AS(
      evaluate(art.model, unlabeled, RuleKind::ovrn_max_baseline), Error);
}

TEST_CASE("report export and import are field-identical") {
  auto cfg = tiny_config();
  auto data = prepare_data(cfg);
  auto art = run_single(cfg, data, 9);
  const auto dir = temp_dir("ovrn_eval_export");
  export_report(art.report, dir.string());

  auto back = import_report((dir / "report.json").string());
  CHECK(back.num_classes == art.report.num_classes);
  CHECK(back.per_class_accuracy == art.report.per_class_accuracy);
  CHECK(back.unknown_rejection_rate == art.report.unknown_rejection_rate);
  CHECK(back.overall_accuracy == art.report.overall_accuracy);
  CHECK(back.confusion == art.report.confusion);
  CHECK(back.histogram.edges == art.report.histogram.edges);
  CHECK(back.histogram.known_counts == art.report.histogram.known_counts);
  CHECK(back.histogram.unknown_counts == art.report.histogram.unknown_counts);
  CHECK(back.known_total == art.report.known_total);
  CHECK(back.unknown_total == art.report.unknown_total);
  CHECK(back.rule == art.report.rule);
  CHECK(back.seed == art.report.seed);
  CHECK(back.model_hash_hex == art.report.model_hash_hex);
  CHECK(back.prob_stream_hash_hex == art.report.prob_stream_hash_hex);

  // confusion csv row sums equal per-class totals
  std::ifstream conf(dir / "confusion.csv");
  std::string line;
  std::getline(conf, line);  // header
  long total = 0;
  while (std::getline(conf, line)) {
    std::size_t pos = line.find(',');
    long row_sum = 0;
    while (pos != std::string::npos) {
      const auto next = line.find(',', pos + 1);
      row_sum += std::stol(line.substr(pos + 1, next - pos - 1));
      pos = next;
    }
    total += row_sum;
  }
  CHECK(total == art.report.known_total + art.report.unknown_total);
  fs::remove_all(dir);
}

TEST_CASE("single-repetition experiment equals its one run") {
  auto cfg = tiny_config();
  auto result = run_experiment(cfg);
  REQUIRE(result.per_run.size() == 1);
  CHECK(result.overall_mean == result.per_run[0].overall_accuracy);
  CHECK(result.ufc_mean == result.per_run[0].unknown_rejection_rate);
  CHECK(result.overall_stddev == 0.0);
  CHECK(result.per_class_accuracy_mean == result.per_run[0].per_class_accuracy);
  CHECK(result.confusion_sum == result.per_run[0].confusion);
}

TEST_CASE("repetition averaging and stddev") {
  auto cfg = tiny_config();
  cfg.repetitions = 3;
  auto result = run_experiment(cfg);
  REQUIRE(result.per_run.size() == 3);
  double mean = 0;
  for (const auto& r : result.per_run) mean += r.overall_accuracy;
  mean /= 3;
  CHECK(result.overall_mean == doctest::Approx(mean).epsilon(1e-12));
  double var = 0;
  for (const auto& r : result.per_run)
    var += (r.overall_accuracy - mean) * (r.overall_accuracy - mean);
  CHECK(result.overall_stddev == doctest::Approx(std::sqrt(var / 2)).epsilon(1e-9));
  // distinct seeds per repetition
  CHECK(result.per_run[0].seed + 1 == result.per_run[1].seed);
  CHECK(result.per_run[1].seed + 1 == result.per_run[2].seed);
}

TEST_CASE("experiment artifacts allow byte-identical re-evaluation") {
  const auto dir = temp_dir("ovrn_eval_idempotent");
  auto cfg = tiny_config(dir.string());
  auto result = run_experiment(cfg);
  (void)result;

  auto model = load_model((dir / "rep00" / "model.ovrn").string());
  auto thresholds =
      load_thresholds((dir / "rep00" / "thresholds.json").string());
  auto data = prepare_data(cfg);
  REQUIRE(model.norm_stats.has_value());
  CHECK(model.norm_stats->fitted_on == data.stats.fitted_on);

  auto report = evaluate(model, data.test_windows, RuleKind::collective,
                         &thresholds, cfg.fixed_threshold);
  report.seed = cfg.seed;
  const auto dir2 = temp_dir("ovrn_eval_idempotent2");
  export_report(report, dir2.string());

  std::ifstream a(dir / "rep00" / "report.json", std::ios::binary);
  std::ifstream b(dir2 / "report.json", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)),
                 std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)),
                 std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK(!sa.empty());
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("failed repetitions surface partial results") {
  auto cfg = tiny_config();
  cfg.repetitions = 2;
  cfg.model.kernel_sizes = {3};
  cfg.model.num_classes = 3;  // data only has 2 classes -> run_single throws
  try {
    run_experiment(cfg);
    FAIL("expected ExperimentError");
  } catch (const ExperimentError& e) {
    CHECK(std::string(e.what()).find("repetition") != std::string::npos);
    CHECK(e.partial_reports.empty());  // every rep fails the same way
  }
}

TEST_CASE("config files parse, echo, and reject unknown keys") {
  const std::string text = R"(# test config
dataset = synthetic
synth.known_classes = 3
synth.unknown_classes = 1
model.extractor = multiscale_standard
model.kernels = 3,5
train.batch_size = 16   # trailing comment
rule = ovrn_max_baseline
repetitions = 4
seed = 77
)";
  auto cfg = parse_config_text(text);
  CHECK(cfg.synth.known_classes == 3);
  CHECK(cfg.model.extractor == ExtractorKind::multiscale_standard);
  CHECK(cfg.model.kernel_sizes == std::vector<int>{3, 5});
  CHECK(cfg.train_cfg.batch_size == 16);
  CHECK(cfg.rule == RuleKind::ovrn_max_baseline);
  CHECK(cfg.repetitions == 4);
  CHECK(cfg.seed == 77);

  const std::string echo = format_config(cfg);
  auto cfg2 = parse_config_text(echo);
  CHECK(format_config(cfg2) == echo);

  CHECK_THROWS_WITH_AS(parse_config_text("bogus_key = 1\n"),
                       doctest::Contains("bogus_key"), ParseError);
  CHECK_THROWS_WITH_AS(parse_config_text("train.batch_size = soon\n"),
                       doctest::Contains("line 1"), ParseError);
  CHECK_THROWS_AS(parse_config_text("just text\n"), ParseError);
}

TEST_CASE("csv dataset round trip through prepare_data") {
  const auto dir = temp_dir("ovrn_eval_csv");
  fs::create_directories(dir);
  SyntheticSpec spec;
  spec.known_classes = 2;
  spec.unknown_classes = 1;
  spec.variables = 5;
  spec.run_length = 40;
  spec.train_runs_per_class = 3;
  spec.test_runs_per_class = 2;
  auto ds = generate_synthetic(spec);
  save_runs_csv((dir / "train.csv").string(), ds.train);
  save_runs_csv((dir / "test.csv").string(), ds.test);

  ExperimentConfig cfg;
  cfg.dataset = "csv";
  cfg.train_csv = (dir / "train.csv").string();
  cfg.test_csv = (dir / "test.csv").string();
  cfg.window_len = 20;
  auto data = prepare_data(cfg);
  CHECK(data.num_classes == 2);
  CHECK(data.num_variables == 5);
  CHECK(data.train_windows.size() == 2u * 3u * 21u);
  CHECK(data.test_windows.size() == 3u * 2u * 21u);
  fs::remove_all(dir);
}
