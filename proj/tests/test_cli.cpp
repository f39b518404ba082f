#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

#ifndef OVRN_CLI_PATH
#error "OVRN_CLI_PATH must point at the built binary"
#endif

const char* kCli = OVRN_CLI_PATH;

int run(const std::string& args, const std::string& log = "/dev/null") {
  const std::string cmd =
      std::string(kCli) + " " + args + " >" + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path scratch() {
  const auto dir = fs::temp_directory_path() / "ovrn_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const char* kTinyConfig = R"(dataset = synthetic
synth.known_classes = 2
synth.unknown_classes = 1
synth.variables = 6
synth.run_length = 60
synth.train_runs_per_class = 6
synth.test_runs_per_class = 3
window = 20
model.extractor = standard
model.kernels = 3
model.channels = 4
model.ovrn_hidden = 8
train.batch_size = 32
train.learning_rate = 0.002
train.max_epochs = 3
repetitions = 1
seed = 11
)";

}  // namespace

TEST_CASE("gen-synth, train, calibrate, evaluate, predict chain") {
  const auto dir = scratch();
  write(dir / "cfg", kTinyConfig);

  CHECK(run("gen-synth --config " + (dir / "cfg").string() + " --out-prefix " +
            (dir / "data").string()) == 0);
  CHECK(fs::exists(dir / "data_train.csv"));
  CHECK(fs::exists(dir / "data_test.csv"));

  // csv-backed config exercising the ingestion path end to end
  std::string csv_cfg = kTinyConfig;
  csv_cfg.replace(csv_cfg.find("synthetic"), 9, "csv");
  csv_cfg += "train_csv = " + (dir / "data_train.csv").string() + "\n";
  csv_cfg += "test_csv = " + (dir / "data_test.csv").string() + "\n";
  write(dir / "csv_cfg", csv_cfg);

  CHECK(run("train --config " + (dir / "csv_cfg").string() + " --out " +
            (dir / "model.ovrn").string() + " --log " +
            (dir / "train_log.txt").string()) == 0);
  CHECK(fs::exists(dir / "model.ovrn"));
  CHECK(slurp(dir / "train_log.txt").find("epoch=1") != std::string::npos);

  CHECK(run("calibrate --config " + (dir / "csv_cfg").string() + " --model " +
            (dir / "model.ovrn").string() + " --out " +
            (dir / "thr.json").string()) == 0);
  CHECK(fs::exists(dir / "thr.json"));

  CHECK(run("evaluate --config " + (dir / "csv_cfg").string() + " --model " +
            (dir / "model.ovrn").string() + " --thresholds " +
            (dir / "thr.json").string() + " --out " +
            (dir / "report").string()) == 0);
  CHECK(fs::exists(dir / "report" / "report.json"));
  CHECK(fs::exists(dir / "report" / "confusion.csv"));
  CHECK(fs::exists(dir / "report" / "histogram.csv"));

  CHECK(run("predict --model " + (dir / "model.ovrn").string() +
            " --thresholds " + (dir / "thr.json").string() + " --input " +
            (dir / "data_test.csv").string() + " --out " +
            (dir / "decisions.csv").string()) == 0);
  const auto decisions = slurp(dir / "decisions.csv");
  CHECK(decisions.find("run_id,window_index") != std::string::npos);
  CHECK(decisions.find("test_") != std::string::npos);

  fs::remove_all(dir);
}

TEST_CASE("experiment runs from a config file and honors seed override") {
  const auto dir = scratch();
  std::string cfg = kTinyConfig;
  cfg += "out_dir = " + (dir / "out").string() + "\n";
  write(dir / "cfg", cfg);

  CHECK(run("experiment --config " + (dir / "cfg").string(),
            (dir / "stdout.txt").string()) == 0);
  CHECK(fs::exists(dir / "out" / "averaged_report.json"));
  CHECK(fs::exists(dir / "out" / "effective_config.cfg"));
  CHECK(fs::exists(dir / "out" / "rep00" / "report.json"));
  const auto echoed = slurp(dir / "out" / "effective_config.cfg");
  CHECK(echoed.find("seed = 11") != std::string::npos);

  CHECK(run("experiment --config " + (dir / "cfg").string() + " --seed 12 " +
            "--out " + (dir / "out2").string()) == 0);
  CHECK(slurp(dir / "out2" / "effective_config.cfg").find("seed = 12") !=
        std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("calibrate before train reports a missing model") {
  const auto dir = scratch();
  write(dir / "cfg", kTinyConfig);
  const auto log = dir / "err.txt";
  CHECK(run("calibrate --config " + (dir / "cfg").string() + " --model " +
                (dir / "nope.ovrn").string() + " --out " +
                (dir / "thr.json").string(),
            log.string()) != 0);
  CHECK(slurp(log).find("cannot open") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("predict on a run shorter than the window fails cleanly") {
  const auto dir = scratch();
  write(dir / "cfg", kTinyConfig);
  CHECK(run("train --config " + (dir / "cfg").string() + " --out " +
            (dir / "model.ovrn").string()) == 0);

  std::string csv = "run_id,state,v1,v2,v3,v4,v5,v6\n";
  for (int t = 0; t < 5; ++t) {  // shorter than window 20
    csv += "short,1";
    for (int j = 0; j < 6; ++j) csv += ",0.5";
    csv += "\n";
  }
  write(dir / "short.csv", csv);
  const auto log = dir / "err.txt";
  CHECK(run("predict --model " + (dir / "model.ovrn").string() +
                " --rule ovrn_max_baseline --input " +
                (dir / "short.csv").string() + " --out " +
                (dir / "dec.csv").string(),
            log.string()) != 0);
  CHECK(slurp(log).find("shorter than window") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("usage errors exit nonzero") {
  CHECK(run("--definitely-not-a-flag") != 0);
  CHECK(run("train") != 0);              // missing required options
  CHECK(run("no-such-subcommand") != 0);
}

TEST_CASE("malformed config is a clean failure") {
  const auto dir = scratch();
  write(dir / "bad.cfg", "dataset = synthetic\nwat = 7\n");
  const auto log = dir / "err.txt";
  CHECK(run("experiment --config " + (dir / "bad.cfg").string(),
            log.string()) != 0);
  CHECK(slurp(log).find("unknown key 'wat'") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("OVRN_OUT_DIR overrides the output directory") {
  const auto dir = scratch();
  std::string cfg = kTinyConfig;
  cfg += "out_dir = " + (dir / "ignored").string() + "\n";
  write(dir / "cfg", cfg);
  const std::string cmd = "OVRN_OUT_DIR=" + (dir / "env_out").string() + " " +
                          std::string(kCli) + " experiment --config " +
                          (dir / "cfg").string() + " >/dev/null 2>&1";
  CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  CHECK(fs::exists(dir / "env_out" / "averaged_report.json"));
  CHECK(!fs::exists(dir / "ignored"));
  fs::remove_all(dir);
}
