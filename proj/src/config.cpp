#include "ovrn/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace ovrn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& v, const std::string& key, std::size_t line) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line) + ": key '" + key +
                     "' needs an integer, got '" + v + "'");
  }
}

double to_double(const std::string& v, const std::string& key,
                 std::size_t line) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line) + ": key '" + key +
                     "' needs a number, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& v, const std::string& key,
                     std::size_t line) {
  try {
    std::size_t used = 0;
    const unsigned long long out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line) + ": key '" + key +
                     "' needs a nonnegative integer, got '" + v + "'");
  }
}

std::vector<int> to_int_list(const std::string& v, const std::string& key,
                             std::size_t line) {
  std::vector<int> out;
  std::string cur;
  std::istringstream is(v);
  while (std::getline(is, cur, ','))
    out.push_back(to_int(trim(cur), key, line));
  if (out.empty())
    throw ParseError("line " + std::to_string(line) + ": key '" + key +
                     "' needs a comma-separated integer list");
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(origin + " line " + std::to_string(line_no) +
                       ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::size_t ln = line_no;
    try {
      if (key == "dataset") cfg.dataset = value;
      else if (key == "train_csv") cfg.train_csv = value;
      else if (key == "test_csv") cfg.test_csv = value;
      else if (key == "synth.known_classes") cfg.synth.known_classes = to_int(value, key, ln);
      else if (key == "synth.unknown_classes") cfg.synth.unknown_classes = to_int(value, key, ln);
      else if (key == "synth.variables") cfg.synth.variables = to_int(value, key, ln);
      else if (key == "synth.run_length") cfg.synth.run_length = to_int(value, key, ln);
      else if (key == "synth.train_runs_per_class") cfg.synth.train_runs_per_class = to_int(value, key, ln);
      else if (key == "synth.test_runs_per_class") cfg.synth.test_runs_per_class = to_int(value, key, ln);
      else if (key == "synth.signature_scale") cfg.synth.signature_scale = to_double(value, key, ln);
      else if (key == "synth.noise_scale") cfg.synth.noise_scale = to_double(value, key, ln);
      else if (key == "synth.seed") cfg.synth.seed = to_u64(value, key, ln);
      else if (key == "window") cfg.window_len = to_int(value, key, ln);
      else if (key == "stride") cfg.stride = to_int(value, key, ln);
      else if (key == "model.extractor") cfg.model.extractor = parse_extractor_kind(value);
      else if (key == "model.kernels") cfg.model.kernel_sizes = to_int_list(value, key, ln);
      else if (key == "model.channels") cfg.model.channel_widths = to_int_list(value, key, ln);
      else if (key == "model.residual_depth") cfg.model.residual_depth = to_int(value, key, ln);
      else if (key == "model.head") cfg.model.head = parse_head_kind(value);
      else if (key == "model.ovrn_hidden") cfg.model.ovrn_hidden = to_int(value, key, ln);
      else if (key == "train.batch_size") cfg.train_cfg.batch_size = to_int(value, key, ln);
      else if (key == "train.learning_rate") cfg.train_cfg.learning_rate = to_double(value, key, ln);
      else if (key == "train.max_epochs") cfg.train_cfg.max_epochs = to_int(value, key, ln);
      else if (key == "train.convergence_tol") cfg.train_cfg.convergence_tol = to_double(value, key, ln);
      else if (key == "train.patience") cfg.train_cfg.patience = to_int(value, key, ln);
      else if (key == "train.loss") cfg.train_cfg.loss = parse_loss_kind(value);
      else if (key == "rule") cfg.rule = parse_rule_kind(value);
      else if (key == "quantile") cfg.quantile = to_double(value, key, ln);
      else if (key == "threshold") cfg.fixed_threshold = to_double(value, key, ln);
      else if (key == "repetitions") cfg.repetitions = to_int(value, key, ln);
      else if (key == "seed") cfg.seed = to_u64(value, key, ln);
      else if (key == "out_dir") cfg.out_dir = value;
      else if (key == "max_threads") cfg.max_threads = to_int(value, key, ln);
      else
        throw ParseError(origin + " line " + std::to_string(ln) +
                         ": unknown key '" + key + "'");
    } catch (const SpecError& e) {
      throw ParseError(origin + " line " + std::to_string(ln) + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

std::string format_config(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["dataset"] = cfg.dataset;
  if (!cfg.train_csv.empty()) kv["train_csv"] = cfg.train_csv;
  if (!cfg.test_csv.empty()) kv["test_csv"] = cfg.test_csv;
  kv["synth.known_classes"] = std::to_string(cfg.synth.known_classes);
  kv["synth.unknown_classes"] = std::to_string(cfg.synth.unknown_classes);
  kv["synth.variables"] = std::to_string(cfg.synth.variables);
  kv["synth.run_length"] = std::to_string(cfg.synth.run_length);
  kv["synth.train_runs_per_class"] = std::to_string(cfg.synth.train_runs_per_class);
  kv["synth.test_runs_per_class"] = std::to_string(cfg.synth.test_runs_per_class);
  kv["synth.signature_scale"] = fmt_double(cfg.synth.signature_scale);
  kv["synth.noise_scale"] = fmt_double(cfg.synth.noise_scale);
  kv["synth.seed"] = std::to_string(cfg.synth.seed);
  kv["window"] = std::to_string(cfg.window_len);
  kv["stride"] = std::to_string(cfg.stride);
  kv["model.extractor"] = to_string(cfg.model.extractor);
  kv["model.kernels"] = join_ints(cfg.model.kernel_sizes);
  kv["model.channels"] = join_ints(cfg.model.channel_widths);
  kv["model.residual_depth"] = std::to_string(cfg.model.residual_depth);
  kv["model.head"] = to_string(cfg.model.head);
  kv["model.ovrn_hidden"] = std::to_string(cfg.model.ovrn_hidden);
  kv["train.batch_size"] = std::to_string(cfg.train_cfg.batch_size);
  kv["train.learning_rate"] = fmt_double(cfg.train_cfg.learning_rate);
  kv["train.max_epochs"] = std::to_string(cfg.train_cfg.max_epochs);
  kv["train.convergence_tol"] = fmt_double(cfg.train_cfg.convergence_tol);
  kv["train.patience"] = std::to_string(cfg.train_cfg.patience);
  kv["train.loss"] = to_string(cfg.train_cfg.loss);
  kv["rule"] = to_string(cfg.rule);
  kv["quantile"] = fmt_double(cfg.quantile);
  kv["threshold"] = fmt_double(cfg.fixed_threshold);
  kv["repetitions"] = std::to_string(cfg.repetitions);
  kv["seed"] = std::to_string(cfg.seed);
  if (!cfg.out_dir.empty()) kv["out_dir"] = cfg.out_dir;
  kv["max_threads"] = std::to_string(cfg.max_threads);

  std::string out;
  for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
  return out;
}

}  // namespace ovrn
