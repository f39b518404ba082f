#include "ovrn/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

namespace ovrn {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

double parse_cell(const std::string& raw, std::size_t line_no,
                  const std::string& column) {
  const std::string s = trim(raw);
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v))
    throw ParseError("line " + std::to_string(line_no) +
                     ": non-numeric value '" + raw + "' in column '" + column +
                     "'");
  return v;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t a,
                       std::uint64_t b) {
  std::uint64_t parts[4] = {seed, tag, a, b};
  return fnv1a64(parts, sizeof(parts));
}

struct SignatureComponent {
  int var = 0;
  double drift = 0;      // ramp end value
  double amplitude = 0;  // sinusoid amplitude
  double frequency = 0;  // cycles per run
  double phase = 0;
};

struct ClassSignature {
  std::vector<SignatureComponent> parts;
};

ClassSignature make_known_signature(const SyntheticSpec& spec, int cls) {
  std::mt19937_64 rng(mix_seed(spec.seed, 0x51677, static_cast<std::uint64_t>(cls), 0));
  ClassSignature sig;
  std::vector<int> order(static_cast<std::size_t>(spec.variables));
  for (int j = 0; j < spec.variables; ++j) order[static_cast<std::size_t>(j)] = j;
  std::shuffle(order.begin(), order.end(), rng);
  const int nvars = std::min(3, spec.variables);

  std::uniform_real_distribution<double> mag(1.0, 1.5);
  std::uniform_real_distribution<double> amp(0.5, 0.9);
  std::uniform_real_distribution<double> sign01(0.0, 1.0);
  std::uniform_real_distribution<double> freq(1.5, 6.5);
  std::uniform_real_distribution<double> ph(0.0, 2 * std::numbers::pi);
  const double f = freq(rng);
  const double phase = ph(rng);
  for (int i = 0; i < nvars; ++i) {
    SignatureComponent part;
    part.var = order[static_cast<std::size_t>(i)];
    part.drift = (sign01(rng) < 0.5 ? -1.0 : 1.0) * mag(rng) *
                 spec.signature_scale;
    part.amplitude = amp(rng) * spec.signature_scale;
    part.frequency = f;
    part.phase = phase;
    sig.parts.push_back(part);
  }
  return sig;
}

// Unknown states are asymmetric blends of two known signatures: close enough
// to the known manifolds that a closed-set classifier keeps assigning them,
// which is the regime an open-set rule has to handle.
ClassSignature make_unknown_signature(const SyntheticSpec& spec, int unknown_index,
                                      const std::vector<ClassSignature>& known) {
  const int K = spec.known_classes;
  const int a = (unknown_index - 1) % K;
  const int b = (unknown_index) % K;
  const double wa = 0.75, wb = 0.55;
  ClassSignature sig;
  for (const auto& part : known[static_cast<std::size_t>(a)].parts) {
    SignatureComponent p = part;
    p.drift *= wa;
    p.amplitude *= wa;
    sig.parts.push_back(p);
  }
  for (const auto& part : known[static_cast<std::size_t>(b)].parts) {
    SignatureComponent p = part;
    p.drift *= wb;
    p.amplitude *= wb;
    sig.parts.push_back(p);
  }
  return sig;
}

RawRun make_run(const SyntheticSpec& spec, const ClassSignature& sig, int cls,
                int run_index, bool test_split) {
  RawRun run;
  run.samples = Eigen::MatrixXd::Zero(spec.run_length, spec.variables);
  const std::uint64_t tag = test_split ? 0x7E57 : 0x7124;
  std::mt19937_64 rng(mix_seed(spec.seed, tag, static_cast<std::uint64_t>(cls),
                               static_cast<std::uint64_t>(run_index)));
  std::normal_distribution<double> noise(0.0, 1.0);
  // Per-run jitter keeps the class manifold wide: same signature family,
  // never the same trace. It scales with noise_scale so a noise-free spec
  // still degenerates to identical runs.
  const double f = std::min(spec.noise_scale / 0.25, 2.0);
  std::uniform_real_distribution<double> drift_jit(1.0 - 0.2 * f, 1.0 + 0.2 * f);
  std::uniform_real_distribution<double> amp_jit(1.0 - 0.3 * f, 1.0 + 0.3 * f);
  std::uniform_real_distribution<double> phase_jit(-0.6 * f, 0.6 * f);
  std::vector<SignatureComponent> parts = sig.parts;
  for (auto& part : parts) {
    part.drift *= drift_jit(rng);
    part.amplitude *= amp_jit(rng);
    part.phase += phase_jit(rng);
  }
  const double n = static_cast<double>(spec.run_length);
  for (int t = 0; t < spec.run_length; ++t) {
    for (int j = 0; j < spec.variables; ++j)
      run.samples(t, j) = spec.noise_scale * noise(rng);
    for (const auto& part : parts) {
      const double ramp = part.drift * (static_cast<double>(t) / (n - 1));
      const double osc =
          part.amplitude *
          std::sin(2 * std::numbers::pi * part.frequency * t / n + part.phase);
      run.samples(t, part.var) += ramp + osc;
    }
  }
  const bool unknown = cls > spec.known_classes;
  run.state_label = unknown ? kUnknownLabel : cls;
  std::ostringstream id;
  id << (test_split ? "test_" : "train_")
     << (unknown ? "u" : "c") << (unknown ? cls - spec.known_classes : cls)
     << "_r" << run_index;
  run.run_id = id.str();
  return run;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (known_classes < 2)
    throw SpecError("synthetic spec: known_classes must be >= 2, got " +
                    std::to_string(known_classes));
  if (unknown_classes < 1)
    throw SpecError("synthetic spec: unknown_classes must be >= 1");
  if (variables < 1 || run_length < 2)
    throw SpecError("synthetic spec: variables and run_length must be positive");
  if (train_runs_per_class < 1 || test_runs_per_class < 1)
    throw SpecError("synthetic spec: runs per class must be positive");
  if (signature_scale <= 0 || noise_scale < 0)
    throw SpecError("synthetic spec: signature_scale must be positive and "
                    "noise_scale nonnegative");
}

std::vector<WindowedSample> window(const RawRun& run, int w, int stride) {
  if (w < 1 || stride < 1)
    throw SpecError("window: length and stride must be positive");
  const Eigen::Index n = run.samples.rows();
  if (n < w)
    throw InputTooShortError("run '" + run.run_id + "' has " +
                             std::to_string(n) + " steps, shorter than window " +
                             std::to_string(w));
  const Eigen::Index count = (n - w) / stride + 1;
  std::vector<WindowedSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Eigen::Index i = 0; i < count; ++i) {
    WindowedSample ws;
    ws.matrix = run.samples.middleRows(i * stride, w);
    ws.label = run.state_label;
    out.push_back(std::move(ws));
  }
  return out;
}

NormalizationStats fit_normalization(const std::vector<WindowedSample>& windows) {
  if (windows.empty())
    throw Error("fit_normalization: no windows supplied");
  const Eigen::Index m = windows.front().matrix.cols();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(m);
  Eigen::Index cells = 0;
  for (const auto& w : windows) {
    if (w.matrix.cols() != m)
      throw DimensionError("fit_normalization: variable count changes across "
                           "windows (" + std::to_string(w.matrix.cols()) +
                           " vs " + std::to_string(m) + ")");
    sum += w.matrix.colwise().sum().transpose();
    sq += w.matrix.array().square().colwise().sum().matrix().transpose();
    cells += w.matrix.rows();
  }
  if (cells < 2)
    throw Error("fit_normalization: need at least 2 values per variable");
  NormalizationStats stats;
  stats.mean = sum / static_cast<double>(cells);
  Eigen::VectorXd var =
      sq / static_cast<double>(cells) - stats.mean.cwiseProduct(stats.mean);
  stats.std_dev = var.cwiseMax(0.0).cwiseSqrt().cwiseMax(kStdFloor);
  stats.fitted_on = dataset_fingerprint(windows);
  return stats;
}

std::vector<WindowedSample> apply_normalization(
    std::vector<WindowedSample> windows, const NormalizationStats& stats) {
  for (auto& w : windows) {
    if (w.matrix.cols() != stats.mean.size())
      throw DimensionError("apply_normalization: window has " +
                           std::to_string(w.matrix.cols()) +
                           " variables but stats were fitted on " +
                           std::to_string(stats.mean.size()));
    w.matrix = (w.matrix.rowwise() - stats.mean.transpose()).array().rowwise() /
               stats.std_dev.transpose().array();
  }
  return windows;
}

std::string dataset_fingerprint(const std::vector<WindowedSample>& windows) {
  std::uint64_t h = kFnvOffset;
  const std::uint64_t count = windows.size();
  h = fnv1a64(&count, sizeof(count), h);
  for (const auto& w : windows) {
    const std::int64_t dims[2] = {w.matrix.rows(), w.matrix.cols()};
    h = fnv1a64(dims, sizeof(dims), h);
    h = fnv1a64(&w.label, sizeof(w.label), h);
    h = fnv1a64(w.matrix.data(),
                sizeof(double) * static_cast<std::size_t>(w.matrix.size()), h);
  }
  return hex64(h);
}

std::vector<RawRun> load_runs_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");

  std::string line;
  if (!std::getline(in, line))
    throw ParseError("line 1: file '" + path + "' is empty");
  const auto header = split_fields(line);
  std::ptrdiff_t run_col = -1, state_col = -1;
  std::vector<std::string> var_names;
  std::vector<std::size_t> var_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string name = trim(header[i]);
    if (name == "run_id") {
      run_col = static_cast<std::ptrdiff_t>(i);
    } else if (name == "state") {
      state_col = static_cast<std::ptrdiff_t>(i);
    } else {
      var_names.push_back(name);
      var_cols.push_back(i);
    }
  }
  if (run_col < 0)
    throw ParseError("line 1: missing required column 'run_id'");
  if (state_col < 0)
    throw ParseError("line 1: missing required column 'state'");
  if (var_names.empty())
    throw ParseError("line 1: no variable columns beyond run_id/state");

  struct Group {
    RawRun run;
    std::vector<Eigen::VectorXd> rows;
  };
  std::vector<Group> groups;
  std::map<std::pair<std::string, int>, std::size_t> index;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    const std::string run_id = trim(fields[static_cast<std::size_t>(run_col)]);
    const double state_raw =
        parse_cell(fields[static_cast<std::size_t>(state_col)], line_no, "state");
    const int state = static_cast<int>(state_raw);
    if (static_cast<double>(state) != state_raw || state < 0)
      throw ParseError("line " + std::to_string(line_no) +
                       ": state must be a nonnegative integer, got '" +
                       fields[static_cast<std::size_t>(state_col)] + "'");
    Eigen::VectorXd row(static_cast<Eigen::Index>(var_cols.size()));
    for (std::size_t j = 0; j < var_cols.size(); ++j)
      row[static_cast<Eigen::Index>(j)] =
          parse_cell(fields[var_cols[j]], line_no, var_names[j]);

    const auto key = std::make_pair(run_id, state);
    auto it = index.find(key);
    if (it == index.end()) {
      index.emplace(key, groups.size());
      Group g;
      g.run.run_id = run_id;
      g.run.state_label = state;
      groups.push_back(std::move(g));
      it = index.find(key);
    }
    groups[it->second].rows.push_back(std::move(row));
  }

  std::vector<RawRun> runs;
  runs.reserve(groups.size());
  for (auto& g : groups) {
    g.run.samples.resize(static_cast<Eigen::Index>(g.rows.size()),
                         static_cast<Eigen::Index>(var_names.size()));
    for (std::size_t r = 0; r < g.rows.size(); ++r)
      g.run.samples.row(static_cast<Eigen::Index>(r)) = g.rows[r].transpose();
    runs.push_back(std::move(g.run));
  }
  return runs;
}

void save_runs_csv(const std::string& path, const std::vector<RawRun>& runs) {
  if (runs.empty()) throw Error("save_runs_csv: no runs to write");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const Eigen::Index m = runs.front().samples.cols();
  out << "run_id,state";
  for (Eigen::Index j = 0; j < m; ++j) out << ",var_" << (j + 1);
  out << "\n";
  char buf[32];
  for (const auto& run : runs) {
    if (run.samples.cols() != m)
      throw DimensionError("save_runs_csv: run '" + run.run_id + "' has " +
                           std::to_string(run.samples.cols()) +
                           " variables, expected " + std::to_string(m));
    for (Eigen::Index t = 0; t < run.samples.rows(); ++t) {
      out << run.run_id << "," << run.state_label;
      for (Eigen::Index j = 0; j < m; ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", run.samples(t, j));
        out << "," << buf;
      }
      out << "\n";
    }
  }
  if (!out) throw IoError("failed while writing '" + path + "'");
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const int total_classes = spec.known_classes + spec.unknown_classes;
  std::vector<ClassSignature> sigs;
  sigs.reserve(static_cast<std::size_t>(total_classes));
  for (int c = 1; c <= spec.known_classes; ++c)
    sigs.push_back(make_known_signature(spec, c));
  for (int u = 1; u <= spec.unknown_classes; ++u)
    sigs.push_back(make_unknown_signature(spec, u, sigs));

  SyntheticDataset ds;
  for (int c = 1; c <= spec.known_classes; ++c)
    for (int r = 0; r < spec.train_runs_per_class; ++r)
      ds.train.push_back(make_run(spec, sigs[static_cast<std::size_t>(c - 1)],
                                  c, r, false));
  for (int c = 1; c <= total_classes; ++c)
    for (int r = 0; r < spec.test_runs_per_class; ++r)
      ds.test.push_back(make_run(spec, sigs[static_cast<std::size_t>(c - 1)],
                                 c, r, true));
  return ds;
}

}  // namespace ovrn
