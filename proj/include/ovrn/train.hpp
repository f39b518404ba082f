#pragma once

// Mini-batch training loop with seeded shuffling, Adam updates, and
// convergence control on the epoch-mean loss.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ovrn/model.hpp"
#include "ovrn/optim.hpp"

namespace ovrn {

enum class LossKind { ovrn_bce, softmax_ce, paper_literal };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::ovrn_bce: return "ovrn_bce";
    case LossKind::softmax_ce: return "softmax_ce";
    case LossKind::paper_literal: return "paper_literal";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "ovrn_bce") return LossKind::ovrn_bce;
  if (s == "softmax_ce") return LossKind::softmax_ce;
  if (s == "paper_literal") return LossKind::paper_literal;
  throw SpecError("unknown loss kind '" + s + "'");
}

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 0.0005;
  int max_epochs = 200;
  double convergence_tol = 1e-4;
  int patience = 5;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::ovrn_bce;

  void validate() const {
    if (batch_size < 1) throw SpecError("train config: batch_size must be >= 1");
    if (learning_rate <= 0)
      throw SpecError("train config: learning_rate must be positive");
    if (max_epochs < 1) throw SpecError("train config: max_epochs must be >= 1");
    if (convergence_tol <= 0)
      throw SpecError("train config: convergence_tol must be positive");
    if (patience < 1) throw SpecError("train config: patience must be >= 1");
  }
};

struct EpochRecord {
  double mean_loss = 0;
  double accuracy = 0;
  double wall_seconds = 0;  // not part of the canonical export
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::string stop_reason;
  double wall_seconds = 0;
};

// Line-oriented export: one record per epoch plus a stop-reason footer. Wall
// times stay out so identical seeds produce byte-identical files.
inline std::string format_train_log(const TrainLog& log) {
  std::string out;
  char buf[128];
  for (std::size_t e = 0; e < log.epochs.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "epoch=%zu loss=%.9g accuracy=%.9g\n",
                  e + 1, log.epochs[e].mean_loss, log.epochs[e].accuracy);
    out += buf;
  }
  out += "stop=" + log.stop_reason + "\n";
  return out;
}

inline void export_train_log(const TrainLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << format_train_log(log);
  if (!out) throw IoError("failed while writing '" + path + "'");
}

namespace detail {

// The per-batch tape allocates and frees a few tens of MB every step; with
// glibc defaults the freed pages go back to the kernel between batches and
// every step re-faults them. Raising the trim/mmap thresholds keeps the
// buffers in the heap. Process-wide, idempotent.
inline void keep_heap_warm() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace detail

template <typename S>
Tensor<S> compute_loss(LossKind kind, const Tensor<S>& probs,
                       const std::vector<int>& labels, Tape<S>* tape) {
  switch (kind) {
    case LossKind::ovrn_bce: return ovrn_bce_loss(probs, labels, tape);
    case LossKind::softmax_ce: return softmax_ce_loss(probs, labels, tape);
    case LossKind::paper_literal: return paper_literal_loss(probs, labels, tape);
  }
  throw Error("unreachable loss kind");
}

// Trains in place and reports the per-epoch trace. Stops when the epoch-mean
// loss has improved by less than convergence_tol for `patience` consecutive
// epochs, or at max_epochs.
template <typename S>
TrainLog train(Model<S>& model, const std::vector<WindowedSample>& windows,
               const TrainConfig& cfg) {
  cfg.validate();
  detail::keep_heap_warm();
  if (windows.empty()) throw TrainError("train: no training windows");
  const int K = model.spec.num_classes;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].label < 1 || windows[i].label > K)
      throw TrainError("train: window " + std::to_string(i) + " has label " +
                       std::to_string(windows[i].label) +
                       ", training labels must lie in 1.." + std::to_string(K));
    if (windows[i].matrix.rows() != model.spec.window_len ||
        windows[i].matrix.cols() != model.spec.num_variables)
      throw DimensionError("train: window " + std::to_string(i) + " is " +
                           std::to_string(windows[i].matrix.rows()) + "x" +
                           std::to_string(windows[i].matrix.cols()) +
                           ", model expects " +
                           std::to_string(model.spec.window_len) + "x" +
                           std::to_string(model.spec.num_variables));
  }

  auto named = parameters(model);
  std::vector<Tensor<S>> params;
  params.reserve(named.size());
  for (auto& [name, p] : named) {
    p.set_requires_grad(true);
    params.push_back(p);
  }
  AdamConfig<S> adam_cfg;
  adam_cfg.learning_rate = static_cast<S>(cfg.learning_rate);
  Adam<S> opt(params, adam_cfg);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainLog log;
  const auto t0 = std::chrono::steady_clock::now();
  double best = std::numeric_limits<double>::infinity();
  int stall = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto e0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> idx(order.begin() +
                                       static_cast<std::ptrdiff_t>(start),
                                   order.begin() +
                                       static_cast<std::ptrdiff_t>(stop));
      std::vector<int> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i)
        labels[i] = windows[idx[i]].label;

      auto batch = batch_tensor<S>(windows, idx);
      Tape<S> tape;
      auto probs = forward(model, batch, Mode::train, &tape);
      auto loss = compute_loss(cfg.loss, probs, labels, &tape);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw TrainError("train: non-finite loss at epoch " +
                         std::to_string(epoch) + ", batch " +
                         std::to_string(batch_index) + " (windows " +
                         std::to_string(start) + ".." + std::to_string(stop - 1) +
                         " of the shuffled order)");
      tape.backward(loss);
      opt.step();

      loss_sum += lv * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        int arg = 0;
        S bestp = probs.value()[static_cast<Eigen::Index>(i) * K];
        for (int k = 1; k < K; ++k) {
          const S v = probs.value()[static_cast<Eigen::Index>(i) * K + k];
          if (v > bestp) {
            bestp = v;
            arg = k;
          }
        }
        if (arg + 1 == labels[i]) ++correct;
      }
    }

    EpochRecord rec;
    rec.mean_loss = loss_sum / static_cast<double>(order.size());
    rec.accuracy =
        static_cast<double>(correct) / static_cast<double>(order.size());
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - e0)
            .count();
    log.epochs.push_back(rec);

    if (best - rec.mean_loss < cfg.convergence_tol) {
      if (++stall >= cfg.patience) {
        log.stop_reason = "converged";
        break;
      }
    } else {
      stall = 0;
    }
    best = std::min(best, rec.mean_loss);
  }
  if (log.stop_reason.empty()) log.stop_reason = "max_epochs";
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  model.meta.epochs = static_cast<int>(log.epochs.size());
  model.meta.final_loss = log.epochs.back().mean_loss;
  model.meta.seed = cfg.seed;
  return log;
}

}  // namespace ovrn
