#pragma once

// Feature-extractor families (standard, residual, multi-scale) and the two
// classifier heads behind one forward interface producing per-class
// probabilities.

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ovrn/datapipe.hpp"
#include "ovrn/ops.hpp"

namespace ovrn {

enum class ExtractorKind {
  standard,
  residual,
  multiscale_standard,
  multiscale_residual
};
enum class HeadKind { softmax, ovrn };

inline std::string to_string(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::standard: return "standard";
    case ExtractorKind::residual: return "residual";
    case ExtractorKind::multiscale_standard: return "multiscale_standard";
    case ExtractorKind::multiscale_residual: return "multiscale_residual";
  }
  return "?";
}

inline ExtractorKind parse_extractor_kind(const std::string& s) {
  if (s == "standard") return ExtractorKind::standard;
  if (s == "residual") return ExtractorKind::residual;
  if (s == "multiscale_standard") return ExtractorKind::multiscale_standard;
  if (s == "multiscale_residual") return ExtractorKind::multiscale_residual;
  throw SpecError("unknown extractor kind '" + s + "'");
}

inline std::string to_string(HeadKind k) {
  return k == HeadKind::softmax ? "softmax" : "ovrn";
}

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "softmax") return HeadKind::softmax;
  if (s == "ovrn") return HeadKind::ovrn;
  throw SpecError("unknown head kind '" + s + "'");
}

constexpr int kPoolSize = 2;      // 2x2 window, stride 2, after every stage
constexpr float kBnMomentum = 0.1f;
constexpr float kBnEps = 1e-5f;

struct ModelSpec {
  ExtractorKind extractor = ExtractorKind::multiscale_residual;
  std::vector<int> kernel_sizes = {3, 5, 7};  // one per branch
  std::vector<int> channel_widths = {8, 16};  // one per stage
  int residual_depth = 1;                     // blocks per stage
  HeadKind head = HeadKind::ovrn;
  int ovrn_hidden = 32;
  int num_classes = 0;   // K
  int window_len = 20;   // w
  int num_variables = 0; // m

  bool multiscale() const {
    return extractor == ExtractorKind::multiscale_standard ||
           extractor == ExtractorKind::multiscale_residual;
  }
  bool residual() const {
    return extractor == ExtractorKind::residual ||
           extractor == ExtractorKind::multiscale_residual;
  }

  void validate() const {
    if (num_classes < 2)
      throw SpecError("model spec: num_classes must be >= 2, got " +
                      std::to_string(num_classes));
    if (window_len < 1 || num_variables < 1)
      throw SpecError("model spec: input shape must be positive, got " +
                      std::to_string(window_len) + "x" +
                      std::to_string(num_variables));
    if (multiscale()) {
      if (kernel_sizes.size() < 2)
        throw SpecError("model spec: multiscale extractors need >= 2 kernel "
                        "sizes, got " + std::to_string(kernel_sizes.size()));
    } else if (kernel_sizes.size() != 1) {
      throw SpecError("model spec: single-scale extractors take exactly 1 "
                      "kernel size, got " + std::to_string(kernel_sizes.size()));
    }
    for (int k : kernel_sizes)
      if (k < 1 || k % 2 == 0)
        throw SpecError("model spec: kernel sizes must be odd positive, got " +
                        std::to_string(k));
    if (channel_widths.empty())
      throw SpecError("model spec: at least one stage required");
    for (int c : channel_widths)
      if (c < 1) throw SpecError("model spec: channel widths must be positive");
    if (residual() && residual_depth < 1)
      throw SpecError("model spec: residual depth must be >= 1");
    if (head == HeadKind::ovrn && ovrn_hidden < 1)
      throw SpecError("model spec: ovrn_hidden must be >= 1");

    int h = window_len, w = num_variables;
    for (std::size_t s = 0; s < channel_widths.size(); ++s) {
      if (h < kPoolSize || w < kPoolSize)
        throw SpecError("model spec: stage " + std::to_string(s + 1) +
                        " input " + std::to_string(h) + "x" + std::to_string(w) +
                        " is smaller than the " + std::to_string(kPoolSize) +
                        "x" + std::to_string(kPoolSize) + " pooling window");
      h /= kPoolSize;
      w /= kPoolSize;
    }
  }

  std::pair<int, int> output_spatial() const {
    int h = window_len, w = num_variables;
    for (std::size_t s = 0; s < channel_widths.size(); ++s) {
      h /= kPoolSize;
      w /= kPoolSize;
    }
    return {h, w};
  }

  int branch_count() const {
    return static_cast<int>(kernel_sizes.size());
  }

  // Flattened feature width the head consumes.
  int feature_dim() const {
    auto [h, w] = output_spatial();
    return channel_widths.back() * h * w * branch_count();
  }

  int stage_count() const { return static_cast<int>(channel_widths.size()); }
};

template <typename S>
struct Conv2dLayer {
  Tensor<S> weight;  // [out,in,k,k]
  Tensor<S> bias;    // [out]
};

template <typename S>
struct BatchNormLayer {
  Tensor<S> gamma, beta;
  Tensor<S> running_mean, running_var;
};

template <typename S>
struct DenseLayer {
  Tensor<S> weight;  // [in,out]
  Tensor<S> bias;    // [out]
};

template <typename S>
struct ResidualBlock {
  Conv2dLayer<S> conv1, conv2;
  BatchNormLayer<S> bn1, bn2;
  bool has_projection = false;  // 1x1 shortcut when channels change
  Conv2dLayer<S> proj;
  BatchNormLayer<S> proj_bn;
};

template <typename S>
struct Stage {
  // standard kinds use plain, residual kinds use blocks
  std::optional<Conv2dLayer<S>> plain_conv;
  std::optional<BatchNormLayer<S>> plain_bn;
  std::vector<ResidualBlock<S>> blocks;
};

template <typename S>
struct Branch {
  int kernel_size = 0;
  std::vector<Stage<S>> stages;
};

template <typename S>
struct OvrnBranch {
  DenseLayer<S> hidden;
  DenseLayer<S> out;  // single logit
};

struct TrainMeta {
  int epochs = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
};

template <typename S>
struct Model {
  ModelSpec spec;
  std::vector<Branch<S>> branches;
  std::vector<OvrnBranch<S>> ovrn_head;       // size K when head == ovrn
  std::optional<DenseLayer<S>> softmax_head;  // when head == softmax
  std::optional<NormalizationStats> norm_stats;
  std::string stats_fingerprint;
  TrainMeta meta;
};

namespace detail {

template <typename S>
void init_uniform(Tensor<S>& t, double fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < t.size(); ++i)
    t.value()[i] = static_cast<S>(dist(rng));
}

template <typename S>
Conv2dLayer<S> make_conv(int out_ch, int in_ch, int k, std::mt19937_64& rng) {
  Conv2dLayer<S> layer;
  layer.weight = Tensor<S>({out_ch, in_ch, k, k});
  init_uniform(layer.weight, static_cast<double>(in_ch) * k * k, rng);
  layer.bias = Tensor<S>::zeros({out_ch});
  return layer;
}

template <typename S>
BatchNormLayer<S> make_bn(int channels) {
  BatchNormLayer<S> layer;
  layer.gamma = Tensor<S>::full({channels}, S(1));
  layer.beta = Tensor<S>::zeros({channels});
  layer.running_mean = Tensor<S>::zeros({channels});
  layer.running_var = Tensor<S>::full({channels}, S(1));
  return layer;
}

template <typename S>
DenseLayer<S> make_dense(int in, int out, std::mt19937_64& rng) {
  DenseLayer<S> layer;
  layer.weight = Tensor<S>({in, out});
  init_uniform(layer.weight, static_cast<double>(in), rng);
  layer.bias = Tensor<S>::zeros({out});
  return layer;
}

}  // namespace detail

// Fresh model with fan-in-scaled uniform weights, drawn in a fixed traversal
// order so equal seeds give identical parameters.
template <typename S>
Model<S> build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<S> model;
  model.spec = spec;
  model.meta.seed = seed;
  std::mt19937_64 rng(seed);

  for (int k : spec.kernel_sizes) {
    Branch<S> branch;
    branch.kernel_size = k;
    int in_ch = 1;
    for (int out_ch : spec.channel_widths) {
      Stage<S> stage;
      if (spec.residual()) {
        int block_in = in_ch;
        for (int b = 0; b < spec.residual_depth; ++b) {
          ResidualBlock<S> block;
          block.conv1 = detail::make_conv<S>(out_ch, block_in, k, rng);
          block.bn1 = detail::make_bn<S>(out_ch);
          block.conv2 = detail::make_conv<S>(out_ch, out_ch, k, rng);
          block.bn2 = detail::make_bn<S>(out_ch);
          if (block_in != out_ch) {
            block.has_projection = true;
            block.proj = detail::make_conv<S>(out_ch, block_in, 1, rng);
            block.proj_bn = detail::make_bn<S>(out_ch);
          }
          stage.blocks.push_back(std::move(block));
          block_in = out_ch;
        }
      } else {
        stage.plain_conv = detail::make_conv<S>(out_ch, in_ch, k, rng);
        stage.plain_bn = detail::make_bn<S>(out_ch);
      }
      branch.stages.push_back(std::move(stage));
      in_ch = out_ch;
    }
    model.branches.push_back(std::move(branch));
  }

  const int features = spec.feature_dim();
  if (spec.head == HeadKind::ovrn) {
    for (int c = 0; c < spec.num_classes; ++c) {
      OvrnBranch<S> ob;
      ob.hidden = detail::make_dense<S>(features, spec.ovrn_hidden, rng);
      ob.out = detail::make_dense<S>(spec.ovrn_hidden, 1, rng);
      model.ovrn_head.push_back(std::move(ob));
    }
  } else {
    model.softmax_head = detail::make_dense<S>(features, spec.num_classes, rng);
  }
  return model;
}

// Visits every state tensor with a stable name; trainable excludes the BN
// running statistics.
template <typename S, typename F>
void visit_state(Model<S>& model, F&& f) {
  auto bn = [&](const std::string& prefix, BatchNormLayer<S>& layer) {
    f(prefix + ".gamma", layer.gamma, true);
    f(prefix + ".beta", layer.beta, true);
    f(prefix + ".running_mean", layer.running_mean, false);
    f(prefix + ".running_var", layer.running_var, false);
  };
  auto conv = [&](const std::string& prefix, Conv2dLayer<S>& layer) {
    f(prefix + ".weight", layer.weight, true);
    f(prefix + ".bias", layer.bias, true);
  };
  auto dense_l = [&](const std::string& prefix, DenseLayer<S>& layer) {
    f(prefix + ".weight", layer.weight, true);
    f(prefix + ".bias", layer.bias, true);
  };

  for (std::size_t bi = 0; bi < model.branches.size(); ++bi) {
    auto& branch = model.branches[bi];
    const std::string bp = "extractor.branch" + std::to_string(bi);
    for (std::size_t si = 0; si < branch.stages.size(); ++si) {
      auto& stage = branch.stages[si];
      const std::string sp = bp + ".stage" + std::to_string(si);
      if (stage.plain_conv) {
        conv(sp + ".conv", *stage.plain_conv);
        bn(sp + ".bn", *stage.plain_bn);
      }
      for (std::size_t ki = 0; ki < stage.blocks.size(); ++ki) {
        auto& block = stage.blocks[ki];
        const std::string kp = sp + ".block" + std::to_string(ki);
        conv(kp + ".conv1", block.conv1);
        bn(kp + ".bn1", block.bn1);
        conv(kp + ".conv2", block.conv2);
        bn(kp + ".bn2", block.bn2);
        if (block.has_projection) {
          conv(kp + ".proj", block.proj);
          bn(kp + ".proj_bn", block.proj_bn);
        }
      }
    }
  }
  if (model.softmax_head) dense_l("head.softmax", *model.softmax_head);
  for (std::size_t c = 0; c < model.ovrn_head.size(); ++c) {
    const std::string hp = "head.class" + std::to_string(c + 1);
    dense_l(hp + ".hidden", model.ovrn_head[c].hidden);
    dense_l(hp + ".out", model.ovrn_head[c].out);
  }
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> named_state(Model<S>& model) {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  visit_state(model, [&](const std::string& name, Tensor<S>& t, bool) {
    out.emplace_back(name, t);
  });
  return out;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> parameters(Model<S>& model) {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  visit_state(model, [&](const std::string& name, Tensor<S>& t, bool train) {
    if (train) out.emplace_back(name, t);
  });
  return out;
}

template <typename S>
std::string model_hash(Model<S>& model) {
  std::uint64_t h = kFnvOffset;
  const std::string kind =
      to_string(model.spec.extractor) + "/" + to_string(model.spec.head);
  h = fnv1a64(kind.data(), kind.size(), h);
  visit_state(model, [&](const std::string& name, Tensor<S>& t, bool) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.value().data(),
                sizeof(S) * static_cast<std::size_t>(t.size()), h);
  });
  return hex64(h);
}

namespace detail {

template <typename S>
Tensor<S> residual_block_forward(ResidualBlock<S>& block, const Tensor<S>& x,
                                 Mode mode, Tape<S>* tape) {
  auto h = conv2d(x, block.conv1.weight, block.conv1.bias, Padding::same, tape);
  h = batchnorm(h, block.bn1.gamma, block.bn1.beta, block.bn1.running_mean,
                block.bn1.running_var, mode, S(kBnMomentum), S(kBnEps), tape);
  h = relu(h, tape);
  h = conv2d(h, block.conv2.weight, block.conv2.bias, Padding::same, tape);
  h = batchnorm(h, block.bn2.gamma, block.bn2.beta, block.bn2.running_mean,
                block.bn2.running_var, mode, S(kBnMomentum), S(kBnEps), tape);
  Tensor<S> shortcut = x;
  if (block.has_projection) {
    shortcut =
        conv2d(x, block.proj.weight, block.proj.bias, Padding::same, tape);
    shortcut = batchnorm(shortcut, block.proj_bn.gamma, block.proj_bn.beta,
                         block.proj_bn.running_mean, block.proj_bn.running_var,
                         mode, S(kBnMomentum), S(kBnEps), tape);
  }
  return relu(add(h, shortcut, tape), tape);
}

}  // namespace detail

// Batch of window matrices as probabilities over the K known states: each row
// is a softmax distribution or K independent sigmoid responses.
template <typename S>
Tensor<S> forward(Model<S>& model, const Tensor<S>& batch, Mode mode,
                  Tape<S>* tape = nullptr) {
  const auto& spec = model.spec;
  if (batch.rank() != 4 || batch.dim(1) != 1)
    throw DimensionError("forward: batch must be [n,1,w,m], got " +
                         seq_str(batch.shape()));
  if (batch.dim(2) != spec.window_len || batch.dim(3) != spec.num_variables)
    throw DimensionError("forward: window axis extents " +
                         std::to_string(batch.dim(2)) + "x" +
                         std::to_string(batch.dim(3)) +
                         " do not match model input " +
                         std::to_string(spec.window_len) + "x" +
                         std::to_string(spec.num_variables));

  std::vector<Tensor<S>> features;
  features.reserve(model.branches.size());
  for (auto& branch : model.branches) {
    Tensor<S> h = batch;
    for (auto& stage : branch.stages) {
      if (stage.plain_conv) {
        h = conv2d(h, stage.plain_conv->weight, stage.plain_conv->bias,
                   Padding::same, tape);
        h = batchnorm(h, stage.plain_bn->gamma, stage.plain_bn->beta,
                      stage.plain_bn->running_mean, stage.plain_bn->running_var,
                      mode, S(kBnMomentum), S(kBnEps), tape);
        h = relu(h, tape);
      }
      for (auto& block : stage.blocks)
        h = detail::residual_block_forward(block, h, mode, tape);
      h = maxpool2d(h, {kPoolSize, kPoolSize}, {kPoolSize, kPoolSize}, tape);
    }
    features.push_back(flatten(h, tape));
  }
  Tensor<S> feat = features.size() == 1 ? features.front()
                                        : concat_features(features, tape);

  if (spec.head == HeadKind::softmax) {
    auto logits =
        dense(feat, model.softmax_head->weight, model.softmax_head->bias, tape);
    return softmax(logits, tape);
  }
  std::vector<Tensor<S>> probs;
  probs.reserve(model.ovrn_head.size());
  for (auto& ob : model.ovrn_head) {
    auto h = relu(dense(feat, ob.hidden.weight, ob.hidden.bias, tape), tape);
    probs.push_back(sigmoid(dense(h, ob.out.weight, ob.out.bias, tape), tape));
  }
  return concat_features(probs, tape);
}

// Windows packed as a [n,1,w,m] batch.
template <typename S>
Tensor<S> batch_tensor(const std::vector<WindowedSample>& windows,
                       const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw Error("batch_tensor: empty index list");
  const Eigen::Index w = windows[idx[0]].matrix.rows();
  const Eigen::Index m = windows[idx[0]].matrix.cols();
  Tensor<S> t({static_cast<Eigen::Index>(idx.size()), 1, w, m});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& mat = windows[idx[b]].matrix;
    if (mat.rows() != w || mat.cols() != m)
      throw DimensionError("batch_tensor: window " + std::to_string(idx[b]) +
                           " has shape " + std::to_string(mat.rows()) + "x" +
                           std::to_string(mat.cols()) + ", expected " +
                           std::to_string(w) + "x" + std::to_string(m));
    S* dst = t.value().data() + static_cast<Eigen::Index>(b) * w * m;
    for (Eigen::Index r = 0; r < w; ++r)
      for (Eigen::Index c = 0; c < m; ++c) dst[r * m + c] = static_cast<S>(mat(r, c));
  }
  return t;
}

// Evaluation batch size is pinned so repeated scoring of the same windows is
// bit-identical.
constexpr std::size_t kEvalBatch = 256;

inline Eigen::MatrixXf predict_probabilities(
    Model<float>& model, const std::vector<WindowedSample>& windows,
    std::size_t batch_size = kEvalBatch) {
  const int K = model.spec.num_classes;
  Eigen::MatrixXf probs(static_cast<Eigen::Index>(windows.size()), K);
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const std::size_t stop = std::min(windows.size(), start + batch_size);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    auto batch = batch_tensor<float>(windows, idx);
    auto out = forward(model, batch, Mode::infer);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int k = 0; k < K; ++k)
        probs(static_cast<Eigen::Index>(start + i), k) =
            out.value()[static_cast<Eigen::Index>(i) * K + k];
  }
  return probs;
}

inline std::string prob_stream_hash(const Eigen::MatrixXf& probs) {
  return hex64(fnv1a64(probs.data(),
                       sizeof(float) * static_cast<std::size_t>(probs.size())));
}

}  // namespace ovrn
