#pragma once

// Forward operators with tape-recorded reverse-mode gradients. Free functions
// over Tensor<Scalar>; pass a Tape to record, nullptr for inference.

#include <Eigen/Dense>
#include <cmath>
#include <utility>
#include <vector>

#include "ovrn/tensor.hpp"

namespace ovrn {

enum class Padding { valid, same };
enum class Mode { train, infer };

// Shared probability clamp: keeps logs finite here and in the decision rule.
constexpr double kProbEpsilon = 1e-7;

namespace detail {

template <typename S>
inline bool want_grad(const Tape<S>* tape, bool any_rg) {
  return tape != nullptr && any_rg;
}

template <typename S>
inline void track_all(Tape<S>& tape, std::initializer_list<Tensor<S>> ts) {
  for (const auto& t : ts)
    if (t.requires_grad()) tape.track(t);
}

struct ConvDims {
  Eigen::Index batch, in_ch, in_h, in_w;
  Eigen::Index out_ch, kh, kw;
  Eigen::Index pad_top, pad_left;
  Eigen::Index out_h, out_w;

  Eigen::Index padded_h() const { return out_h + kh - 1; }
  Eigen::Index padded_w() const { return out_w + kw - 1; }
  bool padded() const { return pad_top != 0 || pad_left != 0; }
};

// Input with the zero border baked in, so receptive-field runs are always
// contiguous row segments.
template <typename S>
Eigen::ArrayX<S> pad_input(const Eigen::ArrayX<S>& x, const ConvDims& d) {
  const Eigen::Index ph = d.padded_h(), pw = d.padded_w();
  Eigen::ArrayX<S> out = Eigen::ArrayX<S>::Zero(d.batch * d.in_ch * ph * pw);
  for (Eigen::Index b = 0; b < d.batch; ++b)
    for (Eigen::Index c = 0; c < d.in_ch; ++c) {
      const Eigen::Index src = (b * d.in_ch + c) * d.in_h * d.in_w;
      const Eigen::Index dst =
          (b * d.in_ch + c) * ph * pw + d.pad_top * pw + d.pad_left;
      for (Eigen::Index ih = 0; ih < d.in_h; ++ih)
        out.segment(dst + ih * pw, d.in_w) = x.segment(src + ih * d.in_w, d.in_w);
    }
  return out;
}

// Receptive-field matrix, row-major [C*KH*KW, B*OH*OW]: each row gathers one
// kernel tap across all output positions as contiguous width-OW runs.
template <typename S>
MatrixRM<S> im2col(const Eigen::ArrayX<S>& padded, const ConvDims& d) {
  const Eigen::Index ph = d.padded_h(), pw = d.padded_w();
  const Eigen::Index rows = d.in_ch * d.kh * d.kw;
  const Eigen::Index ncols = d.batch * d.out_h * d.out_w;
  MatrixRM<S> m(rows, ncols);
  Eigen::Index r = 0;
  for (Eigen::Index c = 0; c < d.in_ch; ++c)
    for (Eigen::Index ki = 0; ki < d.kh; ++ki)
      for (Eigen::Index kj = 0; kj < d.kw; ++kj, ++r) {
        S* dst = m.data() + r * ncols;
        for (Eigen::Index b = 0; b < d.batch; ++b) {
          const Eigen::Index base = (b * d.in_ch + c) * ph * pw;
          for (Eigen::Index oh = 0; oh < d.out_h; ++oh) {
            const S* src = padded.data() + base + (oh + ki) * pw + kj;
            std::copy(src, src + d.out_w, dst);
            dst += d.out_w;
          }
        }
      }
  return m;
}

// Scatter-add of receptive-field gradients back onto the (padded) input grid;
// the border is cropped away while accumulating into dx.
template <typename S>
void col2im_add(const MatrixRM<S>& dcols, const ConvDims& d,
                Eigen::ArrayX<S>& dx) {
  const Eigen::Index ph = d.padded_h(), pw = d.padded_w();
  const Eigen::Index ncols = d.batch * d.out_h * d.out_w;
  Eigen::ArrayX<S> padded = Eigen::ArrayX<S>::Zero(d.batch * d.in_ch * ph * pw);
  Eigen::Index r = 0;
  for (Eigen::Index c = 0; c < d.in_ch; ++c)
    for (Eigen::Index ki = 0; ki < d.kh; ++ki)
      for (Eigen::Index kj = 0; kj < d.kw; ++kj, ++r) {
        const S* src = dcols.data() + r * ncols;
        for (Eigen::Index b = 0; b < d.batch; ++b) {
          const Eigen::Index base = (b * d.in_ch + c) * ph * pw;
          for (Eigen::Index oh = 0; oh < d.out_h; ++oh) {
            Eigen::Map<Eigen::ArrayX<S>>(
                padded.data() + base + (oh + ki) * pw + kj, d.out_w) +=
                Eigen::Map<const Eigen::ArrayX<S>>(src, d.out_w);
            src += d.out_w;
          }
        }
      }
  for (Eigen::Index b = 0; b < d.batch; ++b)
    for (Eigen::Index c = 0; c < d.in_ch; ++c) {
      const Eigen::Index dst = (b * d.in_ch + c) * d.in_h * d.in_w;
      const Eigen::Index src =
          (b * d.in_ch + c) * ph * pw + d.pad_top * pw + d.pad_left;
      for (Eigen::Index ih = 0; ih < d.in_h; ++ih)
        dx.segment(dst + ih * d.in_w, d.in_w) +=
            padded.segment(src + ih * pw, d.in_w);
    }
}

}  // namespace detail

// Stride-1 2-d convolution. Valid padding shrinks by kernel-1; same padding
// zero-pads symmetrically with the odd cell on the trailing side.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernels,
                 const Tensor<S>& bias, Padding padding, Tape<S>* tape = nullptr) {
  if (input.rank() != 4)
    throw DimensionError("conv2d: input must be rank 4 [batch,ch,h,w], got " +
                         seq_str(input.shape()));
  if (kernels.rank() != 4)
    throw DimensionError("conv2d: kernels must be rank 4 [out,in,kh,kw], got " +
                         seq_str(kernels.shape()));
  if (bias.rank() != 1 || bias.dim(0) != kernels.dim(0))
    throw DimensionError("conv2d: bias axis 0 must equal out-channel axis 0 of "
                         "kernels (" + std::to_string(kernels.dim(0)) + "), got " +
                         seq_str(bias.shape()));
  if (input.dim(1) != kernels.dim(1))
    throw DimensionError("conv2d: channel axis 1 mismatch, input has " +
                         std::to_string(input.dim(1)) + " but kernels expect " +
                         std::to_string(kernels.dim(1)));

  detail::ConvDims d;
  d.batch = input.dim(0);
  d.in_ch = input.dim(1);
  d.in_h = input.dim(2);
  d.in_w = input.dim(3);
  d.out_ch = kernels.dim(0);
  d.kh = kernels.dim(2);
  d.kw = kernels.dim(3);
  if (padding == Padding::valid) {
    if (d.kh > d.in_h)
      throw DimensionError("conv2d: kernel height " + std::to_string(d.kh) +
                           " exceeds input axis 2 extent " + std::to_string(d.in_h));
    if (d.kw > d.in_w)
      throw DimensionError("conv2d: kernel width " + std::to_string(d.kw) +
                           " exceeds input axis 3 extent " + std::to_string(d.in_w));
    d.pad_top = d.pad_left = 0;
    d.out_h = d.in_h - d.kh + 1;
    d.out_w = d.in_w - d.kw + 1;
  } else {
    d.pad_top = (d.kh - 1) / 2;
    d.pad_left = (d.kw - 1) / 2;
    d.out_h = d.in_h;
    d.out_w = d.in_w;
  }

  MatrixRM<S> cols = d.padded()
                         ? detail::im2col(detail::pad_input(input.value(), d), d)
                         : detail::im2col(input.value(), d);
  const Eigen::Index rows = d.in_ch * d.kh * d.kw;
  const Eigen::Index plane = d.out_h * d.out_w;
  Eigen::Map<const MatrixRM<S>> kmat(kernels.value().data(), d.out_ch, rows);
  MatrixRM<S> out_mat = kmat * cols;  // [OC, B*OH*OW]

  Tensor<S> out({d.batch, d.out_ch, d.out_h, d.out_w});
  for (Eigen::Index b = 0; b < d.batch; ++b)
    for (Eigen::Index oc = 0; oc < d.out_ch; ++oc)
      out.value().segment((b * d.out_ch + oc) * plane, plane) =
          Eigen::Map<const Eigen::ArrayX<S>>(
              out_mat.data() + oc * d.batch * plane + b * plane, plane) +
          bias.value()[oc];

  const bool rg =
      input.requires_grad() || kernels.requires_grad() || bias.requires_grad();
  if (detail::want_grad(tape, rg)) {
    out.set_requires_grad(true);
    detail::track_all(*tape, {input, kernels, bias});
    tape->track(out);
    tape->record([input, kernels, bias, out, d, plane,
                  cols = std::move(cols)]() mutable {
      const Eigen::Index rows = d.in_ch * d.kh * d.kw;
      const Eigen::Index ncols = d.batch * plane;
      MatrixRM<S> dout(d.out_ch, ncols);
      const auto& og = out.grad();
      for (Eigen::Index b = 0; b < d.batch; ++b)
        for (Eigen::Index oc = 0; oc < d.out_ch; ++oc)
          Eigen::Map<Eigen::ArrayX<S>>(dout.data() + oc * ncols + b * plane,
                                       plane) =
              og.segment((b * d.out_ch + oc) * plane, plane);
      if (kernels.requires_grad()) {
        Tensor<S> k = kernels;
        Eigen::Map<MatrixRM<S>> kg(k.grad().data(), d.out_ch, rows);
        kg.noalias() += dout * cols.transpose();
      }
      if (bias.requires_grad()) {
        Tensor<S> bi = bias;
        bi.grad() += dout.rowwise().sum().array();
      }
      if (input.requires_grad()) {
        Eigen::Map<const MatrixRM<S>> kmat2(kernels.value().data(), d.out_ch,
                                            rows);
        MatrixRM<S> dcols = kmat2.transpose() * dout;
        Tensor<S> in = input;
        detail::col2im_add(dcols, d, in.grad());
      }
    });
  }
  return out;
}

// Max pooling; gradient routes to the argmax cell, first occurrence in
// row-major scan on ties.
template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& input, std::pair<int, int> window,
                    std::pair<int, int> stride, Tape<S>* tape = nullptr) {
  if (input.rank() != 4)
    throw DimensionError("maxpool2d: input must be rank 4, got " +
                         seq_str(input.shape()));
  const Eigen::Index B = input.dim(0), C = input.dim(1), H = input.dim(2),
                     W = input.dim(3);
  const Eigen::Index ph = window.first, pw = window.second;
  const Eigen::Index sh = stride.first, sw = stride.second;
  if (ph <= 0 || pw <= 0 || sh <= 0 || sw <= 0)
    throw DimensionError("maxpool2d: window and stride must be positive");
  if (ph > H)
    throw DimensionError("maxpool2d: window height " + std::to_string(ph) +
                         " larger than input axis 2 extent " + std::to_string(H));
  if (pw > W)
    throw DimensionError("maxpool2d: window width " + std::to_string(pw) +
                         " larger than input axis 3 extent " + std::to_string(W));
  const Eigen::Index OH = (H - ph) / sh + 1;
  const Eigen::Index OW = (W - pw) / sw + 1;

  Tensor<S> out({B, C, OH, OW});
  std::vector<Eigen::Index> argmax(
      static_cast<std::size_t>(B * C * OH * OW));
  const auto& xv = input.value();
  Eigen::Index o = 0;
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index c = 0; c < C; ++c) {
      const Eigen::Index base = (b * C + c) * H * W;
      for (Eigen::Index oh = 0; oh < OH; ++oh)
        for (Eigen::Index ow = 0; ow < OW; ++ow, ++o) {
          Eigen::Index best = base + (oh * sh) * W + (ow * sw);
          S bv = xv[best];
          for (Eigen::Index ki = 0; ki < ph; ++ki)
            for (Eigen::Index kj = 0; kj < pw; ++kj) {
              const Eigen::Index idx = base + (oh * sh + ki) * W + (ow * sw + kj);
              if (xv[idx] > bv) {
                bv = xv[idx];
                best = idx;
              }
            }
          out.value()[o] = bv;
          argmax[static_cast<std::size_t>(o)] = best;
        }
    }

  if (detail::want_grad(tape, input.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(input);
    tape->track(out);
    tape->record([input, out, argmax = std::move(argmax)]() mutable {
      Tensor<S> in = input;
      auto& ig = in.grad();
      const auto& og = out.grad();
      for (Eigen::Index i = 0; i < og.size(); ++i)
        ig[argmax[static_cast<std::size_t>(i)]] += og[i];
    });
  }
  return out;
}

// Per-channel batch normalization over [batch,ch,h,w]. Train mode normalizes
// by batch statistics (biased variance) and folds them into the running
// estimates: running = (1-momentum)*running + momentum*batch. Infer mode uses
// the running estimates and treats them as constants in the gradient.
template <typename S>
Tensor<S> batchnorm(const Tensor<S>& input, const Tensor<S>& gamma,
                    const Tensor<S>& beta, Tensor<S>& running_mean,
                    Tensor<S>& running_var, Mode mode, S momentum, S eps,
                    Tape<S>* tape = nullptr) {
  if (input.rank() != 4)
    throw DimensionError("batchnorm: input must be rank 4, got " +
                         seq_str(input.shape()));
  const Eigen::Index B = input.dim(0), C = input.dim(1), H = input.dim(2),
                     W = input.dim(3);
  if (gamma.size() != C || beta.size() != C)
    throw DimensionError("batchnorm: gamma/beta extent must equal channel axis "
                         "1 (" + std::to_string(C) + "), got " +
                         std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()));
  if (running_mean.size() != C || running_var.size() != C)
    throw DimensionError("batchnorm: running statistics extent must equal "
                         "channel axis 1 (" + std::to_string(C) + ")");
  const Eigen::Index plane = H * W;
  const Eigen::Index M = B * plane;

  Eigen::ArrayX<S> mean(C), inv_std(C);
  if (mode == Mode::train) {
    for (Eigen::Index c = 0; c < C; ++c) {
      double sum = 0, sq = 0;
      for (Eigen::Index b = 0; b < B; ++b) {
        const S* p = input.value().data() + (b * C + c) * plane;
        for (Eigen::Index i = 0; i < plane; ++i) {
          sum += p[i];
          sq += static_cast<double>(p[i]) * p[i];
        }
      }
      const double mu = sum / static_cast<double>(M);
      double var = sq / static_cast<double>(M) - mu * mu;
      if (var < 0) var = 0;
      mean[c] = static_cast<S>(mu);
      inv_std[c] = S(1) / std::sqrt(static_cast<S>(var) + eps);
      running_mean.value()[c] =
          (S(1) - momentum) * running_mean.value()[c] + momentum * static_cast<S>(mu);
      running_var.value()[c] =
          (S(1) - momentum) * running_var.value()[c] + momentum * static_cast<S>(var);
    }
  } else {
    for (Eigen::Index c = 0; c < C; ++c) {
      mean[c] = running_mean.value()[c];
      inv_std[c] = S(1) / std::sqrt(running_var.value()[c] + eps);
    }
  }

  Tensor<S> out(input.shape());
  Eigen::ArrayX<S> xhat(input.size());
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index c = 0; c < C; ++c) {
      const Eigen::Index off = (b * C + c) * plane;
      auto xs = input.value().segment(off, plane);
      auto xh = xhat.segment(off, plane);
      xh = (xs - mean[c]) * inv_std[c];
      out.value().segment(off, plane) = gamma.value()[c] * xh + beta.value()[c];
    }

  const bool rg = input.requires_grad() || gamma.requires_grad() ||
                  beta.requires_grad();
  if (detail::want_grad(tape, rg)) {
    out.set_requires_grad(true);
    detail::track_all(*tape, {input, gamma, beta});
    tape->track(out);
    const bool train = mode == Mode::train;
    tape->record([input, gamma, beta, out, B, C, plane, M, train,
                  inv_std = std::move(inv_std), xhat = std::move(xhat)]() mutable {
      const auto& og = out.grad();
      for (Eigen::Index c = 0; c < C; ++c) {
        S sum_dy = 0, sum_dy_xhat = 0;
        for (Eigen::Index b = 0; b < B; ++b) {
          const Eigen::Index off = (b * C + c) * plane;
          sum_dy += og.segment(off, plane).sum();
          sum_dy_xhat += (og.segment(off, plane) * xhat.segment(off, plane)).sum();
        }
        if (gamma.requires_grad()) {
          Tensor<S> g = gamma;
          g.grad()[c] += sum_dy_xhat;
        }
        if (beta.requires_grad()) {
          Tensor<S> bt = beta;
          bt.grad()[c] += sum_dy;
        }
        if (input.requires_grad()) {
          Tensor<S> in = input;
          const S g = gamma.value()[c];
          const S is = inv_std[c];
          for (Eigen::Index b = 0; b < B; ++b) {
            const Eigen::Index off = (b * C + c) * plane;
            auto dy = og.segment(off, plane);
            auto xh = xhat.segment(off, plane);
            if (train) {
              in.grad().segment(off, plane) +=
                  g * is *
                  (dy - sum_dy / static_cast<S>(M) -
                   xh * (sum_dy_xhat / static_cast<S>(M)));
            } else {
              in.grad().segment(off, plane) += g * is * dy;
            }
          }
        }
      }
    });
  }
  return out;
}

// Affine map input*weights + bias.
template <typename S>
Tensor<S> dense(const Tensor<S>& input, const Tensor<S>& weights,
                const Tensor<S>& bias, Tape<S>* tape = nullptr) {
  if (input.rank() != 2)
    throw DimensionError("dense: input must be rank 2, got " +
                         seq_str(input.shape()));
  if (weights.rank() != 2)
    throw DimensionError("dense: weights must be rank 2, got " +
                         seq_str(weights.shape()));
  const Eigen::Index B = input.dim(0), n = input.dim(1);
  const Eigen::Index m = weights.dim(1);
  if (weights.dim(0) != n)
    throw DimensionError("dense: inner axis mismatch, input axis 1 is " +
                         std::to_string(n) + " but weights axis 0 is " +
                         std::to_string(weights.dim(0)));
  if (bias.rank() != 1 || bias.dim(0) != m)
    throw DimensionError("dense: bias extent must equal weights axis 1 (" +
                         std::to_string(m) + "), got " + seq_str(bias.shape()));

  Tensor<S> out({B, m});
  out.mat(B, m).noalias() = input.mat(B, n) * weights.mat(n, m);
  out.mat(B, m).rowwise() += bias.mat(1, m).row(0);

  const bool rg = input.requires_grad() || weights.requires_grad() ||
                  bias.requires_grad();
  if (detail::want_grad(tape, rg)) {
    out.set_requires_grad(true);
    detail::track_all(*tape, {input, weights, bias});
    tape->track(out);
    tape->record([input, weights, bias, out, B, n, m]() mutable {
      Tensor<S> o = out;
      auto dy = o.grad_mat(B, m);
      if (weights.requires_grad()) {
        Tensor<S> w = weights;
        w.grad_mat(n, m).noalias() += input.mat(B, n).transpose() * dy;
      }
      if (bias.requires_grad()) {
        Tensor<S> bi = bias;
        bi.grad_mat(1, m).row(0) += dy.colwise().sum();
      }
      if (input.requires_grad()) {
        Tensor<S> in = input;
        in.grad_mat(B, n).noalias() += dy * weights.mat(n, m).transpose();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  Tensor<S> out(input.shape());
  out.value() = input.value().max(S(0));
  if (detail::want_grad(tape, input.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(input);
    tape->track(out);
    tape->record([input, out]() mutable {
      Tensor<S> in = input;
      in.grad() += out.grad() *
                   (input.value() > S(0)).template cast<S>();
    });
  }
  return out;
}

// Logistic via tanh for saturation safety; outputs pinned to the shared
// probability clamp so they stay strictly inside (0,1).
template <typename S>
Tensor<S> sigmoid(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  const S lo = static_cast<S>(kProbEpsilon);
  const S hi = S(1) - static_cast<S>(kProbEpsilon);
  Tensor<S> out(input.shape());
  out.value() =
      (S(0.5) * (S(1) + (input.value() * S(0.5)).tanh())).max(lo).min(hi);
  if (detail::want_grad(tape, input.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(input);
    tape->track(out);
    tape->record([input, out]() mutable {
      Tensor<S> in = input;
      in.grad() += out.grad() * out.value() * (S(1) - out.value());
    });
  }
  return out;
}

// Row-wise exp-normalization with max subtraction.
template <typename S>
Tensor<S> softmax(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  if (input.rank() != 2)
    throw DimensionError("softmax: input must be rank 2 [batch,K], got " +
                         seq_str(input.shape()));
  const Eigen::Index B = input.dim(0), K = input.dim(1);
  Tensor<S> out({B, K});
  for (Eigen::Index b = 0; b < B; ++b) {
    auto row = input.value().segment(b * K, K);
    Eigen::ArrayX<S> e = (row - row.maxCoeff()).exp();
    out.value().segment(b * K, K) = e / e.sum();
  }
  if (detail::want_grad(tape, input.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(input);
    tape->track(out);
    tape->record([input, out, B, K]() mutable {
      Tensor<S> in = input;
      for (Eigen::Index b = 0; b < B; ++b) {
        auto y = out.value().segment(b * K, K);
        auto dy = out.grad().segment(b * K, K);
        const S dot = (dy * y).sum();
        in.grad().segment(b * K, K) += y * (dy - dot);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + seq_str(a.shape()) + " vs " +
                         seq_str(b.shape()));
  Tensor<S> out(a.shape());
  out.value() = a.value() + b.value();
  if (detail::want_grad(tape, a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    detail::track_all(*tape, {a, b});
    tape->track(out);
    tape->record([a, b, out]() mutable {
      if (a.requires_grad()) {
        Tensor<S> t = a;
        t.grad() += out.grad();
      }
      if (b.requires_grad()) {
        Tensor<S> t = b;
        t.grad() += out.grad();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + seq_str(a.shape()) + " vs " +
                         seq_str(b.shape()));
  Tensor<S> out(a.shape());
  out.value() = a.value() * b.value();
  if (detail::want_grad(tape, a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    detail::track_all(*tape, {a, b});
    tape->track(out);
    tape->record([a, b, out]() mutable {
      if (a.requires_grad()) {
        Tensor<S> t = a;
        t.grad() += out.grad() * b.value();
      }
      if (b.requires_grad()) {
        Tensor<S> t = b;
        t.grad() += out.grad() * a.value();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  Tensor<S> out = Tensor<S>::scalar(input.value().sum());
  if (detail::want_grad(tape, input.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(input);
    tape->track(out);
    tape->record([input, out]() mutable {
      Tensor<S> in = input;
      in.grad() += out.grad()[0];
    });
  }
  return out;
}

// [batch, ...] -> [batch, rest]; storage order is already row-major.
template <typename S>
Tensor<S> flatten(const Tensor<S>& input, Tape<S>* tape = nullptr) {
  if (input.rank() < 2)
    throw DimensionError("flatten: input must have a batch axis, got " +
                         seq_str(input.shape()));
  const Eigen::Index B = input.dim(0);
  Tensor<S> out({B, input.size() / B});
  out.value() = input.value();
  if (detail::want_grad(tape, input.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(input);
    tape->track(out);
    tape->record([input, out]() mutable {
      Tensor<S> in = input;
      in.grad() += out.grad();
    });
  }
  return out;
}

// Column-wise concatenation of rank-2 feature blocks sharing a batch axis.
template <typename S>
Tensor<S> concat_features(const std::vector<Tensor<S>>& parts,
                          Tape<S>* tape = nullptr) {
  if (parts.empty()) throw DimensionError("concat_features: no inputs");
  const Eigen::Index B = parts.front().dim(0);
  Eigen::Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2)
      throw DimensionError("concat_features: inputs must be rank 2, got " +
                           seq_str(p.shape()));
    if (p.dim(0) != B)
      throw DimensionError("concat_features: batch axis 0 mismatch, " +
                           std::to_string(p.dim(0)) + " vs " + std::to_string(B));
    total += p.dim(1);
    rg = rg || p.requires_grad();
  }
  Tensor<S> out({B, total});
  Eigen::Index col = 0;
  for (const auto& p : parts) {
    const Eigen::Index f = p.dim(1);
    for (Eigen::Index b = 0; b < B; ++b)
      out.value().segment(b * total + col, f) = p.value().segment(b * f, f);
    col += f;
  }
  if (detail::want_grad(tape, rg)) {
    out.set_requires_grad(true);
    for (const auto& p : parts)
      if (p.requires_grad()) tape->track(p);
    tape->track(out);
    tape->record([parts, out, B, total]() mutable {
      Eigen::Index col = 0;
      for (auto& p : parts) {
        const Eigen::Index f = p.dim(1);
        if (p.requires_grad()) {
          Tensor<S> t = p;
          for (Eigen::Index b = 0; b < B; ++b)
            t.grad().segment(b * f, f) += out.grad().segment(b * total + col, f);
        }
        col += f;
      }
    });
  }
  return out;
}

namespace detail {

template <typename S>
void check_probs_labels(const Tensor<S>& probs, const std::vector<int>& labels,
                        const char* op) {
  if (probs.rank() != 2)
    throw DimensionError(std::string(op) + ": probabilities must be rank 2, got " +
                         seq_str(probs.shape()));
  if (static_cast<Eigen::Index>(labels.size()) != probs.dim(0))
    throw DimensionError(std::string(op) + ": label count " +
                         std::to_string(labels.size()) +
                         " does not match batch axis 0 extent " +
                         std::to_string(probs.dim(0)));
  const int K = static_cast<int>(probs.dim(1));
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 1 || labels[i] > K)
      throw Error(std::string(op) + ": label " + std::to_string(labels[i]) +
                  " at row " + std::to_string(i) + " outside 1.." +
                  std::to_string(K));
}

template <typename S>
S clamp_prob(S p) {
  const S lo = static_cast<S>(kProbEpsilon);
  const S hi = S(1) - static_cast<S>(kProbEpsilon);
  return p < lo ? lo : (p > hi ? hi : p);
}

}  // namespace detail

// Sum of K binary cross-entropies, averaged over the batch. Probabilities are
// clamped to [1e-7, 1-1e-7]; the gradient uses the clamped value, which also
// bounds its magnitude.
template <typename S>
Tensor<S> ovrn_bce_loss(const Tensor<S>& probs, const std::vector<int>& labels,
                        Tape<S>* tape = nullptr) {
  detail::check_probs_labels(probs, labels, "ovrn_bce_loss");
  const Eigen::Index B = probs.dim(0), K = probs.dim(1);
  double acc = 0;
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index k = 0; k < K; ++k) {
      const double c = detail::clamp_prob(
          static_cast<double>(probs.value()[b * K + k]));
      const bool t = labels[static_cast<std::size_t>(b)] == k + 1;
      acc += t ? std::log(c) : std::log(1.0 - c);
    }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(-acc / static_cast<double>(B)));
  if (detail::want_grad(tape, probs.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(probs);
    tape->track(out);
    tape->record([probs, out, labels, B, K]() mutable {
      Tensor<S> p = probs;
      const S scale = out.grad()[0] / static_cast<S>(B);
      for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index k = 0; k < K; ++k) {
          const S c = detail::clamp_prob(probs.value()[b * K + k]);
          const bool t = labels[static_cast<std::size_t>(b)] == k + 1;
          p.grad()[b * K + k] -= scale * (t ? S(1) / c : S(-1) / (S(1) - c));
        }
    });
  }
  return out;
}

// Standard cross-entropy -(1/N) sum log p_target over probabilities.
template <typename S>
Tensor<S> softmax_ce_loss(const Tensor<S>& probs, const std::vector<int>& labels,
                          Tape<S>* tape = nullptr) {
  detail::check_probs_labels(probs, labels, "softmax_ce_loss");
  const Eigen::Index B = probs.dim(0), K = probs.dim(1);
  double acc = 0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const Eigen::Index k = labels[static_cast<std::size_t>(b)] - 1;
    acc += std::log(detail::clamp_prob(
        static_cast<double>(probs.value()[b * K + k])));
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(-acc / static_cast<double>(B)));
  if (detail::want_grad(tape, probs.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(probs);
    tape->track(out);
    tape->record([probs, out, labels, B, K]() mutable {
      Tensor<S> p = probs;
      const S scale = out.grad()[0] / static_cast<S>(B);
      for (Eigen::Index b = 0; b < B; ++b) {
        const Eigen::Index k = labels[static_cast<std::size_t>(b)] - 1;
        const S c = detail::clamp_prob(probs.value()[b * K + k]);
        p.grad()[b * K + k] -= scale / c;
      }
    });
  }
  return out;
}

// Log-free variant of the one-vs-rest objective: raw probabilities in place
// of their logs, negated for minimization. Kept for fidelity comparisons.
template <typename S>
Tensor<S> paper_literal_loss(const Tensor<S>& probs,
                             const std::vector<int>& labels,
                             Tape<S>* tape = nullptr) {
  detail::check_probs_labels(probs, labels, "paper_literal_loss");
  const Eigen::Index B = probs.dim(0), K = probs.dim(1);
  double acc = 0;
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index k = 0; k < K; ++k) {
      const double p = static_cast<double>(probs.value()[b * K + k]);
      const bool t = labels[static_cast<std::size_t>(b)] == k + 1;
      acc += t ? p : 1.0 - p;
    }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(-acc / static_cast<double>(B)));
  if (detail::want_grad(tape, probs.requires_grad())) {
    out.set_requires_grad(true);
    tape->track(probs);
    tape->track(out);
    tape->record([probs, out, labels, B, K]() mutable {
      Tensor<S> p = probs;
      const S scale = out.grad()[0] / static_cast<S>(B);
      for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index k = 0; k < K; ++k) {
          const bool t = labels[static_cast<std::size_t>(b)] == k + 1;
          p.grad()[b * K + k] -= scale * (t ? S(1) : S(-1));
        }
    });
  }
  return out;
}

}  // namespace ovrn
