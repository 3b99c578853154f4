#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "medix/common.hpp"
#include "medix/rng.hpp"
#include "medix/tensor.hpp"

// Primitive differentiable operations. Layout is channels-last throughout:
// a sample is [H,W,C], a batch is [B,H,W,C] (or [B,d] for vectors), kernels
// are [K,K,Cin,Cout] (standard) and [K,K,C] (depthwise). Convolution is
// cross-correlation, the usual machine-learning convention. Reductions run
// in row-major sequential order so results are reproducible.

namespace medix {

enum class Padding { valid, same };

enum class ConvMode { standard, depthwise, pointwise };

struct ConvSpec {
  int kernel_size = 3;
  int stride = 1;
  Padding padding = Padding::same;
  Index in_channels = 0;
  Index out_channels = 0;
  ConvMode mode = ConvMode::standard;
  int channel_multiplier = 1;

  void validate() const {
    require(kernel_size >= 1 && stride >= 1, ErrorKind::shape, "conv spec: kernel_size and stride must be positive");
    require(in_channels >= 1 && out_channels >= 1, ErrorKind::shape, "conv spec: channel counts must be positive");
    if (mode == ConvMode::pointwise)
      require(kernel_size == 1, ErrorKind::shape, "pointwise conv requires kernel_size == 1");
    if (mode == ConvMode::depthwise) {
      require(channel_multiplier >= 1, ErrorKind::shape, "depthwise channel multiplier must be >= 1");
      require(out_channels == in_channels * channel_multiplier, ErrorKind::shape,
              "depthwise conv requires out_channels == in_channels * channel_multiplier");
    }
  }
};

/// Output extent of one spatial axis. `same` keeps ceil(n/stride) regardless
/// of kernel size; `valid` requires the kernel to fit.
inline Index conv_output_dim(Index n, int kernel, int stride, Padding padding) {
  if (padding == Padding::same) return (n + stride - 1) / stride;
  require(n >= kernel, ErrorKind::shape, "valid padding: input smaller than kernel");
  return (n - kernel) / stride + 1;
}

/// Leading padding for `same` (total split floor/ceil, extra row at the end).
inline Index conv_pad_before(Index n, int kernel, int stride) {
  const Index out = (n + stride - 1) / stride;
  const Index total = std::max<Index>((out - 1) * stride + kernel - n, 0);
  return total / 2;
}

namespace detail {

struct ConvDims {
  Index batch, h, w, cin, hout, wout, cout, pad_top, pad_left;
  bool batched;
};

inline ConvDims conv_dims(const Shape& input, const ConvSpec& spec, Index cout) {
  require(input.size() == 3 || input.size() == 4, ErrorKind::shape,
          "conv input must be [H,W,C] or [B,H,W,C], got " + shape_str(input));
  ConvDims d{};
  d.batched = input.size() == 4;
  d.batch = d.batched ? input[0] : 1;
  d.h = input[d.batched ? 1 : 0];
  d.w = input[d.batched ? 2 : 1];
  d.cin = input[d.batched ? 3 : 2];
  require(d.cin == spec.in_channels, ErrorKind::shape,
          "conv input has " + std::to_string(d.cin) + " channels, spec expects " + std::to_string(spec.in_channels));
  d.hout = conv_output_dim(d.h, spec.kernel_size, spec.stride, spec.padding);
  d.wout = conv_output_dim(d.w, spec.kernel_size, spec.stride, spec.padding);
  d.pad_top = spec.padding == Padding::same ? conv_pad_before(d.h, spec.kernel_size, spec.stride) : 0;
  d.pad_left = spec.padding == Padding::same ? conv_pad_before(d.w, spec.kernel_size, spec.stride) : 0;
  d.cout = cout;
  return d;
}

/// Gathers one sample's receptive fields into a [Hout*Wout, K*K*Cin] matrix.
template <typename Scalar>
void im2col(const Scalar* in, const ConvDims& d, int K, int stride,
            Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& patches) {
  const Index row_len = static_cast<Index>(K) * K * d.cin;
  patches.resize(d.hout * d.wout, row_len);
  for (Index oi = 0; oi < d.hout; ++oi) {
    const Index ii0 = oi * stride - d.pad_top;
    for (Index oj = 0; oj < d.wout; ++oj) {
      const Index jj0 = oj * stride - d.pad_left;
      Scalar* row = patches.data() + (oi * d.wout + oj) * row_len;
      for (int ki = 0; ki < K; ++ki) {
        Scalar* dst = row + static_cast<Index>(ki) * K * d.cin;
        const Index ii = ii0 + ki;
        if (ii < 0 || ii >= d.h) {
          std::fill(dst, dst + static_cast<Index>(K) * d.cin, Scalar(0));
          continue;
        }
        const Index jlo = std::max<Index>(jj0, 0);
        const Index jhi = std::min<Index>(jj0 + K - 1, d.w - 1);
        std::fill(dst, dst + (jlo - jj0) * d.cin, Scalar(0));
        if (jhi >= jlo)
          std::memcpy(dst + (jlo - jj0) * d.cin, in + (ii * d.w + jlo) * d.cin,
                      static_cast<std::size_t>((jhi - jlo + 1) * d.cin) * sizeof(Scalar));
        std::fill(dst + (jhi - jj0 + 1) * d.cin, dst + static_cast<Index>(K) * d.cin, Scalar(0));
      }
    }
  }
}

/// Scatter-add of patch-space gradients back onto the input image.
template <typename Scalar>
void col2im_add(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& gpatches,
                const ConvDims& d, int K, int stride, Scalar* gin) {
  const Index row_len = static_cast<Index>(K) * K * d.cin;
  for (Index oi = 0; oi < d.hout; ++oi) {
    const Index ii0 = oi * stride - d.pad_top;
    for (Index oj = 0; oj < d.wout; ++oj) {
      const Index jj0 = oj * stride - d.pad_left;
      const Scalar* row = gpatches.data() + (oi * d.wout + oj) * row_len;
      for (int ki = 0; ki < K; ++ki) {
        const Index ii = ii0 + ki;
        if (ii < 0 || ii >= d.h) continue;
        const Scalar* src = row + static_cast<Index>(ki) * K * d.cin;
        const Index jlo = std::max<Index>(jj0, 0);
        const Index jhi = std::min<Index>(jj0 + K - 1, d.w - 1);
        for (Index jj = jlo; jj <= jhi; ++jj) {
          Scalar* dst = gin + (ii * d.w + jj) * d.cin;
          const Scalar* s = src + (jj - jj0) * d.cin;
          for (Index c = 0; c < d.cin; ++c) dst[c] += s[c];
        }
      }
    }
  }
}

inline Shape conv_out_shape(const ConvDims& d) {
  return d.batched ? Shape{d.batch, d.hout, d.wout, d.cout} : Shape{d.hout, d.wout, d.cout};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Standard convolution (cross-correlation)
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const ConvSpec& spec, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>* bias = nullptr) {
  spec.validate();
  require(spec.mode != ConvMode::depthwise, ErrorKind::shape, "use depthwise_conv2d for depthwise mode");
  const int K = spec.kernel_size;
  require(kernel.rank() == 4 && kernel.dim(0) == K && kernel.dim(1) == K && kernel.dim(2) == spec.in_channels &&
              kernel.dim(3) == spec.out_channels,
          ErrorKind::shape, "conv kernel must be [K,K,Cin,Cout], got " + shape_str(kernel.shape()));
  if (bias)
    require(bias->rank() == 1 && bias->dim(0) == spec.out_channels, ErrorKind::shape, "conv bias shape mismatch");
  const auto d = detail::conv_dims(input.shape(), spec, spec.out_channels);

  Tensor<Scalar> out(detail::conv_out_shape(d));
  const auto kmat = kernel.matrix(static_cast<Index>(K) * K * d.cin, d.cout);
  const Index sample_in = d.h * d.w * d.cin;
  const Index sample_out = d.hout * d.wout * d.cout;

  if (K == 1 && spec.stride == 1) {
    // Pointwise: a single channel-mixing product over all pixels.
    out.matrix(d.batch * d.h * d.w, d.cout).noalias() =
        input.matrix(d.batch * d.h * d.w, d.cin) * kmat;
  } else {
    parallel_for(d.batch, [&](Index b) {
      typename Tensor<Scalar>::MatrixRM patches;
      detail::im2col(input.data() + b * sample_in, d, K, spec.stride, patches);
      typename Tensor<Scalar>::MatrixMap omat(out.data() + b * sample_out, d.hout * d.wout, d.cout);
      omat.noalias() = patches * kmat;
    });
  }
  if (bias) {
    auto omat = out.matrix(d.batch * d.hout * d.wout, d.cout);
    omat.rowwise() += bias->matrix(1, d.cout).row(0);
  }
  ensure_finite(out, "conv2d");
  return out;
}

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input, kernel, bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const ConvSpec& spec, const Tensor<Scalar>& kernel,
                                  const Tensor<Scalar>& grad_out, bool with_bias) {
  const int K = spec.kernel_size;
  const auto d = detail::conv_dims(input.shape(), spec, spec.out_channels);
  require(grad_out.shape() == detail::conv_out_shape(d), ErrorKind::shape, "conv grad_out shape mismatch");

  ConvGrads<Scalar> g;
  g.input = Tensor<Scalar>::zeros(input.shape());
  g.kernel = Tensor<Scalar>::zeros(kernel.shape());
  const auto kmat = kernel.matrix(static_cast<Index>(K) * K * d.cin, d.cout);
  auto gkmat = g.kernel.matrix(static_cast<Index>(K) * K * d.cin, d.cout);
  const Index sample_in = d.h * d.w * d.cin;
  const Index sample_out = d.hout * d.wout * d.cout;

  if (K == 1 && spec.stride == 1) {
    const Index rows = d.batch * d.h * d.w;
    g.input.matrix(rows, d.cin).noalias() = grad_out.matrix(rows, d.cout) * kmat.transpose();
    gkmat.noalias() = input.matrix(rows, d.cin).transpose() * grad_out.matrix(rows, d.cout);
  } else {
    typename Tensor<Scalar>::MatrixRM patches, gpatches;
    for (Index b = 0; b < d.batch; ++b) {  // serial: kernel grads accumulate in batch order
      detail::im2col(input.data() + b * sample_in, d, K, spec.stride, patches);
      typename Tensor<Scalar>::ConstMatrixMap gmat(grad_out.data() + b * sample_out, d.hout * d.wout, d.cout);
      gkmat.noalias() += patches.transpose() * gmat;
      gpatches.noalias() = gmat * kmat.transpose();
      detail::col2im_add(gpatches, d, K, spec.stride, g.input.data() + b * sample_in);
    }
  }
  if (with_bias) {
    g.bias = Tensor<Scalar>(Shape{d.cout});
    g.bias.matrix(1, d.cout) = grad_out.matrix(d.batch * d.hout * d.wout, d.cout).colwise().sum();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Depthwise convolution
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> depthwise_conv2d(const Tensor<Scalar>& input, const ConvSpec& spec, const Tensor<Scalar>& kernel) {
  spec.validate();
  require(spec.mode == ConvMode::depthwise, ErrorKind::shape, "spec.mode must be depthwise");
  require(spec.channel_multiplier == 1, ErrorKind::shape, "channel multipliers > 1 are not implemented");
  const int K = spec.kernel_size;
  require(kernel.rank() == 3 && kernel.dim(0) == K && kernel.dim(1) == K && kernel.dim(2) == spec.in_channels,
          ErrorKind::shape, "depthwise kernel must be [K,K,C], got " + shape_str(kernel.shape()));
  const auto d = detail::conv_dims(input.shape(), spec, spec.in_channels);

  Tensor<Scalar> out(detail::conv_out_shape(d));
  const Index C = d.cin;
  const Index sample_in = d.h * d.w * C;
  const Index sample_out = d.hout * d.wout * C;
  using Seg = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstSeg = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  parallel_for(d.batch, [&](Index b) {
    const Scalar* in = input.data() + b * sample_in;
    Scalar* op = out.data() + b * sample_out;
    for (Index oi = 0; oi < d.hout; ++oi) {
      const Index ii0 = oi * spec.stride - d.pad_top;
      for (Index oj = 0; oj < d.wout; ++oj) {
        const Index jj0 = oj * spec.stride - d.pad_left;
        Seg acc(op + (oi * d.wout + oj) * C, C);
        for (int ki = 0; ki < K; ++ki) {
          const Index ii = ii0 + ki;
          if (ii < 0 || ii >= d.h) continue;
          for (int kj = 0; kj < K; ++kj) {
            const Index jj = jj0 + kj;
            if (jj < 0 || jj >= d.w) continue;
            acc += ConstSeg(in + (ii * d.w + jj) * C, C) * ConstSeg(kernel.data() + (ki * K + kj) * C, C);
          }
        }
      }
    }
  });
  ensure_finite(out, "depthwise_conv2d");
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> depthwise_conv2d_backward(const Tensor<Scalar>& input, const ConvSpec& spec,
                                            const Tensor<Scalar>& kernel, const Tensor<Scalar>& grad_out) {
  const int K = spec.kernel_size;
  const auto d = detail::conv_dims(input.shape(), spec, spec.in_channels);
  require(grad_out.shape() == detail::conv_out_shape(d), ErrorKind::shape, "depthwise grad_out shape mismatch");

  ConvGrads<Scalar> g;
  g.input = Tensor<Scalar>::zeros(input.shape());
  g.kernel = Tensor<Scalar>::zeros(kernel.shape());
  const Index C = d.cin;
  const Index sample_in = d.h * d.w * C;
  const Index sample_out = d.hout * d.wout * C;
  using Seg = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstSeg = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  for (Index b = 0; b < d.batch; ++b) {
    const Scalar* in = input.data() + b * sample_in;
    Scalar* gin = g.input.data() + b * sample_in;
    const Scalar* go = grad_out.data() + b * sample_out;
    for (Index oi = 0; oi < d.hout; ++oi) {
      const Index ii0 = oi * spec.stride - d.pad_top;
      for (Index oj = 0; oj < d.wout; ++oj) {
        const Index jj0 = oj * spec.stride - d.pad_left;
        ConstSeg gseg(go + (oi * d.wout + oj) * C, C);
        for (int ki = 0; ki < K; ++ki) {
          const Index ii = ii0 + ki;
          if (ii < 0 || ii >= d.h) continue;
          for (int kj = 0; kj < K; ++kj) {
            const Index jj = jj0 + kj;
            if (jj < 0 || jj >= d.w) continue;
            Seg(g.kernel.data() + (ki * K + kj) * C, C) += gseg * ConstSeg(in + (ii * d.w + jj) * C, C);
            Seg(gin + (ii * d.w + jj) * C, C) += gseg * ConstSeg(kernel.data() + (ki * K + kj) * C, C);
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dense (fully connected)
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> dense(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  require(weight.rank() == 2, ErrorKind::shape, "dense weight must be [d_in,d_out]");
  const Index din = weight.dim(0), dout = weight.dim(1);
  require(input.rank() == 1 || input.rank() == 2, ErrorKind::shape, "dense input must be [d] or [B,d]");
  const Index b = input.rank() == 2 ? input.dim(0) : 1;
  require(input.dim(input.rank() - 1) == din, ErrorKind::shape,
          "dense input width " + std::to_string(input.dim(input.rank() - 1)) + " != " + std::to_string(din));
  require(bias.rank() == 1 && bias.dim(0) == dout, ErrorKind::shape, "dense bias shape mismatch");

  Tensor<Scalar> out(input.rank() == 2 ? Shape{b, dout} : Shape{dout});
  out.matrix(b, dout).noalias() = input.matrix(b, din) * weight.matrix();
  out.matrix(b, dout).rowwise() += bias.matrix(1, dout).row(0);
  ensure_finite(out, "dense");
  return out;
}

template <typename Scalar>
struct DenseGrads {
  Tensor<Scalar> input, weight, bias;
};

template <typename Scalar>
DenseGrads<Scalar> dense_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                  const Tensor<Scalar>& grad_out) {
  const Index din = weight.dim(0), dout = weight.dim(1);
  const Index b = input.rank() == 2 ? input.dim(0) : 1;
  DenseGrads<Scalar> g;
  g.input = Tensor<Scalar>(input.shape());
  g.weight = Tensor<Scalar>(weight.shape());
  g.bias = Tensor<Scalar>(Shape{dout});
  g.input.matrix(b, din).noalias() = grad_out.matrix(b, dout) * weight.matrix().transpose();
  g.weight.matrix().noalias() = input.matrix(b, din).transpose() * grad_out.matrix(b, dout);
  g.bias.matrix(1, dout) = grad_out.matrix(b, dout).colwise().sum();
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.array().max(Scalar(0)));
}

/// Subgradient at exactly 0 is 0 (strict x > 0 mask).
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& grad_out) {
  require(x.same_shape(grad_out), ErrorKind::shape, "relu backward shape mismatch");
  return Tensor<Scalar>(x.shape(), (x.array() > Scalar(0)).select(grad_out.array(), Scalar(0)));
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  require(logits.rank() == 1 || logits.rank() == 2, ErrorKind::shape, "softmax input must be [k] or [B,k]");
  require(logits.dim(logits.rank() - 1) >= 1, ErrorKind::shape, "softmax needs k >= 1");
  require(logits.all_finite(), ErrorKind::numeric, "softmax: non-finite logits");
  const Index b = logits.rank() == 2 ? logits.dim(0) : 1;
  const Index k = logits.dim(logits.rank() - 1);
  Tensor<Scalar> out(logits.shape());
  auto in = logits.matrix(b, k);
  auto om = out.matrix(b, k);
  for (Index r = 0; r < b; ++r) {
    const Scalar m = in.row(r).maxCoeff();
    om.row(r) = (in.row(r).array() - m).exp();
    om.row(r) /= om.row(r).sum();
  }
  return out;
}

/// Exact Jacobian-vector product: g_in = y .* (g_out - <g_out, y>).
template <typename Scalar>
Tensor<Scalar> softmax_backward(const Tensor<Scalar>& probs, const Tensor<Scalar>& grad_out) {
  require(probs.same_shape(grad_out), ErrorKind::shape, "softmax backward shape mismatch");
  const Index b = probs.rank() == 2 ? probs.dim(0) : 1;
  const Index k = probs.dim(probs.rank() - 1);
  Tensor<Scalar> g(probs.shape());
  auto y = probs.matrix(b, k);
  auto go = grad_out.matrix(b, k);
  auto gi = g.matrix(b, k);
  for (Index r = 0; r < b; ++r) {
    const Scalar dot = go.row(r).dot(y.row(r));
    gi.row(r) = y.row(r).array() * (go.row(r).array() - dot);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling: kept activations are multiplied by 1/(1-p) at
// train time so evaluation is the identity)
// ---------------------------------------------------------------------------

struct DropoutSpec {
  double drop_probability = 0.0;  // probability of zeroing an element
  bool training = true;
  std::uint64_t seed = 0;

  void validate() const {
    require(drop_probability >= 0.0 && drop_probability < 1.0, ErrorKind::config,
            "dropout probability must be in [0,1)");
  }
};

template <typename Scalar>
struct DropoutResult {
  Tensor<Scalar> out;
  Tensor<Scalar> mask;  // entries are 0 or 1/(1-p); out == input .* mask
};

template <typename Scalar>
DropoutResult<Scalar> dropout(const Tensor<Scalar>& x, const DropoutSpec& spec) {
  spec.validate();
  DropoutResult<Scalar> r;
  if (!spec.training || spec.drop_probability == 0.0) {
    r.out = x;
    r.mask = Tensor<Scalar>::ones(x.shape());
    return r;
  }
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - spec.drop_probability));
  Rng rng(spec.seed);
  r.mask = Tensor<Scalar>(x.shape());
  for (Index i = 0; i < r.mask.size(); ++i)
    r.mask[i] = rng.uniform() >= spec.drop_probability ? keep_scale : Scalar(0);
  r.out = Tensor<Scalar>(x.shape(), x.array() * r.mask.array());
  return r;
}

template <typename Scalar>
Tensor<Scalar> dropout_backward(const Tensor<Scalar>& mask, const Tensor<Scalar>& grad_out) {
  require(mask.same_shape(grad_out), ErrorKind::shape, "dropout backward shape mismatch");
  return Tensor<Scalar>(mask.shape(), mask.array() * grad_out.array());
}

// ---------------------------------------------------------------------------
// Batch normalization (per-channel over all leading axes; channels last)
// ---------------------------------------------------------------------------

template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> gamma, beta, running_mean, running_var;
  Scalar epsilon = static_cast<Scalar>(1e-5);
  Scalar momentum = static_cast<Scalar>(0.9);

  static BatchNormState fresh(Index channels) {
    BatchNormState s;
    s.gamma = Tensor<Scalar>::ones({channels});
    s.beta = Tensor<Scalar>::zeros({channels});
    s.running_mean = Tensor<Scalar>::zeros({channels});
    s.running_var = Tensor<Scalar>::ones({channels});
    return s;
  }

  Index channels() const { return gamma.size(); }

  void validate() const {
    require(beta.size() == channels() && running_mean.size() == channels() && running_var.size() == channels(),
            ErrorKind::shape, "batch norm state vectors must share one channel count");
    require(epsilon > Scalar(0), ErrorKind::config, "batch norm epsilon must be positive");
    require((running_var.array() >= Scalar(0)).all(), ErrorKind::numeric, "negative running variance");
  }
};

template <typename Scalar>
struct BatchNormResult {
  Tensor<Scalar> out;
  Tensor<Scalar> xhat;     // normalized input, cached for backward
  Tensor<Scalar> inv_std;  // per channel
  BatchNormState<Scalar> new_state;
};

template <typename Scalar>
BatchNormResult<Scalar> batch_norm(const Tensor<Scalar>& x, const BatchNormState<Scalar>& state, bool training) {
  state.validate();
  require(x.rank() >= 2, ErrorKind::shape, "batch_norm input must be batched");
  const Index C = x.dim(x.rank() - 1);
  require(C == state.channels(), ErrorKind::shape, "batch_norm channel mismatch");
  const Index rows = x.size() / C;

  using RowVec = Eigen::Array<Scalar, 1, Eigen::Dynamic>;
  auto X = x.matrix(rows, C);

  BatchNormResult<Scalar> r;
  r.new_state = state;
  r.xhat = Tensor<Scalar>(x.shape());
  r.inv_std = Tensor<Scalar>(Shape{C});
  auto xhat = r.xhat.matrix(rows, C);

  RowVec mean, var;
  if (training) {
    mean = X.colwise().mean().array();
    xhat = X.rowwise() - mean.matrix();
    var = xhat.array().square().colwise().mean();
    const Scalar m = state.momentum;
    r.new_state.running_mean.array() = m * state.running_mean.array() + (1 - m) * mean.transpose();
    r.new_state.running_var.array() = m * state.running_var.array() + (1 - m) * var.transpose();
  } else {
    mean = state.running_mean.array().transpose();
    var = state.running_var.array().transpose();
    xhat = X.rowwise() - mean.matrix();
  }
  r.inv_std.array() = (var.transpose() + state.epsilon).rsqrt();
  xhat.array().rowwise() *= r.inv_std.array().transpose();

  r.out = Tensor<Scalar>(x.shape());
  r.out.matrix(rows, C).array() =
      (xhat.array().rowwise() * state.gamma.array().transpose()).rowwise() + state.beta.array().transpose();
  ensure_finite(r.out, "batch_norm");
  return r;
}

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input, gamma, beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const Tensor<Scalar>& xhat_cache, const Tensor<Scalar>& inv_std_cache,
                                           const Tensor<Scalar>& gamma_param, const Tensor<Scalar>& grad_out,
                                           bool training) {
  const Index C = gamma_param.size();
  const Index rows = grad_out.size() / C;
  using ArrRM = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVec = Eigen::Array<Scalar, 1, Eigen::Dynamic>;

  auto G = grad_out.matrix(rows, C).array();
  auto xhat = xhat_cache.matrix(rows, C).array();

  BatchNormGrads<Scalar> g;
  g.gamma = Tensor<Scalar>(Shape{C});
  g.beta = Tensor<Scalar>(Shape{C});
  g.gamma.array() = (G * xhat).colwise().sum().transpose();
  g.beta.array() = G.colwise().sum().transpose();

  g.input = Tensor<Scalar>(grad_out.shape());
  auto gx = g.input.matrix(rows, C).array();
  const RowVec inv_std = inv_std_cache.array().transpose();
  const RowVec gamma = gamma_param.array().transpose();
  if (training) {
    ArrRM gxhat = G.rowwise() * gamma;
    const RowVec mean_g = gxhat.colwise().mean();
    const RowVec mean_gx = (gxhat * xhat).colwise().mean();
    gx = ((gxhat.rowwise() - mean_g) - xhat.rowwise() * mean_gx).rowwise() * inv_std;
  } else {
    gx = G.rowwise() * (gamma * inv_std);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Global pooling
// ---------------------------------------------------------------------------

namespace detail {

struct PoolDims {
  Index batch, h, w, c;
  bool batched;
};

inline PoolDims pool_dims(const Shape& s) {
  require(s.size() == 3 || s.size() == 4, ErrorKind::shape, "pooling input must be [H,W,C] or [B,H,W,C]");
  PoolDims d{};
  d.batched = s.size() == 4;
  d.batch = d.batched ? s[0] : 1;
  d.h = s[d.batched ? 1 : 0];
  d.w = s[d.batched ? 2 : 1];
  d.c = s[d.batched ? 3 : 2];
  require(d.h >= 1 && d.w >= 1, ErrorKind::shape, "pooling needs H,W >= 1");
  return d;
}

}  // namespace detail

/// Per-channel mean. Accumulation is row-major sequential per channel.
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  const auto d = detail::pool_dims(x.shape());
  Tensor<Scalar> out(d.batched ? Shape{d.batch, d.c} : Shape{d.c});
  using ConstSeg = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using Seg = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  const Index plane = d.h * d.w;
  for (Index b = 0; b < d.batch; ++b) {
    Seg acc(out.data() + b * d.c, d.c);
    const Scalar* in = x.data() + b * plane * d.c;
    for (Index r = 0; r < plane; ++r) acc += ConstSeg(in + r * d.c, d.c);
    acc /= static_cast<Scalar>(plane);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& in_shape, const Tensor<Scalar>& grad_out) {
  const auto d = detail::pool_dims(in_shape);
  Tensor<Scalar> g(in_shape);
  const Index plane = d.h * d.w;
  const Scalar scale = Scalar(1) / static_cast<Scalar>(plane);
  for (Index b = 0; b < d.batch; ++b)
    for (Index r = 0; r < plane; ++r)
      for (Index c = 0; c < d.c; ++c) g[(b * plane + r) * d.c + c] = grad_out[b * d.c + c] * scale;
  return g;
}

template <typename Scalar>
struct MaxPoolResult {
  Tensor<Scalar> out;
  std::vector<Index> argmax;  // per (b, c): first row-major spatial index of the max
};

/// Per-channel maximum; ties resolve to the first element in row-major order,
/// which is also where the gradient is routed.
template <typename Scalar>
MaxPoolResult<Scalar> global_max_pool(const Tensor<Scalar>& x) {
  const auto d = detail::pool_dims(x.shape());
  MaxPoolResult<Scalar> r;
  r.out = Tensor<Scalar>(d.batched ? Shape{d.batch, d.c} : Shape{d.c});
  r.argmax.assign(static_cast<std::size_t>(d.batch * d.c), 0);
  const Index plane = d.h * d.w;
  for (Index b = 0; b < d.batch; ++b) {
    const Scalar* in = x.data() + b * plane * d.c;
    for (Index c = 0; c < d.c; ++c) {
      Scalar best = in[c];
      Index best_r = 0;
      for (Index row = 1; row < plane; ++row) {
        const Scalar v = in[row * d.c + c];
        if (v > best) {
          best = v;
          best_r = row;
        }
      }
      r.out[b * d.c + c] = best;
      r.argmax[static_cast<std::size_t>(b * d.c + c)] = best_r;
    }
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> global_max_pool_backward(const Shape& in_shape, const std::vector<Index>& argmax,
                                        const Tensor<Scalar>& grad_out) {
  const auto d = detail::pool_dims(in_shape);
  Tensor<Scalar> g = Tensor<Scalar>::zeros(in_shape);
  const Index plane = d.h * d.w;
  for (Index b = 0; b < d.batch; ++b)
    for (Index c = 0; c < d.c; ++c) {
      const Index row = argmax[static_cast<std::size_t>(b * d.c + c)];
      g[(b * plane + row) * d.c + c] += grad_out[b * d.c + c];
    }
  return g;
}

// ---------------------------------------------------------------------------
// Concatenation of feature vectors
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require(a.rank() == b.rank() && (a.rank() == 1 || a.rank() == 2), ErrorKind::shape,
          "concat expects two vectors [d] or two batches [B,d]");
  const Index rows = a.rank() == 2 ? a.dim(0) : 1;
  if (a.rank() == 2)
    require(b.dim(0) == rows, ErrorKind::shape, "concat batch size mismatch");
  const Index d1 = a.dim(a.rank() - 1), d2 = b.dim(b.rank() - 1);
  Tensor<Scalar> out(a.rank() == 2 ? Shape{rows, d1 + d2} : Shape{d1 + d2});
  for (Index r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * (d1 + d2), a.data() + r * d1, static_cast<std::size_t>(d1) * sizeof(Scalar));
    std::memcpy(out.data() + r * (d1 + d2) + d1, b.data() + r * d2, static_cast<std::size_t>(d2) * sizeof(Scalar));
  }
  return out;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> concat_backward(Index d1, Index d2, const Tensor<Scalar>& grad_out) {
  const Index rows = grad_out.rank() == 2 ? grad_out.dim(0) : 1;
  require(grad_out.dim(grad_out.rank() - 1) == d1 + d2, ErrorKind::shape, "concat backward width mismatch");
  Tensor<Scalar> ga(grad_out.rank() == 2 ? Shape{rows, d1} : Shape{d1});
  Tensor<Scalar> gb(grad_out.rank() == 2 ? Shape{rows, d2} : Shape{d2});
  for (Index r = 0; r < rows; ++r) {
    std::memcpy(ga.data() + r * d1, grad_out.data() + r * (d1 + d2), static_cast<std::size_t>(d1) * sizeof(Scalar));
    std::memcpy(gb.data() + r * d2, grad_out.data() + r * (d1 + d2) + d1,
                static_cast<std::size_t>(d2) * sizeof(Scalar));
  }
  return {std::move(ga), std::move(gb)};
}

}  // namespace medix
