#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medix/params.hpp"
#include "medix/rng.hpp"
#include "medix/tensor.hpp"

namespace medix {

/// Probabilities are clipped to [kProbClip, 1 - kProbClip] before any log.
inline constexpr double kProbClip = 1e-7;

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Binary cross-entropy over parallel vectors of targets in {0,1} and
/// predicted probabilities. Optionally emits d(loss)/d(yhat), evaluated at the
/// clipped probabilities.
template <typename Scalar>
Scalar bce_loss(const Tensor<Scalar>& y, const Tensor<Scalar>& yhat, Tensor<Scalar>* grad = nullptr) {
  require(y.size() == yhat.size() && y.size() > 0, ErrorKind::shape, "bce: length mismatch or empty");
  const Scalar lo = static_cast<Scalar>(kProbClip), hi = Scalar(1) - static_cast<Scalar>(kProbClip);
  const Scalar n = static_cast<Scalar>(y.size());
  Scalar loss = 0;
  if (grad) *grad = Tensor<Scalar>(yhat.shape());
  for (Index i = 0; i < y.size(); ++i) {
    const Scalar p = std::min(hi, std::max(lo, yhat[i]));
    loss -= y[i] * std::log(p) + (Scalar(1) - y[i]) * std::log(Scalar(1) - p);
    if (grad) (*grad)[i] = -(y[i] / p - (Scalar(1) - y[i]) / (Scalar(1) - p)) / n;
  }
  return loss / n;
}

/// Categorical cross-entropy over one-hot targets [N,C] and probabilities
/// [N,C]. The per-sample form is -log of the probability at the true class.
template <typename Scalar>
Scalar cce_loss(const Tensor<Scalar>& onehot, const Tensor<Scalar>& probs, Tensor<Scalar>* grad = nullptr) {
  require(onehot.same_shape(probs) && onehot.rank() == 2, ErrorKind::shape, "cce: expects matching [N,C] tensors");
  const Index n = onehot.dim(0), c = onehot.dim(1);
  const Scalar lo = static_cast<Scalar>(kProbClip), hi = Scalar(1) - static_cast<Scalar>(kProbClip);
  Scalar loss = 0;
  if (grad) *grad = Tensor<Scalar>::zeros(probs.shape());
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < c; ++j) {
      if (onehot(i, j) == Scalar(0) && !grad) continue;
      const Scalar p = std::min(hi, std::max(lo, probs(i, j)));
      loss -= onehot(i, j) * std::log(p);
      if (grad) (*grad)(i, j) = -onehot(i, j) / p / static_cast<Scalar>(n);
    }
  return loss / static_cast<Scalar>(n);
}

/// Categorical cross-entropy with integer class labels.
template <typename Scalar>
Scalar cce_loss(const Tensor<Scalar>& probs, const std::vector<int>& labels) {
  require(probs.rank() == 2 && probs.dim(0) == static_cast<Index>(labels.size()), ErrorKind::shape,
          "cce: probs [N,C] must match label count");
  const Index k = probs.dim(1);
  const Scalar lo = static_cast<Scalar>(kProbClip), hi = Scalar(1) - static_cast<Scalar>(kProbClip);
  Scalar loss = 0;
  for (Index i = 0; i < probs.dim(0); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < k, ErrorKind::data, "label out of range: " + std::to_string(y));
    loss -= std::log(std::min(hi, std::max(lo, probs(i, y))));
  }
  return loss / static_cast<Scalar>(probs.dim(0));
}

/// Fused softmax + cross-entropy gradient at the logits: (yhat - y) / N.
template <typename Scalar>
Tensor<Scalar> softmax_cce_grad(const Tensor<Scalar>& probs, const std::vector<int>& labels) {
  const Index n = probs.dim(0);
  Tensor<Scalar> g(probs.shape(), probs.array() / static_cast<Scalar>(n));
  for (Index i = 0; i < n; ++i) g(i, labels[static_cast<std::size_t>(i)]) -= Scalar(1) / static_cast<Scalar>(n);
  return g;
}

// ---------------------------------------------------------------------------
// Update rules. All of them iterate the gradient's slots, so parameter slots
// without a gradient (frozen slots, running statistics) pass through untouched.
// ---------------------------------------------------------------------------

template <typename Scalar>
ParamSet<Scalar> sgd_step(const ParamSet<Scalar>& w, const ParamSet<Scalar>& grad, Scalar eta) {
  ParamSet<Scalar> next = w;
  for (const auto& gs : grad.slots()) {
    auto& value = next.at(gs.name);
    require(value.same_shape(gs.value), ErrorKind::shape, "sgd: gradient shape mismatch for " + gs.name);
    value.array() -= eta * gs.value.array();
  }
  return next;
}

template <typename Scalar>
struct AdamState {
  ParamSet<Scalar> m, v;  // allocated lazily from the first gradient
  std::int64_t t = 0;
  Scalar alpha = static_cast<Scalar>(1e-3);
  Scalar beta1 = static_cast<Scalar>(0.9);
  Scalar beta2 = static_cast<Scalar>(0.999);
  Scalar epsilon = static_cast<Scalar>(1e-8);
};

template <typename Scalar>
std::pair<AdamState<Scalar>, ParamSet<Scalar>> adam_step(AdamState<Scalar> state, const ParamSet<Scalar>& w,
                                                         const ParamSet<Scalar>& grad) {
  if (state.m.empty()) {
    state.m = grad.zeros_like();
    state.v = grad.zeros_like();
  }
  state.t += 1;
  const Scalar bc1 = Scalar(1) - std::pow(state.beta1, static_cast<Scalar>(state.t));
  const Scalar bc2 = Scalar(1) - std::pow(state.beta2, static_cast<Scalar>(state.t));
  ParamSet<Scalar> next = w;
  for (const auto& gs : grad.slots()) {
    auto& m = state.m.at(gs.name);
    auto& v = state.v.at(gs.name);
    auto& value = next.at(gs.name);
    require(value.same_shape(gs.value), ErrorKind::shape, "adam: gradient shape mismatch for " + gs.name);
    m.array() = state.beta1 * m.array() + (Scalar(1) - state.beta1) * gs.value.array();
    v.array() = state.beta2 * v.array() + (Scalar(1) - state.beta2) * gs.value.array().square();
    value.array() -= state.alpha * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.epsilon);
  }
  return {std::move(state), std::move(next)};
}

/// Mean-loss gradient of one minibatch: callers bind the model, data and
/// training mode; `seed` pins any stochastic layers so the same call is
/// bit-reproducible.
template <typename Scalar>
using BatchGradFn =
    std::function<ParamSet<Scalar>(const ParamSet<Scalar>& w, std::span<const Index> batch, std::uint64_t seed)>;

template <typename Scalar>
struct SvrgState {
  ParamSet<Scalar> snapshot;   // weights the full gradient was taken at
  ParamSet<Scalar> full_grad;  // gradient of the whole local loss at snapshot
  std::int64_t inner_steps = 0;
};

/// Seed used for chunk `i` of a full-gradient pass with base seed `seed`.
inline std::uint64_t svrg_chunk_seed(std::uint64_t seed, std::uint64_t chunk) {
  return Rng(seed).stream_seed("chunk", chunk);
}

/// Full local gradient at the current weights, computed in fixed chunk order.
/// A single chunk covering the whole dataset is used verbatim (no rescale), so
/// a later svrg_step over the same chunk cancels the correction exactly.
template <typename Scalar>
SvrgState<Scalar> svrg_prepare(const BatchGradFn<Scalar>& grad_fn, const ParamSet<Scalar>& w,
                               std::span<const Index> dataset, Index chunk_size, std::uint64_t seed) {
  require(!dataset.empty(), ErrorKind::data, "svrg_prepare: empty dataset");
  require(chunk_size >= 1, ErrorKind::config, "svrg_prepare: chunk size must be positive");
  SvrgState<Scalar> state;
  state.snapshot = w;
  const Index n = static_cast<Index>(dataset.size());
  if (chunk_size >= n) {
    state.full_grad = grad_fn(w, dataset, svrg_chunk_seed(seed, 0));
    return state;
  }
  ParamSet<Scalar> acc;  // sum of chunk gradients weighted by chunk size
  Index chunk_index = 0;
  for (Index start = 0; start < n; start += chunk_size, ++chunk_index) {
    const Index len = std::min(chunk_size, n - start);
    ParamSet<Scalar> g = grad_fn(w, dataset.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(len)),
                                 svrg_chunk_seed(seed, static_cast<std::uint64_t>(chunk_index)));
    if (acc.empty()) {
      acc = g.zeros_like();
    }
    for (const auto& gs : g.slots()) acc.at(gs.name).array() += static_cast<Scalar>(len) * gs.value.array();
  }
  for (auto& s : acc.slots()) s.value.array() /= static_cast<Scalar>(n);
  state.full_grad = std::move(acc);
  return state;
}

/// Core variance-reduced update:
///   w <- w - eta * (g_now + (full_grad - g_snap))
/// The correction is grouped as (full_grad - g_snap) so a minibatch equal to
/// the full-gradient chunk cancels it exactly.
template <typename Scalar>
ParamSet<Scalar> svrg_apply(SvrgState<Scalar>& state, const ParamSet<Scalar>& w, const ParamSet<Scalar>& g_now,
                            const ParamSet<Scalar>& g_snap, Scalar eta) {
  ParamSet<Scalar> next = w;
  for (const auto& gs : g_now.slots()) {
    auto& value = next.at(gs.name);
    value.array() -=
        eta * (gs.value.array() + (state.full_grad.at(gs.name).array() - g_snap.at(gs.name).array()));
  }
  state.inner_steps += 1;
  return next;
}

/// One variance-reduced step, with both minibatch gradients taken over the
/// same batch and seed.
template <typename Scalar>
ParamSet<Scalar> svrg_step(SvrgState<Scalar>& state, const BatchGradFn<Scalar>& grad_fn, const ParamSet<Scalar>& w,
                           std::span<const Index> batch, Scalar eta, std::uint64_t seed) {
  require(!batch.empty(), ErrorKind::data, "svrg_step: empty minibatch");
  ParamSet<Scalar> g_now = grad_fn(w, batch, seed);
  ParamSet<Scalar> g_snap = grad_fn(state.snapshot, batch, seed);
  return svrg_apply(state, w, g_now, g_snap, eta);
}

/// Exact single division; the schedule applies it once per reduction so the
/// rate after r reductions is eta0 / factor^r.
template <typename Scalar>
Scalar reduce_lr(Scalar eta, Scalar factor) {
  require(factor > Scalar(1), ErrorKind::config, "lr reduction factor must be > 1");
  return eta / factor;
}

// ---------------------------------------------------------------------------
// Optimizer configuration (run-config JSON fragment)
// ---------------------------------------------------------------------------

enum class OptimizerType { sgd, adam, svrg };

struct OptimizerConfig {
  OptimizerType type = OptimizerType::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline OptimizerType optimizer_type_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerType::sgd;
  if (s == "adam") return OptimizerType::adam;
  if (s == "svrg") return OptimizerType::svrg;
  throw Error(ErrorKind::config, "unknown optimizer type: " + s);
}

inline std::string to_string(OptimizerType t) {
  switch (t) {
    case OptimizerType::sgd: return "sgd";
    case OptimizerType::adam: return "adam";
    case OptimizerType::svrg: return "svrg";
  }
  return "?";
}

}  // namespace medix
