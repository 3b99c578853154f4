#pragma once

#include <limits>
#include <span>
#include <vector>

#include "medix/data.hpp"
#include "medix/graph.hpp"
#include "medix/optim.hpp"
#include "medix/rng.hpp"

// Minibatch machinery shared by the centralized trainer and the federated
// clients. Both draw every shuffle and dropout seed from one derivation,
//   client_stream(run_seed, round, client) -> "local-epoch" e -> "batch" b,
// with the centralized loop defined as the client-0 schedule (round == epoch,
// one local epoch). That is what makes a single-client federated run
// reproduce centralized training exactly.

namespace medix {

inline Rng client_stream(std::uint64_t run_seed, int round_index, int client_id) {
  return Rng(run_seed)
      .split("round", static_cast<std::uint64_t>(round_index))
      .split("client", static_cast<std::uint64_t>(client_id));
}

/// Owns the mutable optimizer state (learning rate, Adam moments) across
/// steps. SVRG snapshots are managed by the epoch runner, not here.
template <typename Scalar>
class Optimizer {
 public:
  explicit Optimizer(const OptimizerConfig& cfg) : cfg_(cfg), lr_(cfg.lr) {
    adam_.alpha = static_cast<Scalar>(cfg.lr);
    adam_.beta1 = static_cast<Scalar>(cfg.beta1);
    adam_.beta2 = static_cast<Scalar>(cfg.beta2);
    adam_.epsilon = static_cast<Scalar>(cfg.epsilon);
  }

  OptimizerType type() const { return cfg_.type; }
  double lr() const { return lr_; }

  void reduce(double factor) {
    lr_ = reduce_lr(lr_, factor);
    adam_.alpha = static_cast<Scalar>(lr_);
  }

  ParamSet<Scalar> step(const ParamSet<Scalar>& w, const ParamSet<Scalar>& grads) {
    switch (cfg_.type) {
      case OptimizerType::sgd:
        return sgd_step(w, grads, static_cast<Scalar>(lr_));
      case OptimizerType::adam: {
        auto [state, next] = adam_step(std::move(adam_), w, grads);
        adam_ = std::move(state);
        return std::move(next);
      }
      case OptimizerType::svrg:
        throw Error(ErrorKind::config, "svrg steps need snapshot state; use run_local_update");
    }
    throw Error(ErrorKind::config, "unreachable optimizer type");
  }

 private:
  OptimizerConfig cfg_;
  double lr_;
  AdamState<Scalar> adam_;
};

template <typename Scalar>
BatchGradFn<Scalar> make_batch_grad_fn(const ModelGraph& g, const Dataset<Scalar>& data, bool training) {
  return [&g, &data, training](const ParamSet<Scalar>& w, std::span<const Index> batch, std::uint64_t seed) {
    Tensor<Scalar> images = gather_images(data, batch);
    std::vector<int> labels = gather_labels(data, batch);
    auto r = loss_and_gradients(g, w, images, labels, training, seed);
    return std::move(r.ex.param_grads);
  };
}

template <typename Scalar>
struct LocalUpdateResult {
  ParamSet<Scalar> weights;
  double mean_loss = 0;  // sample-weighted mean of the minibatch losses
  Index steps = 0;
};

/// Runs `epochs` full passes (or exactly `steps` minibatch steps when
/// steps > 0) over `indices`. Batch-norm running statistics from the main
/// gradient pass are committed into the weights after every step. For SVRG,
/// the full local gradient is snapshotted once per call.
template <typename Scalar>
LocalUpdateResult<Scalar> run_local_update(const ModelGraph& g, const Dataset<Scalar>& data,
                                           std::span<const Index> indices, ParamSet<Scalar> w,
                                           Optimizer<Scalar>& opt, Index batch_size, int epochs, Index steps,
                                           const Rng& stream) {
  require(!indices.empty(), ErrorKind::data, "local update: empty partition");
  require(batch_size >= 1, ErrorKind::config, "batch size must be positive");
  require(epochs >= 0, ErrorKind::config, "epoch count must be non-negative");

  LocalUpdateResult<Scalar> result;
  SvrgState<Scalar> svrg;
  if (opt.type() == OptimizerType::svrg && (epochs > 0 || steps > 0)) {
    svrg = svrg_prepare(make_batch_grad_fn(g, data, true), w, indices, batch_size,
                        stream.stream_seed("svrg-full"));
  }

  double loss_sum = 0;
  Index seen = 0;
  std::vector<Index> order(indices.begin(), indices.end());
  const int max_epochs = steps > 0 ? std::numeric_limits<int>::max() : epochs;
  for (int e = 0; e < max_epochs; ++e) {
    Rng epoch_stream = stream.split("local-epoch", static_cast<std::uint64_t>(e));
    Rng shuffle_rng = epoch_stream.split("shuffle");
    shuffle(order, shuffle_rng);
    for (Index start = 0, b = 0; start < static_cast<Index>(order.size()); start += batch_size, ++b) {
      const Index len = std::min<Index>(batch_size, static_cast<Index>(order.size()) - start);
      std::span<const Index> batch(order.data() + start, static_cast<std::size_t>(len));
      const std::uint64_t seed_b = epoch_stream.stream_seed("batch", static_cast<std::uint64_t>(b));

      Tensor<Scalar> images = gather_images(data, batch);
      std::vector<int> labels = gather_labels(data, batch);
      auto main = loss_and_gradients(g, w, images, labels, true, seed_b);

      if (opt.type() == OptimizerType::svrg) {
        auto snap = loss_and_gradients(g, svrg.snapshot, images, labels, true, seed_b);
        w = svrg_apply(svrg, w, main.ex.param_grads, snap.ex.param_grads, static_cast<Scalar>(opt.lr()));
      } else {
        w = opt.step(w, main.ex.param_grads);
      }
      for (auto& [name, value] : main.ex.state_updates) w.at(name) = std::move(value);

      loss_sum += main.loss * static_cast<double>(len);
      seen += len;
      ++result.steps;
      if (steps > 0 && result.steps >= steps) goto done;
    }
  }
done:
  result.weights = std::move(w);
  result.mean_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
  return result;
}

}  // namespace medix
