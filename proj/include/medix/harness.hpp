#pragma once

#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "medix/data.hpp"
#include "medix/graph.hpp"
#include "medix/metrics.hpp"
#include "medix/train_loop.hpp"

// Centralized training loop: per-epoch validation with best-checkpoint
// retention, learning-rate reduction on plateaus, and early stopping.

namespace medix {

struct TrainConfig {
  int max_epochs = 50;
  Index batch_size = 32;
  int patience = 15;   // stop after this many consecutive epochs without improvement
  int lr_window = 3;   // reduce the rate after this many, re-armed after each reduction
  double lr_factor = 3.0;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;

  void validate() const {
    require(max_epochs >= 0, ErrorKind::config, "max_epochs must be non-negative");
    require(batch_size >= 1, ErrorKind::config, "batch_size must be positive");
    require(lr_window >= 1 && patience >= lr_window, ErrorKind::config,
            "patience must be >= lr window >= 1");
    require(lr_factor > 1.0, ErrorKind::config, "lr_factor must be > 1");
  }
};

/// Plateau state machine, separated out so schedules can be driven with
/// injected accuracy sequences. "Improvement" is strictly greater validation
/// accuracy. The reduction window re-arms after each reduction, and a stop
/// decision suppresses a same-epoch reduction.
class TrainSchedule {
 public:
  TrainSchedule(int patience, int window) : patience_(patience), window_(window) {}

  struct Decision {
    bool improved = false;
    bool reduce_lr = false;
    bool stop = false;
  };

  Decision observe(double val_accuracy) {
    ++epoch_;
    Decision d;
    if (val_accuracy > best_) {
      best_ = val_accuracy;
      best_epoch_ = epoch_;
      since_improve_ = 0;
      window_count_ = 0;
      d.improved = true;
      return d;
    }
    ++since_improve_;
    ++window_count_;
    if (since_improve_ >= patience_) {
      d.stop = true;
      return d;
    }
    if (window_count_ >= window_) {
      d.reduce_lr = true;
      window_count_ = 0;
    }
    return d;
  }

  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }

 private:
  int patience_, window_;
  int epoch_ = 0;
  int since_improve_ = 0;
  int window_count_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0;
  double train_loss = 0;
  double val_accuracy = 0;
  bool improved = false;
  bool reduced_lr = false;
  bool stopped = false;
};

template <typename Scalar>
struct TrainResult {
  ParamSet<Scalar> best;
  std::vector<EpochRecord> history;
  double best_val_accuracy = 0;
  int best_epoch = 0;
};

/// Eval-mode forward over a split in fixed-size chunks; per-sample results do
/// not depend on the chunking.
template <typename Scalar>
Tensor<Scalar> predict(const ModelGraph& g, const ParamSet<Scalar>& params, const Dataset<Scalar>& data,
                       std::span<const Index> idx, Index chunk = 64) {
  require(!idx.empty(), ErrorKind::data, "predict: empty split");
  const Index k = infer_shapes(g)[static_cast<std::size_t>(g.output)][0];
  Tensor<Scalar> probs({static_cast<Index>(idx.size()), k});
  for (Index start = 0; start < static_cast<Index>(idx.size()); start += chunk) {
    const Index len = std::min<Index>(chunk, static_cast<Index>(idx.size()) - start);
    Tensor<Scalar> images = gather_images(data, idx.subspan(static_cast<std::size_t>(start),
                                                            static_cast<std::size_t>(len)));
    auto ex = forward(g, params, images, /*training=*/false, /*seed=*/0);
    std::copy(ex.output().data(), ex.output().data() + len * k, probs.data() + start * k);
  }
  return probs;
}

template <typename Scalar>
MetricsReport evaluate(const ModelGraph& g, const ParamSet<Scalar>& params, const Dataset<Scalar>& data,
                       std::span<const Index> idx) {
  Tensor<Scalar> probs = predict(g, params, data, idx);
  return compute_metrics(probs, gather_labels(data, idx));
}

/// Trains from `w0`, checkpointing the best validation accuracy (ties keep the
/// earlier epoch). Epochs run the single-client schedule of round e.
template <typename Scalar>
TrainResult<Scalar> train(const ModelGraph& g, const Dataset<Scalar>& data, std::span<const Index> train_idx,
                          std::span<const Index> val_idx, ParamSet<Scalar> w0, const TrainConfig& cfg) {
  cfg.validate();
  require(!train_idx.empty() && !val_idx.empty(), ErrorKind::data, "train: empty split");

  TrainResult<Scalar> result;
  result.best = w0;
  ParamSet<Scalar> w = std::move(w0);
  Optimizer<Scalar> opt(cfg.optimizer);
  TrainSchedule schedule(cfg.patience, cfg.lr_window);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto local = run_local_update(g, data, train_idx, std::move(w), opt, cfg.batch_size,
                                  /*epochs=*/1, /*steps=*/0, client_stream(cfg.seed, epoch - 1, 0));
    w = std::move(local.weights);

    const MetricsReport val = evaluate(g, w, data, val_idx);
    const auto decision = schedule.observe(val.accuracy);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr();
    rec.train_loss = local.mean_loss;
    rec.val_accuracy = val.accuracy;
    rec.improved = decision.improved;
    rec.stopped = decision.stop;
    if (decision.improved) {
      result.best = w;
      result.best_val_accuracy = val.accuracy;
      result.best_epoch = epoch;
    }
    if (decision.reduce_lr) {
      opt.reduce(cfg.lr_factor);
      rec.reduced_lr = true;
    }
    result.history.push_back(rec);
    if (decision.stop) break;
  }
  return result;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::data, "cannot write history: " + path);
  out << "epoch,lr,train_loss,val_accuracy,improved,reduced_lr,stopped\n";
  out.precision(17);
  for (const auto& r : history)
    out << r.epoch << "," << r.lr << "," << r.train_loss << "," << r.val_accuracy << "," << (r.improved ? 1 : 0)
        << "," << (r.reduced_lr ? 1 : 0) << "," << (r.stopped ? 1 : 0) << "\n";
}

}  // namespace medix
