#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "medix/harness.hpp"
#include "medix/train_loop.hpp"

// Deterministic single-process federated averaging: partition the training
// indices over K clients, then per round select clients, broadcast the global
// weights, run local updates, and aggregate by sample-count-weighted mean.
// Only weight sets and sample counts ever cross the client/server boundary.

namespace medix {

enum class LocalMethod { sgd, svrg };
enum class AggregationRule { model_average, delta_average };
enum class PartitionScheme { iid, label_skew };

struct FederatedConfig {
  int clients = 4;
  double fraction = 1.0;  // participation per round; ceil(clients * fraction) selected
  int local_epochs = 1;
  Index local_steps = 0;  // > 0 switches local updates to an exact step budget
  double lr = 0.1;
  LocalMethod method = LocalMethod::sgd;
  int rounds = 10;
  Index batch_size = 32;
  std::uint64_t seed = 0;
  AggregationRule aggregation = AggregationRule::model_average;
  PartitionScheme partition = PartitionScheme::iid;
  int shards_per_client = 2;

  int selected_per_round() const {
    return std::max(1, static_cast<int>(std::ceil(fraction * static_cast<double>(clients))));
  }

  void validate() const {
    require(clients >= 1, ErrorKind::config, "need at least one client");
    require(fraction > 0.0 && fraction <= 1.0, ErrorKind::config, "participation fraction must be in (0,1]");
    require(local_epochs >= 0 && local_steps >= 0, ErrorKind::config, "local work must be non-negative");
    require(rounds >= 0, ErrorKind::config, "rounds must be non-negative");
    require(batch_size >= 1, ErrorKind::config, "batch size must be positive");
    require(lr >= 0.0, ErrorKind::config, "learning rate must be non-negative");
    if (partition == PartitionScheme::label_skew)
      require(shards_per_client >= 1, ErrorKind::config, "shards per client must be positive");
  }
};

// ---------------------------------------------------------------------------
// Partitioners. Partitions are index SETS; each client's list is stored in
// ascending order (per-epoch ordering is reshuffled locally anyway).
// ---------------------------------------------------------------------------

/// Random disjoint near-equal partitions (sizes differ by at most one)
/// covering all of 0..n-1.
inline std::vector<std::vector<Index>> partition_iid(Index n, int k, std::uint64_t seed) {
  require(k >= 1, ErrorKind::config, "partition_iid: need k >= 1");
  require(n >= k, ErrorKind::data, "partition_iid: fewer samples than clients");
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index(0));
  Rng rng = Rng(seed).split("partition");
  shuffle(idx, rng);
  std::vector<std::vector<Index>> parts(static_cast<std::size_t>(k));
  const Index base = n / k, extra = n % k;
  Index at = 0;
  for (int c = 0; c < k; ++c) {
    const Index len = base + (c < extra ? 1 : 0);
    parts[static_cast<std::size_t>(c)].assign(idx.begin() + at, idx.begin() + at + len);
    std::sort(parts[static_cast<std::size_t>(c)].begin(), parts[static_cast<std::size_t>(c)].end());
    at += len;
  }
  return parts;
}

/// Label-skewed partitions: sort by label, cut into k*s near-equal shards,
/// deal s shards to each client. When shards align with label boundaries each
/// client sees at most s distinct labels (at most 2s otherwise).
inline std::vector<std::vector<Index>> partition_label_skew(const std::vector<int>& labels, int k, int s,
                                                            std::uint64_t seed) {
  require(k >= 1 && s >= 1, ErrorKind::config, "partition_label_skew: need k, s >= 1");
  const Index n = static_cast<Index>(labels.size());
  const Index shards = static_cast<Index>(k) * s;
  require(n >= shards, ErrorKind::data, "partition_label_skew: too few samples for k*s shards");

  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index(0));
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) {
    return labels[static_cast<std::size_t>(a)] < labels[static_cast<std::size_t>(b)];
  });

  std::vector<Index> shard_order(static_cast<std::size_t>(shards));
  std::iota(shard_order.begin(), shard_order.end(), Index(0));
  Rng rng = Rng(seed).split("partition");
  shuffle(shard_order, rng);

  const Index base = n / shards, extra = n % shards;
  auto shard_bounds = [&](Index shard) {
    const Index lo = shard * base + std::min(shard, extra);
    return std::pair<Index, Index>{lo, lo + base + (shard < extra ? 1 : 0)};
  };

  std::vector<std::vector<Index>> parts(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    for (int j = 0; j < s; ++j) {
      const Index shard = shard_order[static_cast<std::size_t>(c * s + j)];
      const auto [lo, hi] = shard_bounds(shard);
      parts[static_cast<std::size_t>(c)].insert(parts[static_cast<std::size_t>(c)].end(), idx.begin() + lo,
                                                idx.begin() + hi);
    }
    std::sort(parts[static_cast<std::size_t>(c)].begin(), parts[static_cast<std::size_t>(c)].end());
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Protocol types
// ---------------------------------------------------------------------------

struct ClientState {
  int id = 0;
  std::vector<Index> indices;  // positions into the dataset

  Index n() const { return static_cast<Index>(indices.size()); }
};

template <typename Scalar>
struct ServerState {
  ParamSet<Scalar> weights;
  int round = 0;
};

template <typename Scalar>
struct ClientUpdate {
  int client_id = 0;
  Index n = 0;
  ParamSet<Scalar> weights;
};

/// Value-semantics copies of the global weights, one per selected client.
template <typename Scalar>
std::vector<ParamSet<Scalar>> broadcast(const ServerState<Scalar>& server, std::span<const int> selected) {
  require(!selected.empty(), ErrorKind::config, "broadcast: empty selection");
  return std::vector<ParamSet<Scalar>>(selected.size(), server.weights);
}

/// Sample-count-weighted mean of client weights, summed in ascending
/// client-id order (the implementation's fixed reduction order).
template <typename Scalar>
ParamSet<Scalar> aggregate(std::vector<ClientUpdate<Scalar>> updates) {
  require(!updates.empty(), ErrorKind::config, "aggregate: no updates");
  std::sort(updates.begin(), updates.end(),
            [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  Scalar total = 0;
  for (const auto& u : updates) {
    require(u.n >= 1, ErrorKind::config, "aggregate: client sample count must be positive");
    total += static_cast<Scalar>(u.n);
  }
  if (updates.size() == 1) return std::move(updates.front().weights);  // mean of one: exact
  ParamSet<Scalar> acc = updates.front().weights.zeros_like();
  for (const auto& u : updates)
    for (auto& slot : acc.slots()) {
      const auto& v = u.weights.at(slot.name);
      require(v.same_shape(slot.value), ErrorKind::shape, "aggregate: shape mismatch on " + slot.name);
      slot.value.array() += static_cast<Scalar>(u.n) * v.array();
    }
  for (auto& slot : acc.slots()) slot.value.array() /= total;
  return acc;
}

/// Delta-form aggregation: w + (1/total_samples) * sum_k n_k * delta_k.
/// `total_samples` is the population size N across ALL clients; under partial
/// participation this shrinks the update by the participation ratio relative
/// to the model-average form (both are provided, model-average is the default).
template <typename Scalar>
ParamSet<Scalar> aggregate_delta(const ParamSet<Scalar>& base, std::vector<ClientUpdate<Scalar>> deltas,
                                 Index total_samples) {
  require(!deltas.empty(), ErrorKind::config, "aggregate_delta: no updates");
  require(total_samples >= 1, ErrorKind::config, "aggregate_delta: total sample count must be positive");
  std::sort(deltas.begin(), deltas.end(),
            [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  ParamSet<Scalar> next = base;
  ParamSet<Scalar> acc = base.zeros_like();
  for (const auto& u : deltas)
    for (auto& slot : acc.slots()) slot.value.array() += static_cast<Scalar>(u.n) * u.weights.at(slot.name).array();
  for (auto& slot : next.slots())
    slot.value.array() += acc.at(slot.name).array() / static_cast<Scalar>(total_samples);
  return next;
}

/// One client's local training for a round. Returns the updated weights, the
/// sample count, and the mean local training loss.
template <typename Scalar>
std::pair<ClientUpdate<Scalar>, double> local_update(const ModelGraph& g, const Dataset<Scalar>& data,
                                                     const ClientState& client, ParamSet<Scalar> w,
                                                     const FederatedConfig& cfg, int round_index) {
  OptimizerConfig oc;
  oc.type = cfg.method == LocalMethod::sgd ? OptimizerType::sgd : OptimizerType::svrg;
  oc.lr = cfg.lr;
  Optimizer<Scalar> opt(oc);
  auto res = run_local_update(g, data, client.indices, std::move(w), opt, cfg.batch_size, cfg.local_epochs,
                              cfg.local_steps, client_stream(cfg.seed, round_index, client.id));
  ClientUpdate<Scalar> update;
  update.client_id = client.id;
  update.n = client.n();
  update.weights = std::move(res.weights);
  return {std::move(update), res.mean_loss};
}

struct RoundReport {
  int round = 0;
  std::vector<int> selected;
  double train_loss = 0;  // n_k-weighted mean of client losses
  double val_accuracy = 0;
  double wall_ms = 0;
};

/// Observation hook for serialized client/server traffic; used to verify that
/// nothing but weights and counts crosses the boundary.
template <typename Scalar>
struct TrafficObserver {
  std::function<void(int client_id, const std::string& bytes)> on_broadcast;
  std::function<void(int client_id, Index n, const std::string& bytes)> on_update;
};

template <typename Scalar>
std::string serialize_weights(const ParamSet<Scalar>& w) {
  std::string bytes;
  for (const auto& s : w.slots()) bytes += dmtx_bytes(s.value);
  return bytes;
}

/// One communication round: seeded client selection without replacement,
/// broadcast, local updates in ascending client-id order, aggregation,
/// round-counter increment.
template <typename Scalar>
RoundReport run_round(const ModelGraph& g, const Dataset<Scalar>& data, ServerState<Scalar>& server,
                      const std::vector<ClientState>& clients, const FederatedConfig& cfg,
                      const TrafficObserver<Scalar>* observer = nullptr) {
  cfg.validate();
  require(!clients.empty(), ErrorKind::config, "run_round: no clients");
  const auto t0 = std::chrono::steady_clock::now();
  const int round_index = server.round;

  std::vector<int> ids(clients.size());
  for (std::size_t i = 0; i < clients.size(); ++i) ids[i] = clients[i].id;
  Rng select_rng = Rng(cfg.seed).split("select", static_cast<std::uint64_t>(round_index));
  shuffle(ids, select_rng);
  ids.resize(static_cast<std::size_t>(std::min<int>(cfg.selected_per_round(), static_cast<int>(clients.size()))));
  std::sort(ids.begin(), ids.end());

  std::vector<ParamSet<Scalar>> copies = broadcast(server, ids);
  if (observer && observer->on_broadcast)
    for (std::size_t i = 0; i < ids.size(); ++i) observer->on_broadcast(ids[i], serialize_weights(copies[i]));

  std::vector<ClientUpdate<Scalar>> updates;
  double loss_sum = 0;
  Index n_sum = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = std::find_if(clients.begin(), clients.end(),
                                 [&](const ClientState& c) { return c.id == ids[i]; });
    require(it != clients.end(), ErrorKind::config, "unknown client id");
    auto [update, loss] = local_update(g, data, *it, std::move(copies[i]), cfg, round_index);
    loss_sum += loss * static_cast<double>(update.n);
    n_sum += update.n;
    if (observer && observer->on_update)
      observer->on_update(update.client_id, update.n, serialize_weights(update.weights));
    updates.push_back(std::move(update));
  }

  if (cfg.aggregation == AggregationRule::model_average) {
    server.weights = aggregate(std::move(updates));
  } else {
    Index total = 0;
    for (const auto& c : clients) total += c.n();
    for (auto& u : updates)
      for (auto& slot : u.weights.slots()) slot.value.array() -= server.weights.at(slot.name).array();
    server.weights = aggregate_delta(server.weights, std::move(updates), total);
  }
  server.round += 1;

  RoundReport report;
  report.round = round_index;
  report.selected = std::move(ids);
  report.train_loss = n_sum > 0 ? loss_sum / static_cast<double>(n_sum) : 0.0;
  report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

template <typename Scalar>
struct FederatedResult {
  ParamSet<Scalar> weights;  // final global model
  std::vector<RoundReport> history;
  std::vector<ClientState> clients;
};

/// Full multi-round run over the train split, evaluating the global model on
/// the validation split after every round.
template <typename Scalar>
FederatedResult<Scalar> run_federated(const ModelGraph& g, const Dataset<Scalar>& data,
                                      std::span<const Index> train_idx, std::span<const Index> val_idx,
                                      ParamSet<Scalar> w0, const FederatedConfig& cfg,
                                      const TrafficObserver<Scalar>* observer = nullptr) {
  cfg.validate();
  require(!train_idx.empty(), ErrorKind::data, "run_federated: empty train split");

  std::vector<std::vector<Index>> positions;
  if (cfg.partition == PartitionScheme::iid) {
    positions = partition_iid(static_cast<Index>(train_idx.size()), cfg.clients, cfg.seed);
  } else {
    std::vector<int> labels(train_idx.size());
    for (std::size_t i = 0; i < train_idx.size(); ++i)
      labels[i] = data.labels[static_cast<std::size_t>(train_idx[i])];
    positions = partition_label_skew(labels, cfg.clients, cfg.shards_per_client, cfg.seed);
  }

  FederatedResult<Scalar> result;
  result.clients.resize(static_cast<std::size_t>(cfg.clients));
  for (int c = 0; c < cfg.clients; ++c) {
    auto& client = result.clients[static_cast<std::size_t>(c)];
    client.id = c;
    for (Index pos : positions[static_cast<std::size_t>(c)]) client.indices.push_back(train_idx[pos]);
  }

  ServerState<Scalar> server;
  server.weights = std::move(w0);
  for (int r = 0; r < cfg.rounds; ++r) {
    RoundReport report = run_round(g, data, server, result.clients, cfg, observer);
    if (!val_idx.empty()) report.val_accuracy = evaluate(g, server.weights, data, val_idx).accuracy;
    result.history.push_back(std::move(report));
  }
  result.weights = std::move(server.weights);
  return result;
}

inline void write_rounds_csv(const std::string& path, const std::vector<RoundReport>& history) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::data, "cannot write rounds csv: " + path);
  out << "round,selected_ids,train_loss,val_accuracy,wall_ms\n";
  out.precision(17);
  for (const auto& r : history) {
    out << r.round << ",";
    for (std::size_t i = 0; i < r.selected.size(); ++i) out << (i ? "|" : "") << r.selected[i];
    out << "," << r.train_loss << "," << r.val_accuracy << "," << r.wall_ms << "\n";
  }
}

}  // namespace medix
