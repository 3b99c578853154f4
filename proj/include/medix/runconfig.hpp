#pragma once

#include <array>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "medix/data.hpp"
#include "medix/federated.hpp"
#include "medix/harness.hpp"
#include "medix/models.hpp"
#include "medix/optim.hpp"

// Run configuration: one JSON file drives every subcommand. Unknown keys are
// rejected so typos fail fast, and the fully merged configuration is written
// back into the output directory for exact re-runs.

namespace medix {

struct DataConfig {
  enum class Source { synthetic, manifest };
  Source source = Source::synthetic;
  std::string manifest_path;
  std::string cache_dir;  // optional DMTX cache for preprocessed tensors
  SyntheticSpec synthetic;
  std::array<double, 3> splits = {0.8, 0.1, 0.1};
};

struct RunConfig {
  std::string precision = "f32";  // f32 | f64
  std::uint64_t seed = 42;
  std::string out = "out";
  int threads = 1;
  ModelConfig model;
  DataConfig data;
  OptimizerConfig optimizer;
  int train_epochs = 50;
  Index train_batch = 32;
  int patience = 15;
  int lr_window = 3;
  double lr_factor = 3.0;
  FederatedConfig federated;
  int analyze_eigenvalues = 5;
  std::string eval_checkpoint;
  std::string eval_split = "test";

  TrainConfig train_config() const {
    TrainConfig tc;
    tc.max_epochs = train_epochs;
    tc.batch_size = train_batch;
    tc.patience = patience;
    tc.lr_window = lr_window;
    tc.lr_factor = lr_factor;
    tc.seed = seed;
    tc.optimizer = optimizer;
    return tc;
  }
};

inline LocalMethod local_method_from_string(const std::string& s) {
  if (s == "sgd") return LocalMethod::sgd;
  if (s == "svrg") return LocalMethod::svrg;
  throw Error(ErrorKind::config, "unknown federated local method: " + s);
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  check_json_keys(j, {"precision", "seed", "out", "threads", "model", "data", "optimizer", "train", "federated",
                      "analyze", "eval"},
                  "run config");
  RunConfig cfg;
  if (j.contains("precision")) {
    cfg.precision = j.at("precision").get<std::string>();
    require(cfg.precision == "f32" || cfg.precision == "f64", ErrorKind::config,
            "precision must be f32 or f64");
  }
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("out")) cfg.out = j.at("out").get<std::string>();
  if (j.contains("threads")) {
    cfg.threads = j.at("threads").get<int>();
    require(cfg.threads >= 1, ErrorKind::config, "threads must be >= 1");
  }
  if (j.contains("model")) cfg.model = model_from_json(j.at("model"));

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_json_keys(d, {"source", "manifest", "cache", "synthetic", "splits"}, "data config");
    if (d.contains("cache")) cfg.data.cache_dir = d.at("cache").get<std::string>();
    if (d.contains("source")) {
      const std::string s = d.at("source").get<std::string>();
      if (s == "synthetic")
        cfg.data.source = DataConfig::Source::synthetic;
      else if (s == "manifest")
        cfg.data.source = DataConfig::Source::manifest;
      else
        throw Error(ErrorKind::config, "data.source must be synthetic or manifest");
    }
    if (d.contains("manifest")) cfg.data.manifest_path = d.at("manifest").get<std::string>();
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      check_json_keys(s, {"samples", "height", "width", "classes", "noise", "blob_sigma", "blob_amplitude", "seed"},
                      "data.synthetic");
      auto& spec = cfg.data.synthetic;
      if (s.contains("samples")) spec.num_samples = s.at("samples").get<Index>();
      if (s.contains("height")) spec.height = s.at("height").get<Index>();
      if (s.contains("width")) spec.width = s.at("width").get<Index>();
      if (s.contains("classes")) spec.num_classes = s.at("classes").get<Index>();
      if (s.contains("noise")) spec.noise = s.at("noise").get<double>();
      if (s.contains("blob_sigma")) spec.blob_sigma = s.at("blob_sigma").get<double>();
      if (s.contains("blob_amplitude")) spec.blob_amplitude = s.at("blob_amplitude").get<double>();
      if (s.contains("seed")) spec.seed = s.at("seed").get<std::uint64_t>();
    }
    if (d.contains("splits")) {
      const auto sp = d.at("splits");
      require(sp.is_array() && sp.size() == 3, ErrorKind::config, "data.splits must be [train,val,test]");
      for (int i = 0; i < 3; ++i) cfg.data.splits[static_cast<std::size_t>(i)] = sp[i].get<double>();
    }
  }

  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    check_json_keys(o, {"type", "lr", "beta1", "beta2", "epsilon"}, "optimizer config");
    if (o.contains("type")) cfg.optimizer.type = optimizer_type_from_string(o.at("type").get<std::string>());
    if (o.contains("lr")) cfg.optimizer.lr = o.at("lr").get<double>();
    if (o.contains("beta1")) cfg.optimizer.beta1 = o.at("beta1").get<double>();
    if (o.contains("beta2")) cfg.optimizer.beta2 = o.at("beta2").get<double>();
    if (o.contains("epsilon")) cfg.optimizer.epsilon = o.at("epsilon").get<double>();
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_json_keys(t, {"epochs", "batch", "patience", "lr_window", "lr_factor"}, "train config");
    if (t.contains("epochs")) cfg.train_epochs = t.at("epochs").get<int>();
    if (t.contains("batch")) cfg.train_batch = t.at("batch").get<Index>();
    if (t.contains("patience")) cfg.patience = t.at("patience").get<int>();
    if (t.contains("lr_window")) cfg.lr_window = t.at("lr_window").get<int>();
    if (t.contains("lr_factor")) cfg.lr_factor = t.at("lr_factor").get<double>();
  }

  if (j.contains("federated")) {
    const auto& f = j.at("federated");
    check_json_keys(f, {"clients", "fraction", "local_epochs", "local_steps", "lr", "method", "rounds", "batch",
                        "aggregation", "partition", "shards_per_client"},
                    "federated config");
    auto& fc = cfg.federated;
    if (f.contains("clients")) fc.clients = f.at("clients").get<int>();
    if (f.contains("fraction")) fc.fraction = f.at("fraction").get<double>();
    if (f.contains("local_epochs")) fc.local_epochs = f.at("local_epochs").get<int>();
    if (f.contains("local_steps")) fc.local_steps = f.at("local_steps").get<Index>();
    if (f.contains("lr")) fc.lr = f.at("lr").get<double>();
    if (f.contains("method")) fc.method = local_method_from_string(f.at("method").get<std::string>());
    if (f.contains("rounds")) fc.rounds = f.at("rounds").get<int>();
    if (f.contains("batch")) fc.batch_size = f.at("batch").get<Index>();
    if (f.contains("aggregation")) {
      const std::string a = f.at("aggregation").get<std::string>();
      if (a == "model")
        fc.aggregation = AggregationRule::model_average;
      else if (a == "delta")
        fc.aggregation = AggregationRule::delta_average;
      else
        throw Error(ErrorKind::config, "federated.aggregation must be model or delta");
    }
    if (f.contains("partition")) {
      const std::string p = f.at("partition").get<std::string>();
      if (p == "iid")
        fc.partition = PartitionScheme::iid;
      else if (p == "label_skew")
        fc.partition = PartitionScheme::label_skew;
      else
        throw Error(ErrorKind::config, "federated.partition must be iid or label_skew");
    }
    if (f.contains("shards_per_client")) fc.shards_per_client = f.at("shards_per_client").get<int>();
  }

  if (j.contains("analyze")) {
    const auto& a = j.at("analyze");
    check_json_keys(a, {"eigenvalues"}, "analyze config");
    if (a.contains("eigenvalues")) cfg.analyze_eigenvalues = a.at("eigenvalues").get<int>();
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_json_keys(e, {"checkpoint", "split"}, "eval config");
    if (e.contains("checkpoint")) cfg.eval_checkpoint = e.at("checkpoint").get<std::string>();
    if (e.contains("split")) {
      cfg.eval_split = e.at("split").get<std::string>();
      require(cfg.eval_split == "train" || cfg.eval_split == "val" || cfg.eval_split == "test",
              ErrorKind::config, "eval.split must be train, val or test");
    }
  }
  return cfg;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["precision"] = cfg.precision;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out;
  j["threads"] = cfg.threads;
  j["model"] = model_to_json(cfg.model);
  const auto& s = cfg.data.synthetic;
  j["data"] = {{"source", cfg.data.source == DataConfig::Source::synthetic ? "synthetic" : "manifest"},
               {"manifest", cfg.data.manifest_path},
               {"cache", cfg.data.cache_dir},
               {"synthetic",
                {{"samples", s.num_samples},
                 {"height", s.height},
                 {"width", s.width},
                 {"classes", s.num_classes},
                 {"noise", s.noise},
                 {"blob_sigma", s.blob_sigma},
                 {"blob_amplitude", s.blob_amplitude},
                 {"seed", s.seed}}},
               {"splits", cfg.data.splits}};
  j["optimizer"] = {{"type", to_string(cfg.optimizer.type)},
                    {"lr", cfg.optimizer.lr},
                    {"beta1", cfg.optimizer.beta1},
                    {"beta2", cfg.optimizer.beta2},
                    {"epsilon", cfg.optimizer.epsilon}};
  j["train"] = {{"epochs", cfg.train_epochs},
                {"batch", cfg.train_batch},
                {"patience", cfg.patience},
                {"lr_window", cfg.lr_window},
                {"lr_factor", cfg.lr_factor}};
  const auto& f = cfg.federated;
  j["federated"] = {{"clients", f.clients},
                    {"fraction", f.fraction},
                    {"local_epochs", f.local_epochs},
                    {"local_steps", f.local_steps},
                    {"lr", f.lr},
                    {"method", f.method == LocalMethod::sgd ? "sgd" : "svrg"},
                    {"rounds", f.rounds},
                    {"batch", f.batch_size},
                    {"aggregation", f.aggregation == AggregationRule::model_average ? "model" : "delta"},
                    {"partition", f.partition == PartitionScheme::iid ? "iid" : "label_skew"},
                    {"shards_per_client", f.shards_per_client}};
  j["analyze"] = {{"eigenvalues", cfg.analyze_eigenvalues}};
  j["eval"] = {{"checkpoint", cfg.eval_checkpoint}, {"split", cfg.eval_split}};
  return j;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::config, "cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("malformed config JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace medix
