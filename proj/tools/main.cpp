// medix command-line interface: batch experiments over the efficient-CNN
// classifier and its federated training protocol. One run per process; every
// output lands in the --out directory next to a serialized copy of the
// effective configuration.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "medix/analysis.hpp"
#include "medix/data.hpp"
#include "medix/federated.hpp"
#include "medix/harness.hpp"
#include "medix/models.hpp"
#include "medix/runconfig.hpp"

namespace fs = std::filesystem;
using namespace medix;

namespace {

template <typename Scalar>
struct LoadedData {
  Dataset<Scalar> data;
  SplitIndices splits;
};

template <typename Scalar>
LoadedData<Scalar> load_data(const RunConfig& cfg) {
  LoadedData<Scalar> out;
  if (cfg.data.source == DataConfig::Source::synthetic) {
    out.data = generate_synthetic<Scalar>(cfg.data.synthetic);
    out.splits = split_stratified(out.data.labels, cfg.data.splits, Rng(cfg.seed).stream_seed("split"));
  } else {
    require(!cfg.data.manifest_path.empty(), ErrorKind::config, "data.manifest is required for manifest source");
    auto records = load_manifest(cfg.data.manifest_path);
    auto [data, splits] = load_dataset<Scalar>(records, cfg.model.backbone.input_h, cfg.model.backbone.input_w,
                                               cfg.data.cache_dir);
    out.data = std::move(data);
    out.splits = std::move(splits);
  }
  return out;
}

void check_classes(const RunConfig& cfg, Index data_classes) {
  require(cfg.model.num_classes == data_classes, ErrorKind::config,
          "model.classes = " + std::to_string(cfg.model.num_classes) + " but the dataset has " +
              std::to_string(data_classes) + " classes");
}

void write_config_copy(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  std::ofstream f(fs::path(cfg.out) / "config.json");
  require(static_cast<bool>(f), ErrorKind::data, "cannot write config copy in " + cfg.out);
  f << run_config_to_json(cfg).dump(2) << "\n";
}

void write_metrics_json(const std::string& path, const MetricsReport& report) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::data, "cannot write metrics: " + path);
  f << metrics_to_json(report).dump(2) << "\n";
}

std::span<const Index> split_by_name(const SplitIndices& splits, const std::string& name) {
  if (name == "train") return splits.train;
  if (name == "val") return splits.val;
  return splits.test;
}

template <typename Scalar>
int cmd_train(const RunConfig& cfg) {
  write_config_copy(cfg);
  auto loaded = load_data<Scalar>(cfg);
  check_classes(cfg, loaded.data.num_classes);
  const ModelGraph graph = cfg.model.build();
  auto w0 = init_params<Scalar>(graph, Rng(cfg.seed).stream_seed("init"));

  auto result = train(graph, loaded.data, loaded.splits.train, loaded.splits.val, std::move(w0),
                      cfg.train_config());
  write_history_csv((fs::path(cfg.out) / "history.csv").string(), result.history);
  save_checkpoint((fs::path(cfg.out) / "checkpoint").string(), result.best);

  const auto eval_idx = loaded.splits.test.empty() ? std::span<const Index>(loaded.splits.val)
                                                   : std::span<const Index>(loaded.splits.test);
  const MetricsReport report = evaluate(graph, result.best, loaded.data, eval_idx);
  write_metrics_json((fs::path(cfg.out) / "metrics.json").string(), report);

  std::cout << "best epoch " << result.best_epoch << " val_accuracy " << result.best_val_accuracy
            << " test_accuracy " << report.accuracy << "\n";
  return 0;
}

template <typename Scalar>
int cmd_federated(const RunConfig& cfg) {
  write_config_copy(cfg);
  auto loaded = load_data<Scalar>(cfg);
  check_classes(cfg, loaded.data.num_classes);
  const ModelGraph graph = cfg.model.build();
  auto w0 = init_params<Scalar>(graph, Rng(cfg.seed).stream_seed("init"));

  FederatedConfig fc = cfg.federated;
  fc.seed = cfg.seed;
  auto result = run_federated(graph, loaded.data, loaded.splits.train, loaded.splits.val, std::move(w0), fc);
  write_rounds_csv((fs::path(cfg.out) / "rounds.csv").string(), result.history);
  save_checkpoint((fs::path(cfg.out) / "checkpoint").string(), result.weights);

  const auto eval_idx = loaded.splits.test.empty() ? std::span<const Index>(loaded.splits.val)
                                                   : std::span<const Index>(loaded.splits.test);
  const MetricsReport report = evaluate(graph, result.weights, loaded.data, eval_idx);
  write_metrics_json((fs::path(cfg.out) / "metrics.json").string(), report);

  std::cout << "rounds " << result.history.size() << " test_accuracy " << report.accuracy << "\n";
  return 0;
}

template <typename Scalar>
int cmd_ablation(const RunConfig& cfg) {
  write_config_copy(cfg);
  auto loaded = load_data<Scalar>(cfg);
  check_classes(cfg, loaded.data.num_classes);

  std::ofstream csv(fs::path(cfg.out) / "ablation.csv");
  require(static_cast<bool>(csv), ErrorKind::data, "cannot write ablation.csv");
  csv << "variant,precision,recall,f1,roc_auc,accuracy\n";
  csv.precision(10);

  for (Variant variant : all_variants()) {
    ModelConfig mc = cfg.model;
    mc.variant = variant;
    mc.hidden_override.reset();  // variants define their own widths
    const ModelGraph graph = mc.build();
    auto w0 = init_params<Scalar>(graph, Rng(cfg.seed).stream_seed("init"));
    auto result = train(graph, loaded.data, loaded.splits.train, loaded.splits.val, std::move(w0),
                        cfg.train_config());
    const auto eval_idx = loaded.splits.test.empty() ? std::span<const Index>(loaded.splits.val)
                                                     : std::span<const Index>(loaded.splits.test);
    const MetricsReport m = evaluate(graph, result.best, loaded.data, eval_idx);
    csv << to_string(variant) << "," << m.precision << "," << m.recall << "," << m.f1 << "," << m.roc_auc << ","
        << m.accuracy << "\n";
    std::cout << to_string(variant) << " accuracy " << m.accuracy << " params " << count_params(graph) << "\n";
  }
  return 0;
}

template <typename Scalar>
int cmd_flops(const RunConfig& cfg) {
  write_config_copy(cfg);
  const ModelGraph graph = cfg.model.build();
  const CostReport report = count_flops(graph);
  write_cost_csv((fs::path(cfg.out) / "cost.csv").string(), report);
  print_cost_table(std::cout, report);
  return 0;
}

template <typename Scalar>
int cmd_analyze(const RunConfig& cfg) {
  write_config_copy(cfg);
  const ModelGraph graph = cfg.model.build();
  const Index n = shape_size(graph.input_shape);
  require(n <= 4096, ErrorKind::config,
          "pullback metric is a dense n x n matrix; configure an input with at most 4096 values (got " +
              std::to_string(n) + ")");
  auto params = init_params<Scalar>(graph, Rng(cfg.seed).stream_seed("init"));
  Tensor<Scalar> x(graph.input_shape);
  Rng rng = Rng(cfg.seed).split("probe-point");
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<Scalar>(rng.uniform());

  const auto pm = pullback_metric(graph, params, x);
  const auto spectrum = top_eigenvalues(pm.metric, cfg.analyze_eigenvalues);
  std::ofstream f(fs::path(cfg.out) / "metric_spectra.json");
  require(static_cast<bool>(f), ErrorKind::data, "cannot write metric_spectra.json");
  f << spectrum_to_json(spectrum, n).dump(2) << "\n";

  std::cout << "top eigenvalues:";
  for (auto v : spectrum) std::cout << " " << v;
  std::cout << "\n";
  return 0;
}

template <typename Scalar>
int cmd_gendata(const RunConfig& cfg) {
  write_config_copy(cfg);
  const Dataset<Scalar> data = generate_synthetic<Scalar>(cfg.data.synthetic);
  const SplitIndices splits = split_stratified(data.labels, cfg.data.splits, Rng(cfg.seed).stream_seed("split"));
  std::vector<std::string> split_of(static_cast<std::size_t>(data.size()), "train");
  for (Index i : splits.val) split_of[static_cast<std::size_t>(i)] = "val";
  for (Index i : splits.test) split_of[static_cast<std::size_t>(i)] = "test";

  std::vector<ManifestRecord> records;
  const Index plane = data.height() * data.width();
  for (Index i = 0; i < data.size(); ++i) {
    Tensor<Scalar> gray({data.height(), data.width(), 1});
    for (Index p = 0; p < plane; ++p)
      gray[p] = data.images[(i * plane + p) * data.channels()] * Scalar(255);
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05lld.pgm", static_cast<long long>(i));
    write_image((fs::path(cfg.out) / name).string(), gray);
    records.push_back(
        ManifestRecord{name, data.labels[static_cast<std::size_t>(i)], split_of[static_cast<std::size_t>(i)]});
  }
  write_manifest((fs::path(cfg.out) / "manifest.csv").string(), records);
  std::cout << "wrote " << data.size() << " images + manifest.csv to " << cfg.out << "\n";
  return 0;
}

template <typename Scalar>
int cmd_eval(const RunConfig& cfg) {
  require(!cfg.eval_checkpoint.empty(), ErrorKind::config, "eval.checkpoint is required");
  write_config_copy(cfg);
  auto loaded = load_data<Scalar>(cfg);
  check_classes(cfg, loaded.data.num_classes);
  const ModelGraph graph = cfg.model.build();
  auto params = load_checkpoint<Scalar>(cfg.eval_checkpoint);

  const auto idx = split_by_name(loaded.splits, cfg.eval_split);
  require(!idx.empty(), ErrorKind::data, "eval split `" + cfg.eval_split + "` is empty");
  const MetricsReport report = evaluate(graph, params, loaded.data, idx);
  write_metrics_json((fs::path(cfg.out) / "metrics.json").string(), report);
  std::cout << cfg.eval_split << "_accuracy " << report.accuracy << "\n";
  return 0;
}

template <typename Scalar>
int dispatch(const std::string& cmd, const RunConfig& cfg) {
  if (cmd == "train") return cmd_train<Scalar>(cfg);
  if (cmd == "federated") return cmd_federated<Scalar>(cfg);
  if (cmd == "ablation") return cmd_ablation<Scalar>(cfg);
  if (cmd == "flops") return cmd_flops<Scalar>(cfg);
  if (cmd == "analyze") return cmd_analyze<Scalar>(cfg);
  if (cmd == "gendata") return cmd_gendata<Scalar>(cfg);
  if (cmd == "eval") return cmd_eval<Scalar>(cfg);
  throw Error(ErrorKind::config, "unknown command: " + cmd);
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::shape:
      return 1;
    case ErrorKind::data:
      return 2;
    case ErrorKind::numeric:
      return 3;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"medix: efficient medical-image CNN with a federated-averaging trainer"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path, out_flag, precision_flag;
  std::uint64_t seed_flag = 0;
  int threads_flag = 0;
  app.add_option("--config", config_path, "run configuration (JSON)");
  app.add_option("--seed", seed_flag, "override config seed");
  app.add_option("--out", out_flag, "override output directory");
  app.add_option("--threads", threads_flag, "worker threads (1 = guaranteed serial path)");
  app.add_option("--precision", precision_flag, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  for (const char* name : {"train", "federated", "ablation", "flops", "analyze", "gendata", "eval"})
    app.add_subcommand(name);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    // Precedence: flags beat the config file; MEDIX_OUT beats the file but not --out.
    if (const char* env_out = std::getenv("MEDIX_OUT"); env_out && *env_out) cfg.out = env_out;
    if (!out_flag.empty()) cfg.out = out_flag;
    if (app.count("--seed")) cfg.seed = seed_flag;
    if (app.count("--threads")) {
      require(threads_flag >= 1, ErrorKind::config, "--threads must be >= 1");
      cfg.threads = threads_flag;
    }
    if (!precision_flag.empty()) cfg.precision = precision_flag;
    set_num_threads(cfg.threads);

    const std::string cmd = app.get_subcommands().front()->get_name();
    return cfg.precision == "f64" ? dispatch<double>(cmd, cfg) : dispatch<float>(cmd, cfg);
  } catch (const Error& e) {
    std::cerr << "[" << Error::kind_name(e.kind()) << "] " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "[internal] " << e.what() << "\n";
    return 1;
  }
}
