#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "medix/common.hpp"
#include "medix/tensor.hpp"

namespace medix {

/// Ordered map from parameter-slot name to tensor; the unit of optimizer
/// updates and of federated exchange. Iteration order is insertion order
/// (graph construction order), which fixes every accumulation order downstream.
template <typename Scalar>
class ParamSet {
 public:
  struct Slot {
    std::string name;
    Tensor<Scalar> value;
    bool trainable = true;
  };

  void add(std::string name, Tensor<Scalar> value, bool trainable = true) {
    require(!index_.count(name), ErrorKind::config, "duplicate parameter slot: " + name);
    index_[name] = slots_.size();
    slots_.push_back(Slot{std::move(name), std::move(value), trainable});
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<Scalar>& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::config, "unknown parameter slot: " + name);
    return slots_[it->second].value;
  }
  const Tensor<Scalar>& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::config, "unknown parameter slot: " + name);
    return slots_[it->second].value;
  }

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }

  Index total_values() const {
    Index n = 0;
    for (const auto& s : slots_) n += s.value.size();
    return n;
  }

  /// Same slots, zero-filled values. With trainable_only, non-trainable slots
  /// (batch-norm running statistics) are omitted, which is what makes update
  /// rules leave them untouched.
  ParamSet zeros_like(bool trainable_only = false) const {
    ParamSet z;
    for (const auto& s : slots_)
      if (!trainable_only || s.trainable) z.add(s.name, Tensor<Scalar>::zeros(s.value.shape()), s.trainable);
    return z;
  }

  template <typename T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (const auto& s : slots_) out.add(s.name, s.value.template cast<T>(), s.trainable);
    return out;
  }

  /// Overwrites the named slots from `other` (shapes must match).
  void assign_from(const ParamSet& other) {
    for (const auto& s : other.slots_) {
      auto& dst = at(s.name);
      require(dst.same_shape(s.value), ErrorKind::shape, "slot shape mismatch on assign: " + s.name);
      dst = s.value;
    }
  }

  /// Largest absolute componentwise difference over shared slots.
  static double max_abs_diff(const ParamSet& a, const ParamSet& b) {
    double worst = 0.0;
    for (const auto& s : a.slots_) {
      if (!b.has(s.name)) continue;
      const auto& o = b.at(s.name);
      require(o.same_shape(s.value), ErrorKind::shape, "slot shape mismatch: " + s.name);
      if (s.value.size() == 0) continue;
      const double d = (s.value.array().template cast<double>() - o.array().template cast<double>()).abs().maxCoeff();
      if (d > worst) worst = d;
    }
    return worst;
  }

 private:
  std::vector<Slot> slots_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoint directory: one DMTX file per slot plus a JSON manifest mapping
// slot name -> {file, shape, dtype, trainable}.
// ---------------------------------------------------------------------------

template <typename Scalar>
void save_checkpoint(const std::string& dir, const ParamSet<Scalar>& params) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "medix-checkpoint";
  manifest["version"] = 1;
  auto& slots = manifest["slots"];
  slots = nlohmann::json::array();
  int file_id = 0;
  for (const auto& s : params.slots()) {
    char name[32];
    std::snprintf(name, sizeof(name), "slot_%04d.dmtx", file_id++);
    write_dmtx((fs::path(dir) / name).string(), s.value);
    nlohmann::json entry;
    entry["name"] = s.name;
    entry["file"] = name;
    entry["shape"] = s.value.shape();
    entry["dtype"] = std::is_same_v<Scalar, float> ? "f32" : "f64";
    entry["trainable"] = s.trainable;
    slots.push_back(entry);
  }
  std::ofstream f(fs::path(dir) / "manifest.json");
  require(static_cast<bool>(f), ErrorKind::data, "cannot write checkpoint manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

template <typename Scalar>
ParamSet<Scalar> load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream f(fs::path(dir) / "manifest.json");
  require(static_cast<bool>(f), ErrorKind::data, "missing checkpoint manifest in " + dir);
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, std::string("malformed checkpoint manifest: ") + e.what());
  }
  require(manifest.value("format", "") == "medix-checkpoint", ErrorKind::data, "not a checkpoint manifest");
  ParamSet<Scalar> params;
  for (const auto& entry : manifest.at("slots")) {
    auto t = read_dmtx<Scalar>((fs::path(dir) / entry.at("file").get<std::string>()).string());
    Shape expect = entry.at("shape").get<Shape>();
    require(t.shape() == expect, ErrorKind::data, "checkpoint shape mismatch for " + entry.at("name").get<std::string>());
    params.add(entry.at("name").get<std::string>(), std::move(t), entry.value("trainable", true));
  }
  return params;
}

/// Import hook for externally trained weights. Only our own checkpoint layout
/// is understood; converting foreign formats has to happen out of band.
template <typename Scalar>
ParamSet<Scalar> import_pretrained(const std::string& dir) {
  return load_checkpoint<Scalar>(dir);
}

}  // namespace medix
