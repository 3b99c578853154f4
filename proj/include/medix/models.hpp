#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medix/graph.hpp"

// MobileNetV2-family backbone plus the two-branch classification head and its
// ablation variants. The backbone follows the published block table (inverted
// residuals with linear bottlenecks), parameterized by width multiplier and
// input size so that tiny desk-scale configurations exist.

namespace medix {

struct BlockRow {
  int expansion = 6;
  int channels = 0;
  int repeats = 1;
  int stride = 1;
};

inline std::vector<BlockRow> mobilenet_v2_table() {
  return {
      {1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
      {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1},
  };
}

/// Width-scaled channel count: nearest integer, floor of 8.
inline Index scaled_channels(Index channels, double width) {
  return std::max<Index>(8, static_cast<Index>(std::llround(static_cast<double>(channels) * width)));
}

struct BackboneSpec {
  double width = 1.0;
  Index input_h = 224;
  Index input_w = 224;
  std::vector<BlockRow> table = mobilenet_v2_table();
  Index stem_channels = 32;
  Index last_channels = 1280;

  /// Feature width after the final 1x1 conv, scaled like every other stage.
  Index feature_dim() const { return scaled_channels(last_channels, width); }

  void validate() const {
    require(width > 0, ErrorKind::config, "width multiplier must be positive");
    require(input_h >= 1 && input_w >= 1, ErrorKind::config, "input size must be positive");
    require(!table.empty(), ErrorKind::config, "backbone table is empty");
    for (const auto& row : table) {
      require(row.expansion >= 1, ErrorKind::config, "block expansion factor must be >= 1");
      require(row.channels >= 1 && row.repeats >= 1, ErrorKind::config, "bad backbone table row");
      require(row.stride == 1 || row.stride == 2, ErrorKind::config, "block stride must be 1 or 2");
    }
  }
};

struct InvertedResidualSpec {
  Index in_channels = 0;
  Index out_channels = 0;
  int expansion = 6;
  int stride = 1;

  bool has_skip() const { return stride == 1 && in_channels == out_channels; }
};

struct HeadSpec {
  Index feature_dim = 1280;  // standalone head builds only; compositions take it from the backbone
  Index num_classes = 4;
  double drop_rate = 0.4;
  std::array<Index, 3> hidden = {64, 32, 16};
  bool skip_connection = true;
  bool dropout_modules = true;  // false removes every dropout AND batch-norm node
  bool pool_max = false;        // global max pooling instead of average

  void validate() const {
    require(feature_dim >= 1, ErrorKind::config, "head feature dim must be >= 1");
    require(num_classes >= 2, ErrorKind::config, "head needs k >= 2 classes");
    require(drop_rate >= 0.0 && drop_rate < 1.0, ErrorKind::config, "head drop rate must be in [0,1)");
    for (Index h : hidden) require(h >= 1, ErrorKind::config, "head hidden sizes must be positive");
  }
};

enum class Variant {
  deepmedix,
  model1,  // global max pooling
  model2,  // no skip connection
  model3,  // no dropout modules (dropout + batch norm removed)
  model4,  // no skip connection, no dropout modules
  model5,  // every hidden dense widened to 256
  model6,  // model5 without the skip connection
  model7,  // model5 without the dropout modules
  model8,  // model5 without either
};

inline const std::array<Variant, 9>& all_variants() {
  static const std::array<Variant, 9> v = {Variant::deepmedix, Variant::model1, Variant::model2, Variant::model3,
                                           Variant::model4,    Variant::model5, Variant::model6, Variant::model7,
                                           Variant::model8};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::deepmedix: return "deepmedix";
    case Variant::model1: return "model1";
    case Variant::model2: return "model2";
    case Variant::model3: return "model3";
    case Variant::model4: return "model4";
    case Variant::model5: return "model5";
    case Variant::model6: return "model6";
    case Variant::model7: return "model7";
    case Variant::model8: return "model8";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw Error(ErrorKind::config, "unknown model variant: " + s);
}

inline HeadSpec head_for_variant(Variant v, Index num_classes) {
  HeadSpec h;
  h.num_classes = num_classes;
  switch (v) {
    case Variant::deepmedix: break;
    case Variant::model1: h.pool_max = true; break;
    case Variant::model2: h.skip_connection = false; break;
    case Variant::model3: h.dropout_modules = false; break;
    case Variant::model4: h.skip_connection = false; h.dropout_modules = false; break;
    case Variant::model5: h.hidden = {256, 256, 256}; break;
    case Variant::model6: h.hidden = {256, 256, 256}; h.skip_connection = false; break;
    case Variant::model7: h.hidden = {256, 256, 256}; h.dropout_modules = false; break;
    case Variant::model8:
      h.hidden = {256, 256, 256};
      h.skip_connection = false;
      h.dropout_modules = false;
      break;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace detail {

inline int append_inverted_residual(GraphBuilder& b, int x, const InvertedResidualSpec& spec,
                                    const std::string& name) {
  int y = x;
  if (spec.expansion != 1) {
    y = b.conv(name + "/expand/conv", y, 1, 1, Padding::same, spec.in_channels * spec.expansion);
    y = b.batch_norm(name + "/expand/bn", y);
    y = b.relu(name + "/expand/relu", y);
  }
  y = b.depthwise_conv(name + "/dw/conv", y, 3, spec.stride, Padding::same);
  y = b.batch_norm(name + "/dw/bn", y);
  y = b.relu(name + "/dw/relu", y);
  // Linear bottleneck: the projection has no activation after it.
  y = b.conv(name + "/project/conv", y, 1, 1, Padding::same, spec.out_channels);
  y = b.batch_norm(name + "/project/bn", y);
  if (spec.has_skip()) y = b.add(name + "/residual", x, y);
  return y;
}

inline int append_backbone(GraphBuilder& b, int x, const BackboneSpec& spec) {
  spec.validate();
  x = b.conv("backbone/stem/conv", x, 3, 2, Padding::same, scaled_channels(spec.stem_channels, spec.width));
  x = b.batch_norm("backbone/stem/bn", x);
  x = b.relu("backbone/stem/relu", x);

  int block_id = 0;
  for (const auto& row : spec.table) {
    const Index out_channels = scaled_channels(row.channels, spec.width);
    for (int r = 0; r < row.repeats; ++r) {
      InvertedResidualSpec ir;
      ir.in_channels = b.shape_of(x).back();
      ir.out_channels = out_channels;
      ir.expansion = row.expansion;
      ir.stride = r == 0 ? row.stride : 1;
      char name[48];
      std::snprintf(name, sizeof(name), "backbone/block%02d", block_id++);
      x = append_inverted_residual(b, x, ir, name);
    }
  }

  x = b.conv("backbone/features/conv", x, 1, 1, Padding::same, spec.feature_dim());
  x = b.batch_norm("backbone/features/bn", x);
  x = b.relu("backbone/features/relu", x);
  return x;
}

inline int append_head(GraphBuilder& b, int feature, const HeadSpec& spec) {
  spec.validate();
  auto drop = [&](const std::string& name, int x) {
    return spec.dropout_modules ? b.dropout(name, x, spec.drop_rate) : x;
  };
  auto norm = [&](const std::string& name, int x) { return spec.dropout_modules ? b.batch_norm(name, x) : x; };

  int x = drop("head/drop1", feature);
  x = spec.pool_max ? b.global_max_pool("head/pool", x) : b.global_avg_pool("head/pool", x);
  const int flat = b.flatten("head/flatten", x);

  x = drop("head/drop2", flat);
  x = b.dense("head/dense1", x, spec.hidden[0]);
  x = b.relu("head/relu1", x);
  x = norm("head/bn1", x);
  x = drop("head/drop3", x);
  x = b.dense("head/dense2", x, spec.hidden[1]);
  x = b.relu("head/relu2", x);
  x = norm("head/bn2", x);

  // Parallel path straight from the flatten output, joined by concatenation.
  if (spec.skip_connection) x = b.concat("head/concat", flat, x);

  x = drop("head/drop4", x);
  x = b.dense("head/dense3", x, spec.hidden[2]);
  x = b.relu("head/relu3", x);
  x = norm("head/bn3", x);
  x = drop("head/drop5", x);
  x = b.dense("head/dense4", x, spec.num_classes);
  return b.softmax("head/softmax", x);
}

}  // namespace detail

inline ModelGraph build_backbone(const BackboneSpec& spec) {
  GraphBuilder b;
  const int in = b.input({spec.input_h, spec.input_w, 3});
  return b.finish(detail::append_backbone(b, in, spec));
}

/// Standalone head over an [h, w, feature_dim] map.
inline ModelGraph build_head(const HeadSpec& spec, Index h = 7, Index w = 7) {
  GraphBuilder b;
  const int in = b.input({h, w, spec.feature_dim});
  return b.finish(detail::append_head(b, in, spec));
}

inline ModelGraph build_variant(Variant variant, const BackboneSpec& backbone, Index num_classes) {
  GraphBuilder b;
  const int in = b.input({backbone.input_h, backbone.input_w, 3});
  const int feature = detail::append_backbone(b, in, backbone);
  HeadSpec head = head_for_variant(variant, num_classes);
  head.feature_dim = b.shape_of(feature).back();
  return b.finish(detail::append_head(b, feature, head));
}

// ---------------------------------------------------------------------------
// Architecture description (JSON)
// ---------------------------------------------------------------------------

struct ModelConfig {
  Variant variant = Variant::deepmedix;
  BackboneSpec backbone;
  Index num_classes = 4;
  // Optional overrides applied on top of the variant's head.
  std::optional<std::array<Index, 3>> hidden_override;
  std::optional<double> drop_rate_override;

  HeadSpec head() const {
    HeadSpec h = head_for_variant(variant, num_classes);
    if (hidden_override) h.hidden = *hidden_override;
    if (drop_rate_override) h.drop_rate = *drop_rate_override;
    h.feature_dim = backbone.feature_dim();
    return h;
  }

  ModelGraph build() const {
    GraphBuilder b;
    const int in = b.input({backbone.input_h, backbone.input_w, 3});
    const int feature = detail::append_backbone(b, in, backbone);
    HeadSpec h = head();
    h.feature_dim = b.shape_of(feature).back();
    return b.finish(detail::append_head(b, feature, h));
  }
};

inline void check_json_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                            const std::string& context) {
  require(obj.is_object(), ErrorKind::config, context + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    require(ok, ErrorKind::config, "unknown key \"" + it.key() + "\" in " + context);
  }
}

inline nlohmann::json model_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["variant"] = to_string(cfg.variant);
  j["width"] = cfg.backbone.width;
  j["input"] = {cfg.backbone.input_h, cfg.backbone.input_w};
  j["classes"] = cfg.num_classes;
  auto table = nlohmann::json::array();
  for (const auto& row : cfg.backbone.table)
    table.push_back({row.expansion, row.channels, row.repeats, row.stride});
  j["backbone"] = {{"stem", cfg.backbone.stem_channels},
                   {"last", cfg.backbone.last_channels},
                   {"table", table}};
  const HeadSpec h = cfg.head();
  j["head"] = {{"hidden", h.hidden}, {"drop_rate", h.drop_rate}};
  return j;
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  check_json_keys(j, {"variant", "width", "input", "classes", "backbone", "head"}, "model config");
  ModelConfig cfg;
  if (j.contains("variant")) cfg.variant = variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("width")) cfg.backbone.width = j.at("width").get<double>();
  if (j.contains("input")) {
    const auto in = j.at("input");
    require(in.is_array() && in.size() == 2, ErrorKind::config, "model.input must be [H, W]");
    cfg.backbone.input_h = in[0].get<Index>();
    cfg.backbone.input_w = in[1].get<Index>();
  }
  if (j.contains("classes")) cfg.num_classes = j.at("classes").get<Index>();
  if (j.contains("backbone")) {
    const auto& bb = j.at("backbone");
    check_json_keys(bb, {"stem", "last", "table"}, "model.backbone");
    if (bb.contains("stem")) cfg.backbone.stem_channels = bb.at("stem").get<Index>();
    if (bb.contains("last")) cfg.backbone.last_channels = bb.at("last").get<Index>();
    if (bb.contains("table")) {
      cfg.backbone.table.clear();
      for (const auto& row : bb.at("table")) {
        require(row.is_array() && row.size() == 4, ErrorKind::config, "backbone table rows are [t, c, n, s]");
        cfg.backbone.table.push_back(
            BlockRow{row[0].get<int>(), row[1].get<int>(), row[2].get<int>(), row[3].get<int>()});
      }
    }
  }
  if (j.contains("head")) {
    const auto& hd = j.at("head");
    check_json_keys(hd, {"hidden", "drop_rate"}, "model.head");
    if (hd.contains("hidden")) {
      const auto hv = hd.at("hidden");
      require(hv.is_array() && hv.size() == 3, ErrorKind::config, "head.hidden must have 3 sizes");
      cfg.hidden_override = std::array<Index, 3>{hv[0].get<Index>(), hv[1].get<Index>(), hv[2].get<Index>()};
    }
    if (hd.contains("drop_rate")) cfg.drop_rate_override = hd.at("drop_rate").get<double>();
  }
  cfg.backbone.validate();
  return cfg;
}

}  // namespace medix
