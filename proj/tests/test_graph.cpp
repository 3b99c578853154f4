#include <doctest.h>

#include <cmath>

#include "medix/gradcheck.hpp"
#include "medix/models.hpp"

using namespace medix;

namespace {

BackboneSpec micro_backbone() {
  BackboneSpec bb;
  bb.width = 1.0;
  bb.input_h = 16;
  bb.input_w = 16;
  bb.stem_channels = 8;
  bb.last_channels = 32;
  bb.table = {{1, 8, 1, 1}, {6, 16, 2, 2}};
  return bb;
}

template <typename S>
Tensor<S> random_batch(Index b, Index h, Index w, Index c, std::uint64_t seed) {
  Tensor<S> t({b, h, w, c});
  Rng rng(seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.uniform());
  return t;
}

// hand-summed parameter count of the classification head
Index head_param_oracle(Index d, Index k, std::array<Index, 3> hidden, bool skip, bool modules) {
  auto dense_params = [](Index in, Index out) { return in * out + out; };
  Index count = 0;
  count += dense_params(d, hidden[0]);
  count += dense_params(hidden[0], hidden[1]);
  const Index concat_width = skip ? d + hidden[1] : hidden[1];
  count += dense_params(concat_width, hidden[2]);
  count += dense_params(hidden[2], k);
  if (modules) count += 2 * (hidden[0] + hidden[1] + hidden[2]);  // gamma + beta per BN
  return count;
}

}  // namespace

TEST_SUITE("graph") {

TEST_CASE("builder tracks shapes and parameter slots") {
  GraphBuilder b;
  const int in = b.input({4, 4, 3});
  const int c = b.conv("c1", in, 3, 2, Padding::same, 8);
  CHECK(b.shape_of(c) == Shape{2, 2, 8});
  const int p = b.global_avg_pool("pool", c);
  CHECK(b.shape_of(p) == Shape{8});
  const int d = b.dense("fc", p, 5);
  const int s = b.softmax("sm", d);
  ModelGraph g = b.finish(s);
  CHECK(g.nodes.size() == 5);
  CHECK(count_params(g) == 3 * 3 * 3 * 8 + 8 * 5 + 5);
}

TEST_CASE("count_params: dense 2->3 has 9 parameters") {
  GraphBuilder b;
  const int in = b.input({2});
  const int d = b.dense("fc", in, 3);
  ModelGraph g = b.finish(d);
  CHECK(count_params(g) == 9);
}

TEST_CASE("init_params is seed-deterministic") {
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 2);
  auto a = init_params<double>(g, 7);
  auto b = init_params<double>(g, 7);
  auto c = init_params<double>(g, 8);
  CHECK(ParamSet<double>::max_abs_diff(a, b) == 0.0);
  CHECK(ParamSet<double>::max_abs_diff(a, c) > 0.0);

  // He-uniform fills kernels, zeros biases/beta, ones gamma
  CHECK(a.at("head/dense1/bias").array().abs().maxCoeff() == 0.0);
  CHECK(a.at("head/bn1/gamma").array().minCoeff() == 1.0);
  CHECK(a.at("head/dense1/weight").array().abs().maxCoeff() > 0.0);
  CHECK_FALSE(a.slots()[0].name.empty());
}

TEST_CASE("forward rows are probability vectors") {
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 3);
  auto params = init_params<double>(g, 1);
  auto batch = random_batch<double>(4, 16, 16, 3, 2);
  auto ex = forward(g, params, batch, true, 5);
  const auto& probs = ex.output();
  REQUIRE(probs.shape() == Shape{4, 3});
  for (Index r = 0; r < 4; ++r) {
    double sum = 0;
    for (Index c = 0; c < 3; ++c) {
      CHECK(probs(r, c) >= 0.0);
      sum += probs(r, c);
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("zeroed classifier yields uniform rows") {
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 4);
  auto params = init_params<double>(g, 3);
  params.at("head/dense4/weight").array().setZero();
  params.at("head/dense4/bias").array().setZero();
  auto ex = forward(g, params, random_batch<double>(2, 16, 16, 3, 9), false, 0);
  for (Index i = 0; i < ex.output().size(); ++i) CHECK(ex.output()[i] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("eval forward is bit-deterministic") {
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 2);
  auto params = init_params<double>(g, 4);
  auto batch = random_batch<double>(3, 16, 16, 3, 5);
  auto a = forward(g, params, batch, false, 11);
  auto b = forward(g, params, batch, false, 999);  // seed ignored in eval mode
  for (Index i = 0; i < a.output().size(); ++i) CHECK(a.output()[i] == b.output()[i]);
}

TEST_CASE("training forward with one seed reproduces exactly") {
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 2);
  auto params = init_params<double>(g, 4);
  auto batch = random_batch<double>(3, 16, 16, 3, 5);
  auto a = forward(g, params, batch, true, 42);
  auto b = forward(g, params, batch, true, 42);
  for (Index i = 0; i < a.output().size(); ++i) CHECK(a.output()[i] == b.output()[i]);
  auto c = forward(g, params, batch, true, 43);
  bool same = true;
  for (Index i = 0; i < a.output().size(); ++i)
    if (a.output()[i] != c.output()[i]) same = false;
  CHECK_FALSE(same);  // dropout masks moved
}

TEST_CASE("batched eval rows match per-sample forward") {
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 2);
  auto params = init_params<double>(g, 6);
  auto batch = random_batch<double>(4, 16, 16, 3, 7);
  auto full = forward(g, params, batch, false, 0);
  const Index sample = 16 * 16 * 3;
  for (Index i = 0; i < 4; ++i) {
    Tensor<double> one({1, 16, 16, 3});
    std::copy(batch.data() + i * sample, batch.data() + (i + 1) * sample, one.data());
    auto single = forward(g, params, one, false, 0);
    for (Index c = 0; c < 2; ++c)
      CHECK(full.output()(i, c) == doctest::Approx(single.output()(0, c)).epsilon(1e-10));
  }
}

TEST_CASE("backward provides a gradient for every trainable slot") {
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 2);
  auto params = init_params<double>(g, 8);
  auto r = loss_and_gradients(g, params, random_batch<double>(2, 16, 16, 3, 1), {0, 1}, true, 3);
  CHECK(r.loss > 0);
  Index trainable = 0;
  for (const auto& s : params.slots())
    if (s.trainable) ++trainable;
  CHECK(static_cast<Index>(r.ex.param_grads.size()) == trainable);
  for (const auto& s : r.ex.param_grads.slots()) CHECK(s.value.same_shape(params.at(s.name)));
  CHECK_THROWS_AS(loss_and_gradients(g, params, random_batch<double>(1, 16, 16, 3, 1), {5}, true, 3), Error);
}

TEST_CASE("duplicated sample doubles its gradient contribution") {
  // eval-mode backward keeps samples independent (batch norm uses running stats)
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 2);
  auto params = init_params<double>(g, 9);
  auto x1 = random_batch<double>(1, 16, 16, 3, 21);
  auto x2 = random_batch<double>(1, 16, 16, 3, 22);

  auto g1 = loss_and_gradients(g, params, x1, {0}, false, 0).ex.param_grads;
  auto g2 = loss_and_gradients(g, params, x2, {1}, false, 0).ex.param_grads;

  Tensor<double> both({2, 16, 16, 3});
  std::copy(x1.data(), x1.data() + x1.size(), both.data());
  std::copy(x2.data(), x2.data() + x2.size(), both.data() + x1.size());
  auto gb = loss_and_gradients(g, params, both, {0, 1}, false, 0).ex.param_grads;

  const std::string slot = "head/dense4/weight";
  const auto expect = (g1.at(slot).array() + g2.at(slot).array()) / 2.0;
  CHECK((gb.at(slot).array() - expect).abs().maxCoeff() < 1e-12);
}

TEST_CASE("saturated correct prediction has near-zero classifier gradient") {
  const ModelGraph g = build_variant(Variant::deepmedix, micro_backbone(), 2);
  auto params = init_params<double>(g, 10);
  params.at("head/dense4/weight").array().setZero();
  params.at("head/dense4/bias") = Tensor<double>::from({2}, {100.0, 0.0});
  auto r = loss_and_gradients(g, params, random_batch<double>(2, 16, 16, 3, 2), {0, 0}, false, 0);
  CHECK(r.loss < 1e-6);
  CHECK(r.ex.param_grads.at("head/dense4/weight").array().abs().maxCoeff() < 1e-6);
  CHECK(r.ex.param_grads.at("head/dense4/bias").array().abs().maxCoeff() < 1e-6);
}

TEST_CASE("backbone: standard table at width 1.0 ends in 7x7x1280") {
  BackboneSpec bb;  // defaults: width 1.0, 224x224
  const ModelGraph g = build_backbone(bb);
  const auto shapes = infer_shapes(g);
  CHECK(shapes[static_cast<std::size_t>(g.output)] == Shape{7, 7, 1280});
}

TEST_CASE("backbone: residual adds appear iff stride 1 and matching width") {
  BackboneSpec bb;
  const ModelGraph g = build_backbone(bb);
  // standard table: repeats (1,2,3,4,3,3,1) contribute (n-1) skips per row
  const auto census = node_census(g);
  CHECK(census.at(NodeKind::add) == 1 + 2 + 3 + 2 + 2 + 0);

  // a forward check on a single block: stride 1, in == out -> y = block(x) + x
  GraphBuilder b;
  const int in = b.input({4, 4, 8});
  InvertedResidualSpec ir;
  ir.in_channels = 8;
  ir.out_channels = 8;
  ir.expansion = 6;
  ir.stride = 1;
  CHECK(ir.has_skip());
  const int block = detail::append_inverted_residual(b, in, ir, "blk");
  ModelGraph bg = b.finish(block);
  CHECK(bg.node(bg.output).kind == NodeKind::add);
}

TEST_CASE("backbone: expansion layer produces t*M channels, projection is linear") {
  BackboneSpec bb = micro_backbone();
  const ModelGraph g = build_backbone(bb);
  const auto shapes = infer_shapes(g);
  const int expand = g.find("backbone/block01/expand/conv");
  REQUIRE(expand >= 0);
  CHECK(shapes[static_cast<std::size_t>(expand)].back() == 6 * 8);
  // projection conv -> bn, and no relu between projection bn and the next block
  const int proj_bn = g.find("backbone/block01/project/bn");
  REQUIRE(proj_bn >= 0);
  for (const auto& n : g.nodes)
    if (n.kind == NodeKind::relu)
      CHECK_FALSE((n.in[0] == proj_bn));
}

TEST_CASE("channel scaling rounds to the nearest width with a floor of 8") {
  CHECK(scaled_channels(32, 1.0) == 32);
  CHECK(scaled_channels(24, 0.25) == 8);   // 6 -> floor
  CHECK(scaled_channels(64, 0.25) == 16);
  CHECK(scaled_channels(96, 0.25) == 24);
  CHECK(scaled_channels(24, 0.5) == 12);   // plain rounding, no divisibility constraint
  CHECK(scaled_channels(1280, 1.5) == 1920);
}

TEST_CASE("backbone: width 0.25 at 32x32 stays under 300k parameters") {
  BackboneSpec bb;
  bb.width = 0.25;
  bb.input_h = 32;
  bb.input_w = 32;
  const ModelGraph g = build_variant(Variant::deepmedix, bb, 2);
  CHECK(count_params(g) < 300000);
  CHECK(count_params(g) > 50000);
}

TEST_CASE("head: default layer list and widths") {
  HeadSpec spec;
  spec.feature_dim = 1280;
  spec.num_classes = 4;
  const ModelGraph g = build_head(spec, 7, 7);
  const auto census = node_census(g, "head/");
  CHECK(census.at(NodeKind::dropout) == 5);
  CHECK(census.at(NodeKind::batch_norm) == 3);
  CHECK(census.at(NodeKind::dense) == 4);
  CHECK(census.at(NodeKind::relu) == 3);
  CHECK(census.at(NodeKind::concat) == 1);
  CHECK(census.at(NodeKind::global_avg_pool) == 1);
  CHECK(census.at(NodeKind::flatten) == 1);
  CHECK(census.at(NodeKind::softmax) == 1);

  const auto shapes = infer_shapes(g);
  CHECK(shapes[static_cast<std::size_t>(g.find("head/concat"))] == Shape{1280 + 32});
  // final dense: 16 -> 4 = 68 parameters
  Index dense4 = 0;
  for (const auto& s : g.slots)
    if (s.name.rfind("head/dense4/", 0) == 0) dense4 += shape_size(s.shape);
  CHECK(dense4 == 68);
  CHECK(count_params(g) == head_param_oracle(1280, 4, {64, 32, 16}, true, true));
}

TEST_CASE("head: skip-free variant narrows the third dense") {
  HeadSpec spec;
  spec.feature_dim = 1280;
  spec.num_classes = 4;
  spec.skip_connection = false;
  const ModelGraph g = build_head(spec, 7, 7);
  CHECK(node_census(g, "head/").count(NodeKind::concat) == 0);
  for (const auto& s : g.slots)
    if (s.name == "head/dense3/weight") CHECK(s.shape == Shape{32, 16});
  CHECK(count_params(g) == head_param_oracle(1280, 4, {64, 32, 16}, false, true));
}

TEST_CASE("variants: structural censuses match their definitions") {
  const BackboneSpec bb = micro_backbone();
  const Index d = bb.feature_dim();

  struct Expect {
    Variant v;
    int dropouts, bns, concats;
    bool max_pool;
    Index hidden0;
  };
  const Expect table[] = {
      {Variant::deepmedix, 5, 3, 1, false, 64}, {Variant::model1, 5, 3, 1, true, 64},
      {Variant::model2, 5, 3, 0, false, 64},    {Variant::model3, 0, 0, 1, false, 64},
      {Variant::model4, 0, 0, 0, false, 64},    {Variant::model5, 5, 3, 1, false, 256},
      {Variant::model6, 5, 3, 0, false, 256},   {Variant::model7, 0, 0, 1, false, 256},
      {Variant::model8, 0, 0, 0, false, 256},
  };
  for (const auto& e : table) {
    const ModelGraph g = build_variant(e.v, bb, 4);
    auto census = node_census(g, "head/");
    CHECK(census[NodeKind::dropout] == e.dropouts);
    CHECK(census[NodeKind::batch_norm] == e.bns);
    CHECK(census[NodeKind::concat] == e.concats);
    CHECK(census[NodeKind::global_max_pool] == (e.max_pool ? 1 : 0));
    CHECK(census[NodeKind::global_avg_pool] == (e.max_pool ? 0 : 1));
    CHECK(census[NodeKind::dense] == 4);
    for (const auto& s : g.slots)
      if (s.name == "head/dense1/weight") CHECK(s.shape == Shape{d, e.hidden0});
    // classifier always stays at k
    for (const auto& s : g.slots)
      if (s.name == "head/dense4/bias") CHECK(s.shape == Shape{4});
    const HeadSpec hs = head_for_variant(e.v, 4);
    Index head_count = 0;
    for (const auto& s : g.slots)
      if (s.trainable && s.name.rfind("head/", 0) == 0) head_count += shape_size(s.shape);
    CHECK(head_count == head_param_oracle(d, 4, hs.hidden, hs.skip_connection, hs.dropout_modules));
  }

  CHECK(count_params(build_variant(Variant::model5, bb, 4)) >
        count_params(build_variant(Variant::deepmedix, bb, 4)));
  CHECK_THROWS_AS(variant_from_string("model9"), Error);
}

TEST_CASE("whole-model gradients match finite differences at desk scale") {
  BackboneSpec bb = micro_backbone();
  const ModelGraph g = build_variant(Variant::deepmedix, bb, 2);
  auto params = init_params<double>(g, 31);
  auto batch = random_batch<double>(2, 16, 16, 3, 32);
  const std::vector<int> labels = {0, 1};
  const std::uint64_t seed = 77;

  auto main_run = loss_and_gradients(g, params, batch, labels, true, seed);

  std::vector<Tensor<double>> inputs, analytic;
  std::vector<std::string> names;
  for (const auto& s : main_run.ex.param_grads.slots()) {
    inputs.push_back(params.at(s.name));
    analytic.push_back(s.value);
    names.push_back(s.name);
  }
  auto rep = grad_check(
      [&](const std::vector<Tensor<double>>& in) {
        ParamSet<double> p2 = params;
        for (std::size_t i = 0; i < in.size(); ++i) p2.at(names[i]) = in[i];
        return loss_and_gradients(g, p2, batch, labels, true, seed).loss;
      },
      analytic, inputs, 1e-5, /*max_coords=*/3, /*seed=*/5, /*denom_floor=*/1e-6);
  CHECK(rep.checks > 100);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("architecture json round trip") {
  ModelConfig cfg;
  cfg.variant = Variant::model5;
  cfg.backbone = micro_backbone();
  cfg.num_classes = 3;
  const nlohmann::json j = model_to_json(cfg);
  const ModelConfig back = model_from_json(j);
  CHECK(back.variant == Variant::model5);
  CHECK(back.num_classes == 3);
  CHECK(back.backbone.table.size() == cfg.backbone.table.size());
  CHECK(back.backbone.width == cfg.backbone.width);
  CHECK(count_params(back.build()) == count_params(cfg.build()));

  nlohmann::json bad = j;
  bad["mystery"] = 1;
  CHECK_THROWS_AS(model_from_json(bad), Error);
}

}  // TEST_SUITE
