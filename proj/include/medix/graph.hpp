#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "medix/common.hpp"
#include "medix/ops.hpp"
#include "medix/optim.hpp"
#include "medix/params.hpp"
#include "medix/rng.hpp"
#include "medix/tensor.hpp"

// Layer graph: a DAG of typed nodes in topological (construction) order with
// named parameter slots. The graph itself is plain metadata shared by every
// precision; weights live in a ParamSet and are passed explicitly, so a graph
// instance can be reused across federated clients and threads.

namespace medix {

enum class NodeKind {
  input,
  conv,
  depthwise_conv,
  dense,
  batch_norm,
  relu,
  softmax,
  dropout,
  global_avg_pool,
  global_max_pool,
  flatten,
  concat,
  add,
};

inline const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::input: return "input";
    case NodeKind::conv: return "conv";
    case NodeKind::depthwise_conv: return "depthwise_conv";
    case NodeKind::dense: return "dense";
    case NodeKind::batch_norm: return "batch_norm";
    case NodeKind::relu: return "relu";
    case NodeKind::softmax: return "softmax";
    case NodeKind::dropout: return "dropout";
    case NodeKind::global_avg_pool: return "global_avg_pool";
    case NodeKind::global_max_pool: return "global_max_pool";
    case NodeKind::flatten: return "flatten";
    case NodeKind::concat: return "concat";
    case NodeKind::add: return "add";
  }
  return "?";
}

struct GraphNode {
  NodeKind kind = NodeKind::input;
  std::string name;
  std::vector<int> in;

  ConvSpec conv;          // conv / depthwise_conv
  bool conv_bias = false; // conv
  Index units = 0;        // dense output width
  Index channels = 0;     // batch_norm
  double drop_p = 0.0;    // dropout
};

struct ParamSlotDecl {
  enum class Init { he_uniform, zeros, ones };
  std::string name;
  Shape shape;
  bool trainable = true;
  Init init = Init::zeros;
  Index fan_in = 0;  // he_uniform only
};

struct ModelGraph {
  std::vector<GraphNode> nodes;  // topological order
  std::vector<ParamSlotDecl> slots;
  int input = -1;
  int output = -1;
  Shape input_shape;  // per-sample

  const GraphNode& node(int id) const { return nodes[static_cast<std::size_t>(id)]; }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].name == name) return static_cast<int>(i);
    return -1;
  }
};

/// Per-sample output shapes of every node (no batch axis).
inline std::vector<Shape> infer_shapes(const ModelGraph& g) {
  std::vector<Shape> shapes(g.nodes.size());
  for (std::size_t id = 0; id < g.nodes.size(); ++id) {
    const GraphNode& n = g.nodes[id];
    auto in = [&](int slot) -> const Shape& { return shapes[static_cast<std::size_t>(n.in[slot])]; };
    switch (n.kind) {
      case NodeKind::input:
        shapes[id] = g.input_shape;
        break;
      case NodeKind::conv:
      case NodeKind::depthwise_conv: {
        const Shape& s = in(0);
        require(s.size() == 3, ErrorKind::shape, n.name + ": conv input must be [H,W,C]");
        shapes[id] = {conv_output_dim(s[0], n.conv.kernel_size, n.conv.stride, n.conv.padding),
                      conv_output_dim(s[1], n.conv.kernel_size, n.conv.stride, n.conv.padding),
                      n.conv.out_channels};
        break;
      }
      case NodeKind::dense:
        require(in(0).size() == 1, ErrorKind::shape, n.name + ": dense input must be a vector");
        shapes[id] = {n.units};
        break;
      case NodeKind::batch_norm:
      case NodeKind::relu:
      case NodeKind::dropout:
        shapes[id] = in(0);
        break;
      case NodeKind::softmax:
        require(in(0).size() == 1, ErrorKind::shape, n.name + ": softmax input must be a vector");
        shapes[id] = in(0);
        break;
      case NodeKind::global_avg_pool:
      case NodeKind::global_max_pool: {
        const Shape& s = in(0);
        require(s.size() == 3, ErrorKind::shape, n.name + ": pooling input must be [H,W,C]");
        shapes[id] = {s[2]};
        break;
      }
      case NodeKind::flatten:
        shapes[id] = {shape_size(in(0))};
        break;
      case NodeKind::concat:
        require(in(0).size() == 1 && in(1).size() == 1, ErrorKind::shape, n.name + ": concat expects vectors");
        shapes[id] = {in(0)[0] + in(1)[0]};
        break;
      case NodeKind::add:
        require(in(0) == in(1), ErrorKind::shape, n.name + ": add expects matching shapes");
        shapes[id] = in(0);
        break;
    }
  }
  return shapes;
}

/// Node counts by kind, optionally restricted to names with a given prefix.
inline std::map<NodeKind, int> node_census(const ModelGraph& g, const std::string& prefix = "") {
  std::map<NodeKind, int> census;
  for (const auto& n : g.nodes)
    if (prefix.empty() || n.name.rfind(prefix, 0) == 0) ++census[n.kind];
  return census;
}

/// Number of trainable parameter values.
inline Index count_params(const ModelGraph& g) {
  Index n = 0;
  for (const auto& s : g.slots)
    if (s.trainable) n += shape_size(s.shape);
  return n;
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

class GraphBuilder {
 public:
  int input(Shape per_sample) {
    require(g_.input < 0, ErrorKind::config, "graph already has an input");
    GraphNode n;
    n.kind = NodeKind::input;
    n.name = "input";
    g_.input_shape = std::move(per_sample);
    const int id = push(std::move(n));
    g_.input = id;
    return id;
  }

  int conv(const std::string& name, int in, int kernel, int stride, Padding padding, Index out_channels,
           bool bias = false) {
    GraphNode n;
    n.kind = NodeKind::conv;
    n.name = name;
    n.in = {in};
    n.conv.kernel_size = kernel;
    n.conv.stride = stride;
    n.conv.padding = padding;
    n.conv.in_channels = shape_of(in).back();
    n.conv.out_channels = out_channels;
    n.conv.mode = kernel == 1 ? ConvMode::pointwise : ConvMode::standard;
    n.conv_bias = bias;
    const Index fan = static_cast<Index>(kernel) * kernel * n.conv.in_channels;
    slot(name + "/kernel", {kernel, kernel, n.conv.in_channels, out_channels}, true,
         ParamSlotDecl::Init::he_uniform, fan);
    if (bias) slot(name + "/bias", {out_channels}, true, ParamSlotDecl::Init::zeros, 0);
    return push(std::move(n));
  }

  int depthwise_conv(const std::string& name, int in, int kernel, int stride, Padding padding) {
    GraphNode n;
    n.kind = NodeKind::depthwise_conv;
    n.name = name;
    n.in = {in};
    const Index c = shape_of(in).back();
    n.conv.kernel_size = kernel;
    n.conv.stride = stride;
    n.conv.padding = padding;
    n.conv.in_channels = c;
    n.conv.out_channels = c;
    n.conv.mode = ConvMode::depthwise;
    slot(name + "/kernel", {kernel, kernel, c}, true, ParamSlotDecl::Init::he_uniform,
         static_cast<Index>(kernel) * kernel);
    return push(std::move(n));
  }

  int dense(const std::string& name, int in, Index units) {
    GraphNode n;
    n.kind = NodeKind::dense;
    n.name = name;
    n.in = {in};
    n.units = units;
    const Index d_in = shape_of(in).back();
    slot(name + "/weight", {d_in, units}, true, ParamSlotDecl::Init::he_uniform, d_in);
    slot(name + "/bias", {units}, true, ParamSlotDecl::Init::zeros, 0);
    return push(std::move(n));
  }

  int batch_norm(const std::string& name, int in) {
    GraphNode n;
    n.kind = NodeKind::batch_norm;
    n.name = name;
    n.in = {in};
    n.channels = shape_of(in).back();
    slot(name + "/gamma", {n.channels}, true, ParamSlotDecl::Init::ones, 0);
    slot(name + "/beta", {n.channels}, true, ParamSlotDecl::Init::zeros, 0);
    slot(name + "/running_mean", {n.channels}, false, ParamSlotDecl::Init::zeros, 0);
    slot(name + "/running_var", {n.channels}, false, ParamSlotDecl::Init::ones, 0);
    return push(std::move(n));
  }

  int relu(const std::string& name, int in) { return simple(NodeKind::relu, name, {in}); }
  int softmax(const std::string& name, int in) { return simple(NodeKind::softmax, name, {in}); }
  int flatten(const std::string& name, int in) { return simple(NodeKind::flatten, name, {in}); }
  int global_avg_pool(const std::string& name, int in) { return simple(NodeKind::global_avg_pool, name, {in}); }
  int global_max_pool(const std::string& name, int in) { return simple(NodeKind::global_max_pool, name, {in}); }
  int concat(const std::string& name, int a, int b) { return simple(NodeKind::concat, name, {a, b}); }
  int add(const std::string& name, int a, int b) { return simple(NodeKind::add, name, {a, b}); }

  int dropout(const std::string& name, int in, double p) {
    require(p >= 0.0 && p < 1.0, ErrorKind::config, "dropout rate must be in [0,1)");
    GraphNode n;
    n.kind = NodeKind::dropout;
    n.name = name;
    n.in = {in};
    n.drop_p = p;
    return push(std::move(n));
  }

  const Shape& shape_of(int id) const { return shapes_[static_cast<std::size_t>(id)]; }

  ModelGraph finish(int output) {
    require(output >= 0 && output < static_cast<int>(g_.nodes.size()), ErrorKind::config, "bad output node");
    g_.output = output;
    return std::move(g_);
  }

 private:
  int simple(NodeKind kind, const std::string& name, std::vector<int> in) {
    GraphNode n;
    n.kind = kind;
    n.name = name;
    n.in = std::move(in);
    return push(std::move(n));
  }

  int push(GraphNode n) {
    for (int dep : n.in)
      require(dep >= 0 && dep < static_cast<int>(g_.nodes.size()), ErrorKind::config,
              n.name + ": inputs must precede the node");
    g_.nodes.push_back(std::move(n));
    // Incremental shape propagation keeps slot shapes available at build time.
    ModelGraph probe;
    probe.nodes = g_.nodes;
    probe.input_shape = g_.input_shape;
    shapes_ = infer_shapes(probe);
    return static_cast<int>(g_.nodes.size()) - 1;
  }

  void slot(std::string name, Shape shape, bool trainable, ParamSlotDecl::Init init, Index fan_in) {
    g_.slots.push_back(ParamSlotDecl{std::move(name), std::move(shape), trainable, init, fan_in});
  }

  ModelGraph g_;
  std::vector<Shape> shapes_;
};

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

/// He-uniform for kernels and dense weights, zeros for biases and beta, ones
/// for gamma. Each slot draws from its own name-keyed stream, so the result
/// does not depend on slot order.
template <typename Scalar>
ParamSet<Scalar> init_params(const ModelGraph& g, std::uint64_t seed) {
  Rng root(seed);
  ParamSet<Scalar> params;
  for (const auto& decl : g.slots) {
    Tensor<Scalar> value(decl.shape);
    switch (decl.init) {
      case ParamSlotDecl::Init::zeros:
        break;
      case ParamSlotDecl::Init::ones:
        value.array().setConstant(Scalar(1));
        break;
      case ParamSlotDecl::Init::he_uniform: {
        Rng rng = root.split(decl.name);
        const double limit = std::sqrt(6.0 / static_cast<double>(std::max<Index>(decl.fan_in, 1)));
        for (Index i = 0; i < value.size(); ++i) value[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
        break;
      }
    }
    params.add(decl.name, std::move(value), decl.trainable);
  }
  return params;
}

// ---------------------------------------------------------------------------
// Execution: one forward pass (with caches) plus optional backward sweeps
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Execution {
  const ModelGraph* graph = nullptr;
  const ParamSet<Scalar>* params = nullptr;  // must outlive the execution
  bool training = false;
  std::uint64_t seed = 0;
  Index batch = 0;

  std::vector<Tensor<Scalar>> out;                 // node outputs (batched)
  std::vector<Tensor<Scalar>> bn_xhat, bn_inv_std; // batch-norm caches
  std::vector<Tensor<Scalar>> drop_mask;
  std::vector<std::vector<Index>> pool_argmax;

  std::vector<Tensor<Scalar>> grad;  // accumulated gradients w.r.t. node outputs
  ParamSet<Scalar> param_grads;      // trainable slots only
  std::vector<std::pair<std::string, Tensor<Scalar>>> state_updates;  // new running stats

  const Tensor<Scalar>& output() const { return out[static_cast<std::size_t>(graph->output)]; }
  const Tensor<Scalar>& input_grad() const { return grad[static_cast<std::size_t>(graph->input)]; }

  void zero_grads() {
    for (auto& t : grad) t = Tensor<Scalar>();
    for (auto& s : param_grads.slots()) s.value.array().setZero();
  }
};

namespace detail {

template <typename Scalar>
void add_grad(Execution<Scalar>& ex, int id, Tensor<Scalar> g) {
  auto& slot = ex.grad[static_cast<std::size_t>(id)];
  if (slot.size() == 0)
    slot = std::move(g);
  else
    slot.array() += g.array();
}

template <typename Scalar>
BatchNormState<Scalar> bn_state_from_params(const GraphNode& n, const ParamSet<Scalar>& params) {
  BatchNormState<Scalar> s;
  s.gamma = params.at(n.name + "/gamma");
  s.beta = params.at(n.name + "/beta");
  s.running_mean = params.at(n.name + "/running_mean");
  s.running_var = params.at(n.name + "/running_var");
  return s;
}

}  // namespace detail

template <typename Scalar>
Execution<Scalar> forward(const ModelGraph& g, const ParamSet<Scalar>& params, const Tensor<Scalar>& batch,
                          bool training, std::uint64_t seed) {
  require(g.input >= 0 && g.output >= 0, ErrorKind::config, "graph is not finished");
  require(batch.rank() == static_cast<Index>(g.input_shape.size()) + 1, ErrorKind::shape,
          "batch rank must be per-sample rank + 1");
  for (std::size_t i = 0; i < g.input_shape.size(); ++i)
    require(batch.dim(static_cast<Index>(i) + 1) == g.input_shape[i], ErrorKind::shape,
            "batch sample shape mismatch: got " + shape_str(batch.shape()) + ", model wants " +
                shape_str(g.input_shape));

  Execution<Scalar> ex;
  ex.graph = &g;
  ex.params = &params;
  ex.training = training;
  ex.seed = seed;
  ex.batch = batch.dim(0);
  ex.out.resize(g.nodes.size());
  ex.bn_xhat.resize(g.nodes.size());
  ex.bn_inv_std.resize(g.nodes.size());
  ex.drop_mask.resize(g.nodes.size());
  ex.pool_argmax.resize(g.nodes.size());
  ex.grad.resize(g.nodes.size());
  ex.param_grads = params.zeros_like(/*trainable_only=*/true);

  Rng rng(seed);
  for (std::size_t id = 0; id < g.nodes.size(); ++id) {
    const GraphNode& n = g.nodes[id];
    auto in = [&](int slot) -> const Tensor<Scalar>& { return ex.out[static_cast<std::size_t>(n.in[slot])]; };
    switch (n.kind) {
      case NodeKind::input:
        ex.out[id] = batch;
        break;
      case NodeKind::conv: {
        const Tensor<Scalar>& kernel = params.at(n.name + "/kernel");
        const Tensor<Scalar>* bias = n.conv_bias ? &params.at(n.name + "/bias") : nullptr;
        ex.out[id] = conv2d(in(0), n.conv, kernel, bias);
        break;
      }
      case NodeKind::depthwise_conv:
        ex.out[id] = depthwise_conv2d(in(0), n.conv, params.at(n.name + "/kernel"));
        break;
      case NodeKind::dense:
        ex.out[id] = dense(in(0), params.at(n.name + "/weight"), params.at(n.name + "/bias"));
        break;
      case NodeKind::batch_norm: {
        auto state = detail::bn_state_from_params(n, params);
        auto r = batch_norm(in(0), state, training);
        ex.out[id] = std::move(r.out);
        ex.bn_xhat[id] = std::move(r.xhat);
        ex.bn_inv_std[id] = std::move(r.inv_std);
        if (training) {
          ex.state_updates.emplace_back(n.name + "/running_mean", std::move(r.new_state.running_mean));
          ex.state_updates.emplace_back(n.name + "/running_var", std::move(r.new_state.running_var));
        }
        break;
      }
      case NodeKind::relu:
        ex.out[id] = relu(in(0));
        break;
      case NodeKind::softmax:
        ex.out[id] = softmax(in(0));
        break;
      case NodeKind::dropout:
        if (!training || n.drop_p == 0.0) {
          ex.out[id] = in(0);  // identity; empty mask marks the pass-through
        } else {
          DropoutSpec spec{n.drop_p, true, rng.stream_seed(n.name)};
          auto r = dropout(in(0), spec);
          ex.out[id] = std::move(r.out);
          ex.drop_mask[id] = std::move(r.mask);
        }
        break;
      case NodeKind::global_avg_pool:
        ex.out[id] = global_avg_pool(in(0));
        break;
      case NodeKind::global_max_pool: {
        auto r = global_max_pool(in(0));
        ex.out[id] = std::move(r.out);
        ex.pool_argmax[id] = std::move(r.argmax);
        break;
      }
      case NodeKind::flatten: {
        const Tensor<Scalar>& x = in(0);
        ex.out[id] = x.reshaped({ex.batch, x.size() / ex.batch});
        break;
      }
      case NodeKind::concat:
        ex.out[id] = concat(in(0), in(1));
        break;
      case NodeKind::add: {
        require(in(0).same_shape(in(1)), ErrorKind::shape, n.name + ": add shape mismatch");
        ex.out[id] = Tensor<Scalar>(in(0).shape(), in(0).array() + in(1).array());
        break;
      }
    }
  }
  return ex;
}

/// Reverse sweep from `start` with the given output-gradient. Gradients
/// accumulate into ex.grad (per node) and ex.param_grads.
template <typename Scalar>
void backward_from(Execution<Scalar>& ex, int start, Tensor<Scalar> grad_out) {
  const ModelGraph& g = *ex.graph;
  require(grad_out.same_shape(ex.out[static_cast<std::size_t>(start)]), ErrorKind::shape,
          "backward seed gradient shape mismatch");
  detail::add_grad(ex, start, std::move(grad_out));

  for (int id = start; id >= 0; --id) {
    const std::size_t uid = static_cast<std::size_t>(id);
    if (ex.grad[uid].size() == 0) continue;
    const GraphNode& n = g.nodes[uid];
    const Tensor<Scalar>& gout = ex.grad[uid];
    auto in_tensor = [&](int slot) -> const Tensor<Scalar>& {
      return ex.out[static_cast<std::size_t>(n.in[slot])];
    };
    switch (n.kind) {
      case NodeKind::input:
        break;
      case NodeKind::conv: {
        auto cg = conv2d_backward(in_tensor(0), n.conv, ex.params->at(n.name + "/kernel"), gout, n.conv_bias);
        detail::add_grad(ex, n.in[0], std::move(cg.input));
        ex.param_grads.at(n.name + "/kernel").array() += cg.kernel.array();
        if (n.conv_bias) ex.param_grads.at(n.name + "/bias").array() += cg.bias.array();
        break;
      }
      case NodeKind::depthwise_conv: {
        auto cg = depthwise_conv2d_backward(in_tensor(0), n.conv, ex.params->at(n.name + "/kernel"), gout);
        detail::add_grad(ex, n.in[0], std::move(cg.input));
        ex.param_grads.at(n.name + "/kernel").array() += cg.kernel.array();
        break;
      }
      case NodeKind::dense: {
        auto dg = dense_backward(in_tensor(0), ex.params->at(n.name + "/weight"), gout);
        detail::add_grad(ex, n.in[0], std::move(dg.input));
        ex.param_grads.at(n.name + "/weight").array() += dg.weight.array();
        ex.param_grads.at(n.name + "/bias").array() += dg.bias.array();
        break;
      }
      case NodeKind::batch_norm: {
        auto bg = batch_norm_backward(ex.bn_xhat[uid], ex.bn_inv_std[uid],
                                      ex.params->at(n.name + "/gamma"), gout, ex.training);
        detail::add_grad(ex, n.in[0], std::move(bg.input));
        ex.param_grads.at(n.name + "/gamma").array() += bg.gamma.array();
        ex.param_grads.at(n.name + "/beta").array() += bg.beta.array();
        break;
      }
      case NodeKind::relu:
        detail::add_grad(ex, n.in[0], relu_backward(in_tensor(0), gout));
        break;
      case NodeKind::softmax:
        detail::add_grad(ex, n.in[0], softmax_backward(ex.out[uid], gout));
        break;
      case NodeKind::dropout:
        if (ex.drop_mask[uid].size() == 0)
          detail::add_grad(ex, n.in[0], gout);
        else
          detail::add_grad(ex, n.in[0], dropout_backward(ex.drop_mask[uid], gout));
        break;
      case NodeKind::global_avg_pool:
        detail::add_grad(ex, n.in[0], global_avg_pool_backward(in_tensor(0).shape(), gout));
        break;
      case NodeKind::global_max_pool:
        detail::add_grad(ex, n.in[0], global_max_pool_backward(in_tensor(0).shape(), ex.pool_argmax[uid], gout));
        break;
      case NodeKind::flatten:
        detail::add_grad(ex, n.in[0], gout.reshaped(in_tensor(0).shape()));
        break;
      case NodeKind::concat: {
        auto [ga, gb] = concat_backward(in_tensor(0).dim(in_tensor(0).rank() - 1),
                                        in_tensor(1).dim(in_tensor(1).rank() - 1), gout);
        detail::add_grad(ex, n.in[0], std::move(ga));
        detail::add_grad(ex, n.in[1], std::move(gb));
        break;
      }
      case NodeKind::add:
        detail::add_grad(ex, n.in[0], gout);
        detail::add_grad(ex, n.in[1], gout);
        break;
    }
  }
}

/// Forward + fused softmax/cross-entropy backward. Requires the output node
/// to be a softmax; the gradient is seeded at its logits as (yhat - y) / B,
/// which avoids differentiating the softmax/log pair separately.
template <typename Scalar>
struct TrainStepResult {
  double loss = 0;
  Execution<Scalar> ex;
};

template <typename Scalar>
TrainStepResult<Scalar> loss_and_gradients(const ModelGraph& g, const ParamSet<Scalar>& params,
                                           const Tensor<Scalar>& batch, const std::vector<int>& labels,
                                           bool training, std::uint64_t seed) {
  require(g.node(g.output).kind == NodeKind::softmax, ErrorKind::config,
          "training requires a softmax output node");
  TrainStepResult<Scalar> r;
  r.ex = forward(g, params, batch, training, seed);
  const Tensor<Scalar>& probs = r.ex.output();
  ensure_finite(probs, "model forward");
  r.loss = static_cast<double>(cce_loss(probs, labels));
  Tensor<Scalar> glogits = softmax_cce_grad(probs, labels);
  backward_from(r.ex, g.node(g.output).in[0], std::move(glogits));
  return r;
}

}  // namespace medix
