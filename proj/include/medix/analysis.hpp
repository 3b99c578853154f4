#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medix/graph.hpp"

// Static cost model and geometry probes. FLOP convention: one multiply-add
// counts as 2 FLOPs; batch norm is its 4-FLOP eval form per element;
// activations cost 1 FLOP per element; global pooling costs (HW-1) adds plus
// one multiply per channel; softmax is charged 4 FLOPs per element. Dropout,
// flatten and concat are free at inference.

namespace medix {

inline constexpr const char* kFlopConvention =
    "multiply-add = 2 FLOPs; eval-mode batch norm 4/elem; activations 1/elem; "
    "global pooling HW/channel; softmax 4/elem; dropout, flatten, concat free";

struct CostRow {
  std::string name;
  NodeKind kind = NodeKind::input;
  Shape out_shape;  // per sample
  std::int64_t flops = 0;
  std::int64_t params = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  std::int64_t total_flops = 0;
  std::int64_t total_params = 0;
  std::string convention = kFlopConvention;
};

/// Per-sample forward cost of every node, from static shape propagation.
inline CostReport count_flops(const ModelGraph& g) {
  const auto shapes = infer_shapes(g);
  CostReport report;
  for (std::size_t id = 0; id < g.nodes.size(); ++id) {
    const GraphNode& n = g.nodes[id];
    const Shape& out = shapes[id];
    const std::int64_t out_elems = shape_size(out);
    auto in_shape = [&](int slot) -> const Shape& { return shapes[static_cast<std::size_t>(n.in[slot])]; };

    CostRow row;
    row.name = n.name;
    row.kind = n.kind;
    row.out_shape = out;
    switch (n.kind) {
      case NodeKind::input:
      case NodeKind::dropout:
      case NodeKind::flatten:
      case NodeKind::concat:
        row.flops = 0;
        break;
      case NodeKind::conv: {
        const std::int64_t k2 = static_cast<std::int64_t>(n.conv.kernel_size) * n.conv.kernel_size;
        row.flops = 2 * k2 * n.conv.in_channels * out[0] * out[1] * n.conv.out_channels;
        if (n.conv_bias) row.flops += out_elems;
        break;
      }
      case NodeKind::depthwise_conv: {
        const std::int64_t k2 = static_cast<std::int64_t>(n.conv.kernel_size) * n.conv.kernel_size;
        row.flops = 2 * k2 * out[0] * out[1] * n.conv.out_channels;
        break;
      }
      case NodeKind::dense:
        row.flops = 2 * in_shape(0)[0] * n.units + n.units;
        break;
      case NodeKind::batch_norm:
        row.flops = 4 * out_elems;
        break;
      case NodeKind::relu:
      case NodeKind::add:
        row.flops = out_elems;
        break;
      case NodeKind::softmax:
        row.flops = 4 * out_elems;
        break;
      case NodeKind::global_avg_pool:
      case NodeKind::global_max_pool: {
        const Shape& s = in_shape(0);
        row.flops = s[0] * s[1] * s[2];  // (HW-1) adds + 1 multiply per channel
        break;
      }
    }
    const std::string prefix = n.name + "/";
    for (const auto& slot : g.slots)
      if (slot.trainable && slot.name.rfind(prefix, 0) == 0) row.params += shape_size(slot.shape);

    report.total_flops += row.flops;
    report.total_params += row.params;
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline void write_cost_csv(const std::string& path, const CostReport& report) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::data, "cannot write cost csv: " + path);
  out << "name,kind,out_shape,flops,params\n";
  for (const auto& r : report.rows)
    out << r.name << "," << node_kind_name(r.kind) << "," << shape_str(r.out_shape) << "," << r.flops << ","
        << r.params << "\n";
  out << "total,,," << report.total_flops << "," << report.total_params << "\n";
  out << "# convention: " << report.convention << "\n";
}

inline void print_cost_table(std::ostream& out, const CostReport& report) {
  out << std::left << std::setw(34) << "layer" << std::setw(16) << "output" << std::right << std::setw(14)
      << "flops" << std::setw(12) << "params" << "\n";
  for (const auto& r : report.rows) {
    if (r.flops == 0 && r.params == 0) continue;
    out << std::left << std::setw(34) << r.name << std::setw(16) << shape_str(r.out_shape) << std::right
        << std::setw(14) << r.flops << std::setw(12) << r.params << "\n";
  }
  out << std::left << std::setw(50) << "total" << std::right << std::setw(14) << report.total_flops
      << std::setw(12) << report.total_params << "\n";
  out << "convention: " << report.convention << "\n";
}

// ---------------------------------------------------------------------------
// Jacobian and the pullback metric G(x) = J(x)^T J(x)
// ---------------------------------------------------------------------------

/// Rows are gradients of each output w.r.t. the flattened input, computed by
/// one eval-mode forward and k backward sweeps.
template <typename Scalar>
Tensor<Scalar> jacobian(const ModelGraph& g, const ParamSet<Scalar>& params, const Tensor<Scalar>& x) {
  require(x.shape() == g.input_shape, ErrorKind::shape, "jacobian: x must be one sample");
  const Index n = x.size();
  Shape batch_shape = g.input_shape;
  batch_shape.insert(batch_shape.begin(), 1);
  auto ex = forward(g, params, x.reshaped(batch_shape), /*training=*/false, /*seed=*/0);
  const Tensor<Scalar>& out = ex.output();
  require(out.rank() == 2 && out.dim(0) == 1, ErrorKind::shape, "jacobian: model output must be a vector");
  const Index k = out.dim(1);

  Tensor<Scalar> jac({k, n});
  for (Index i = 0; i < k; ++i) {
    ex.zero_grads();
    Tensor<Scalar> seed_grad = Tensor<Scalar>::zeros(out.shape());
    seed_grad[i] = Scalar(1);
    backward_from(ex, g.output, std::move(seed_grad));
    const Tensor<Scalar>& gin = ex.input_grad();
    require(gin.size() == n, ErrorKind::shape, "jacobian: missing input gradient");
    std::copy(gin.data(), gin.data() + n, jac.data() + i * n);
  }
  ensure_finite(jac, "jacobian");
  return jac;
}

template <typename Scalar>
struct PullbackMetric {
  Tensor<Scalar> base_point;  // x
  Tensor<Scalar> metric;      // G = J^T J, n x n
};

template <typename Scalar>
PullbackMetric<Scalar> pullback_metric(const ModelGraph& g, const ParamSet<Scalar>& params,
                                       const Tensor<Scalar>& x) {
  Tensor<Scalar> jac = jacobian(g, params, x);
  const Index n = x.size();
  PullbackMetric<Scalar> pm;
  pm.base_point = x;
  pm.metric = Tensor<Scalar>({n, n});
  pm.metric.matrix().noalias() = jac.matrix().transpose() * jac.matrix();
  return pm;
}

/// The bilinear form u^T G v.
template <typename Scalar>
Scalar metric_form(const Tensor<Scalar>& metric, const Tensor<Scalar>& u, const Tensor<Scalar>& v) {
  require(metric.rank() == 2 && metric.dim(0) == metric.dim(1), ErrorKind::shape, "metric must be square");
  require(u.size() == metric.dim(0) && v.size() == metric.dim(0), ErrorKind::shape,
          "metric_form: dimension mismatch");
  return u.matrix(1, u.size()).row(0).dot((metric.matrix() * v.matrix(v.size(), 1)).col(0));
}

/// Leading eigenvalues of a symmetric PSD matrix by power iteration with
/// deflation. Stops a vector when successive Rayleigh quotients move by less
/// than `tol`.
template <typename Scalar>
std::vector<Scalar> top_eigenvalues(const Tensor<Scalar>& metric, int count, Scalar tol = static_cast<Scalar>(1e-8),
                                    int max_iters = 10000, std::uint64_t seed = 0) {
  require(metric.rank() == 2 && metric.dim(0) == metric.dim(1), ErrorKind::shape, "metric must be square");
  const Index n = metric.dim(0);
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Mat a = metric.matrix();
  Rng rng(seed);
  std::vector<Scalar> eigenvalues;
  for (int e = 0; e < count && e < n; ++e) {
    Vec v(n);
    for (Index i = 0; i < n; ++i) v[i] = static_cast<Scalar>(rng.normal());
    v.normalize();
    Scalar lambda = 0;
    for (int it = 0; it < max_iters; ++it) {
      Vec w = a * v;
      const Scalar norm = w.norm();
      if (norm < static_cast<Scalar>(1e-30)) {
        lambda = 0;
        break;
      }
      v = w / norm;
      const Scalar next = v.dot(a * v);
      if (std::abs(next - lambda) < tol) {
        lambda = next;
        break;
      }
      lambda = next;
    }
    eigenvalues.push_back(lambda);
    a.noalias() -= lambda * v * v.transpose();
  }
  return eigenvalues;
}

template <typename Scalar>
nlohmann::json spectrum_to_json(const std::vector<Scalar>& eigenvalues, Index input_dim) {
  nlohmann::json j;
  j["input_dim"] = input_dim;
  j["eigenvalues"] = eigenvalues;
  return j;
}

}  // namespace medix
