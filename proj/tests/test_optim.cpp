#include <doctest.h>

#include <cmath>

#include "medix/gradcheck.hpp"
#include "medix/optim.hpp"

using namespace medix;

namespace {

ParamSet<double> scalar_params(double v) {
  ParamSet<double> p;
  p.add("w", Tensor<double>::from({1}, {v}));
  return p;
}

ParamSet<double> scalar_grad(double v) { return scalar_params(v); }

}  // namespace

TEST_SUITE("optim") {

// ---------------------------------------------------------------- losses ---

TEST_CASE("bce: perfect, ln2 and mixed-case oracle") {
  auto y3 = Tensor<double>::from({2}, {1.0, 0.0});
  auto p3 = Tensor<double>::from({2}, {1.0 - 1e-7, 1e-7});  // clip bounds
  CHECK(bce_loss(y3, p3) == doctest::Approx(0.0).epsilon(1e-5));
  CHECK(bce_loss(y3, p3) < 1e-6);

  auto y1 = Tensor<double>::from({1}, {1.0});
  auto p1 = Tensor<double>::from({1}, {0.5});
  CHECK(bce_loss(y1, p1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto y = Tensor<double>::from({2}, {1.0, 0.0});
  auto p = Tensor<double>::from({2}, {0.9, 0.2});
  const double oracle = -(std::log(0.9) + std::log(0.8)) / 2.0;  // high-precision scalar oracle
  CHECK(bce_loss(y, p) == doctest::Approx(oracle).epsilon(1e-14));

  CHECK_THROWS_AS(bce_loss(y, p1), Error);
}

TEST_CASE("cce: perfect, uniform = ln C, mixed oracle") {
  auto onehot = Tensor<double>::from({1, 2}, {1, 0});
  auto perfect = Tensor<double>::from({1, 2}, {1.0, 0.0});
  CHECK(cce_loss(onehot, perfect) < 1e-6);

  const Index C = 5;
  Tensor<double> uy({1, C}), up({1, C});
  uy(0, 3) = 1;
  for (Index c = 0; c < C; ++c) up(0, c) = 1.0 / C;
  CHECK(cce_loss(uy, up) == doctest::Approx(std::log(double(C))).epsilon(1e-12));

  auto y = Tensor<double>::from({2, 3}, {0, 1, 0, 0, 0, 1});
  auto p = Tensor<double>::from({2, 3}, {0.2, 0.5, 0.3, 0.1, 0.2, 0.7});
  const double oracle = -(std::log(0.5) + std::log(0.7)) / 2.0;
  CHECK(cce_loss(y, p) == doctest::Approx(oracle).epsilon(1e-14));
  CHECK(cce_loss(p, std::vector<int>{1, 2}) == doctest::Approx(oracle).epsilon(1e-14));

  CHECK_THROWS_AS(cce_loss(y, Tensor<double>::zeros({3, 3})), Error);
  CHECK_THROWS_AS(cce_loss(p, std::vector<int>{1, 7}), Error);
}

TEST_CASE("bce and cce agree on binary problems") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const Index n = 1 + static_cast<Index>(rng.below(8));
    Tensor<double> y({n}), p({n});
    Tensor<double> onehot({n, 2}), probs({n, 2});
    for (Index i = 0; i < n; ++i) {
      y[i] = static_cast<double>(rng.below(2));
      p[i] = rng.uniform(0.05, 0.95);
      onehot(i, static_cast<Index>(y[i])) = 1.0;
      probs(i, 1) = p[i];
      probs(i, 0) = 1.0 - p[i];
    }
    CHECK(std::abs(bce_loss(y, p) - cce_loss(onehot, probs)) < 1e-9);
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(4);
  Tensor<double> y({6}), p({6});
  for (Index i = 0; i < 6; ++i) {
    y[i] = static_cast<double>(rng.below(2));
    p[i] = rng.uniform(0.1, 0.9);
  }
  Tensor<double> grad;
  bce_loss(y, p, &grad);
  auto rep = grad_check([&](const std::vector<Tensor<double>>& in) { return double(bce_loss(y, in[0])); },
                        {grad}, {p});
  CHECK(rep.max_rel_error < 1e-4);

  Tensor<double> onehot({3, 4}), probs({3, 4});
  for (Index i = 0; i < 3; ++i) {
    onehot(i, static_cast<Index>(rng.below(4))) = 1.0;
    for (Index c = 0; c < 4; ++c) probs(i, c) = rng.uniform(0.1, 0.9);
  }
  Tensor<double> cgrad;
  cce_loss(onehot, probs, &cgrad);
  auto rep2 = grad_check([&](const std::vector<Tensor<double>>& in) { return double(cce_loss(onehot, in[0])); },
                         {cgrad}, {probs});
  CHECK(rep2.max_rel_error < 1e-4);
}

// ------------------------------------------------------------------- sgd ---

TEST_CASE("sgd: formula, zero cases, frozen slots") {
  auto w = scalar_params(1.0);
  CHECK(sgd_step(w, scalar_grad(0.5), 0.1).at("w")[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(sgd_step(w, scalar_grad(0.0), 0.1).at("w")[0] == 1.0);
  CHECK(sgd_step(w, scalar_grad(123.0), 0.0).at("w")[0] == 1.0);

  // the closed-form local step: per-sample loss (w-2)^2, w=0, eta=0.1 -> 0.4
  const double grad_at_zero = 2.0 * (0.0 - 2.0);
  CHECK(sgd_step(scalar_params(0.0), scalar_grad(grad_at_zero), 0.1).at("w")[0] == doctest::Approx(0.4));

  ParamSet<double> wide;
  wide.add("a", Tensor<double>::from({2}, {1, 2}));
  wide.add("stats", Tensor<double>::from({2}, {5, 6}), /*trainable=*/false);
  ParamSet<double> g;
  g.add("a", Tensor<double>::from({2}, {1, 1}));
  auto next = sgd_step(wide, g, 0.5);
  CHECK(next.at("a")[0] == 0.5);
  CHECK(next.at("stats")[0] == 5.0);  // untouched: no gradient slot
}

// ------------------------------------------------------------------ adam ---

TEST_CASE("adam: zero gradient leaves weights unchanged") {
  AdamState<double> st;
  auto [st2, w2] = adam_step(std::move(st), scalar_params(3.0), scalar_grad(0.0));
  CHECK(w2.at("w")[0] == 3.0);
  CHECK(st2.m.at("w")[0] == 0.0);
  CHECK(st2.v.at("w")[0] == 0.0);
  CHECK(st2.t == 1);
}

TEST_CASE("adam: first-step closed form") {
  AdamState<double> st;  // defaults alpha 1e-3, betas 0.9/0.999, eps 1e-8
  auto [st2, w2] = adam_step(std::move(st), scalar_params(0.0), scalar_grad(1.0));
  // mhat = 1, vhat = 1 -> delta = -alpha / (1 + eps)
  CHECK(w2.at("w")[0] == doctest::Approx(-0.001 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam: two-step trajectory matches a scalar recurrence oracle") {
  AdamState<double> st;
  auto [st1, w1] = adam_step(std::move(st), scalar_params(0.0), scalar_grad(1.0));
  auto [st2, w2] = adam_step(std::move(st1), w1, scalar_grad(-1.0));

  // independent long-double recurrence
  long double m = 0, v = 0, w = 0;
  const long double alpha = 1e-3L, b1 = 0.9L, b2 = 0.999L, eps = 1e-8L;
  int t = 0;
  for (long double gt : {1.0L, -1.0L}) {
    ++t;
    m = b1 * m + (1 - b1) * gt;
    v = b2 * v + (1 - b2) * gt * gt;
    const long double mhat = m / (1 - std::pow(b1, (long double)t));
    const long double vhat = v / (1 - std::pow(b2, (long double)t));
    w -= alpha * mhat / (std::sqrt(vhat) + eps);
  }
  CHECK(w2.at("w")[0] == doctest::Approx(static_cast<double>(w)).epsilon(1e-12));
  CHECK(st2.t == 2);
}

TEST_CASE("adam: beta1 = beta2 = 0 degrades to sign-free scaled sgd") {
  for (double g : {2.5, -0.7, 0.01}) {
    AdamState<double> st;
    st.beta1 = 0.0;
    st.beta2 = 0.0;
    st.epsilon = 0.5;
    st.alpha = 0.1;
    auto [st2, w2] = adam_step(std::move(st), scalar_params(0.0), scalar_grad(g));
    CHECK(w2.at("w")[0] == doctest::Approx(-0.1 * g / (std::abs(g) + 0.5)).epsilon(1e-12));
  }
}

// ------------------------------------------------------------------ svrg ---

TEST_CASE("svrg: minibatch == dataset collapses to full-gradient descent") {
  // least squares per sample: 0.5*(w - target_i)^2
  const std::vector<double> targets = {1.0, 2.0, 5.0, -3.0, 0.5};
  std::vector<Index> all = {0, 1, 2, 3, 4};
  BatchGradFn<double> grad_fn = [&](const ParamSet<double>& w, std::span<const Index> batch, std::uint64_t) {
    double g = 0;
    for (Index i : batch) g += (w.at("w")[0] - targets[static_cast<std::size_t>(i)]);
    ParamSet<double> out;
    out.add("w", Tensor<double>::from({1}, {g / static_cast<double>(batch.size())}));
    return out;
  };

  auto w = scalar_params(0.3);
  auto state = svrg_prepare(grad_fn, w, all, /*chunk=*/16, /*seed=*/5);
  // one step at a different point than the snapshot
  auto w_moved = scalar_params(1.7);
  auto stepped = svrg_step(state, grad_fn, w_moved, all, 0.05, svrg_chunk_seed(5, 0));
  auto plain = sgd_step(w_moved, grad_fn(w_moved, all, svrg_chunk_seed(5, 0)), 0.05);
  CHECK(stepped.at("w")[0] == plain.at("w")[0]);  // exact: the correction cancels bitwise
}

TEST_CASE("svrg: first step at the snapshot moves along the full gradient") {
  const std::vector<double> targets = {4.0, -1.0, 2.0};
  std::vector<Index> all = {0, 1, 2};
  BatchGradFn<double> grad_fn = [&](const ParamSet<double>& w, std::span<const Index> batch, std::uint64_t) {
    double g = 0;
    for (Index i : batch) g += (w.at("w")[0] - targets[static_cast<std::size_t>(i)]);
    ParamSet<double> out;
    out.add("w", Tensor<double>::from({1}, {g / static_cast<double>(batch.size())}));
    return out;
  };
  auto w = scalar_params(0.0);
  auto state = svrg_prepare(grad_fn, w, all, 16, 9);
  const std::vector<Index> minibatch = {1};
  auto stepped = svrg_step(state, grad_fn, w, minibatch, 0.1, 42);
  // g(w) == g(snapshot) on the same batch, so the direction is the full gradient
  const double expect = 0.0 - 0.1 * state.full_grad.at("w")[0];
  CHECK(stepped.at("w")[0] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("svrg: quadratic trajectory matches the hand recurrence") {
  // two samples, per-sample loss (w-2)^2, gradient 2(w-2)
  const std::vector<double> targets = {2.0, 2.0};
  std::vector<Index> all = {0, 1};
  BatchGradFn<double> grad_fn = [&](const ParamSet<double>& w, std::span<const Index> batch, std::uint64_t) {
    double g = 0;
    for (Index i : batch) {
      (void)i;
      g += 2.0 * (w.at("w")[0] - 2.0);
    }
    ParamSet<double> out;
    out.add("w", Tensor<double>::from({1}, {g / static_cast<double>(batch.size())}));
    return out;
  };

  const double eta = 0.1;
  auto w = scalar_params(0.0);
  auto state = svrg_prepare(grad_fn, w, all, 16, 1);
  std::vector<Index> b0 = {0}, b1 = {1};
  auto w1 = svrg_step(state, grad_fn, w, b0, eta, 2);
  auto w2 = svrg_step(state, grad_fn, w1, b1, eta, 3);
  auto w3 = svrg_step(state, grad_fn, w2, b0, eta, 4);
  CHECK(state.inner_steps == 3);

  // hand recurrence: direction = 2(w-2) + (g_full - 2(w_snap-2)); g_full = 2(0-2) = -4
  double hw = 0.0;
  const double snap = 0.0, g_full = 2.0 * (snap - 2.0);
  for (int s = 0; s < 3; ++s) hw -= eta * (2.0 * (hw - 2.0) + (g_full - 2.0 * (snap - 2.0)));
  CHECK(w3.at("w")[0] == doctest::Approx(hw).epsilon(1e-14));

  CHECK_THROWS_AS(svrg_prepare(grad_fn, w, std::span<const Index>{}, 4, 0), Error);
}

// ------------------------------------------------------------- reduce_lr ---

TEST_CASE("reduce_lr: exact division, repeated, precondition") {
  CHECK(reduce_lr(0.1, 3.0) == 0.1 / 3.0);
  CHECK(reduce_lr(reduce_lr(0.1, 3.0), 3.0) == (0.1 / 3.0) / 3.0);
  CHECK_THROWS_AS(reduce_lr(0.1, 1.0), Error);
  CHECK_THROWS_AS(reduce_lr(0.1, 0.5), Error);
}

TEST_CASE("optimizer config parsing") {
  CHECK(optimizer_type_from_string("adam") == OptimizerType::adam);
  CHECK(optimizer_type_from_string("svrg") == OptimizerType::svrg);
  CHECK_THROWS_AS(optimizer_type_from_string("lamb"), Error);
}

}  // TEST_SUITE
