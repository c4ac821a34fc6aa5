#include <doctest.h>

#include <cmath>
#include <functional>

#include "ciseg/graph.hpp"
#include "ciseg/rng.hpp"
#include "ciseg/tensor.hpp"

using namespace ciseg;

namespace {

using BuildFn = std::function<Var(Graph<double>&, std::vector<Var>&)>;

// Central-difference check of every input element against the tape gradient.
void check_grad(const BuildFn& build, std::vector<Tensor<double>> inputs, double tol = 1e-6) {
  Graph<double> g;
  std::vector<Var> vars;
  for (auto& t : inputs) vars.push_back(g.leaf(t, true));
  Var loss = build(g, vars);
  REQUIRE(g.value(loss).numel() == 1);
  g.backward(loss);

  const double h = 1e-6;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      auto eval_at = [&](double delta) {
        Graph<double> g2;
        g2.recording = false;
        std::vector<Var> vs;
        for (size_t k2 = 0; k2 < inputs.size(); ++k2) {
          Tensor<double> t = inputs[k2];
          if (k2 == k) t[i] += delta;
          vs.push_back(g2.leaf(std::move(t), false));
        }
        return g2.scalar(build(g2, vs));
      };
      double fd = (eval_at(h) - eval_at(-h)) / (2 * h);
      double an = g.grad(vars[k]).empty() ? 0.0 : g.grad(vars[k])[i];
      double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      INFO("input ", k, " element ", i, " analytic ", an, " fd ", fd);
      CHECK(std::abs(an - fd) / denom < tol);
    }
  }
}

Tensor<double> randn(std::vector<int> dims, uint64_t seed, double scale = 1.0) {
  SplitMix64 rng(seed);
  return Tensor<double>::randn(std::move(dims), rng, scale);
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.dim(0) == 2);
  t.at(1, 2) = 5.0f;
  CHECK(t[5] == 5.0f);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}), std::invalid_argument);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
  CHECK(t.shape_str() == "[2,3]");
}

TEST_CASE("elementwise forward values") {
  Graph<double> g;
  Var a = g.leaf(Tensor<double>({3}, {1.0, -2.0, 3.0}), false);
  Var b = g.leaf(Tensor<double>({3}, {2.0, 0.5, -1.0}), false);
  CHECK(g.value(g.add(a, b))[1] == -1.5);
  CHECK(g.value(g.mul(a, b))[2] == -3.0);
  CHECK(g.value(g.relu(a))[1] == 0.0);
  CHECK(g.value(g.sigmoid(g.constant(Tensor<double>({1}, {0.0}))))[0] == 0.5);
  CHECK(g.value(g.clamp(a, -1.0, 1.0))[1] == -1.0);
  CHECK(g.value(g.sum_all(a))[0] == 2.0);
  CHECK(g.value(g.rsub_scalar(1.0, a))[0] == 0.0);
}

TEST_CASE("backward: arithmetic, reductions, shapes") {
  auto mixed = [](Graph<double>& g, std::vector<Var>& v) {
    Var s = g.mul(g.add(v[0], v[1], 0.5), g.sub(v[0], v[1]));
    Var d = g.div(s, g.add_scalar(g.square(v[1]), 2.0));
    return g.mean_all(d);
  };
  check_grad(mixed, {randn({3, 4}, 1), randn({3, 4}, 2)});

  check_grad([](Graph<double>& g, std::vector<Var>& v) { return g.sum_all(g.relu(v[0])); },
             {randn({4, 4}, 3)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) { return g.sum_all(g.log(g.sigmoid(v[0]))); },
      {randn({2, 5}, 4)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.mean_all(g.mul(g.sum_rows(v[0]), g.sum_rows(v[0])));
      },
      {randn({3, 5}, 5)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        Var r = g.reshape(v[0], {2, 6});
        Var t = g.transpose(r);
        return g.sum_all(g.mul(t, t));
      },
      {randn({3, 4}, 6)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        Var s = g.slice_rows(v[0], 1, 3);
        Var c = g.slice_cols(s, 0, 2);
        return g.sum_all(g.square(c));
      },
      {randn({4, 4}, 7)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        Var c = g.concat_cols({v[0], v[1]});
        return g.mean_all(g.square(c));
      },
      {randn({3, 2}, 8), randn({3, 4}, 9)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        Var gr = g.gather_rows(v[0], {2, 0, 2});
        return g.sum_all(g.square(gr));
      },
      {randn({3, 3}, 10)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        Var p = g.pick_per_row(v[0], {1, 0, 2});
        return g.sum_all(g.square(p));
      },
      {randn({3, 3}, 11)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        Var s = g.scale_by(v[0], g.sum_all(v[1]), true);
        return g.mean_all(g.square(s));
      },
      {randn({2, 3}, 12), randn({2, 2}, 13, 0.3)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.sqrt_scalar(g.add_scalar(g.sum_all(g.square(v[0])), 1.0));
      },
      {randn({5}, 14)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.sum_all(g.square(g.clamp(v[0], -0.5, 0.5)));
      },
      {randn({8}, 15)});
}

TEST_CASE("backward: matmul and linear") {
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.sum_all(g.square(g.matmul(v[0], v[1])));
      },
      {randn({3, 4}, 20), randn({4, 2}, 21)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.mean_all(g.square(g.linear(v[0], v[1], v[2])));
      },
      {randn({3, 4}, 22), randn({5, 4}, 23), randn({5}, 24)});
}

TEST_CASE("backward: conv2d stride and padding") {
  for (int stride : {1, 2}) {
    check_grad(
        [stride](Graph<double>& g, std::vector<Var>& v) {
          return g.sum_all(g.square(g.conv2d(v[0], v[1], v[2], stride, 1)));
        },
        {randn({2, 6, 6}, 30), randn({3, 2, 3, 3}, 31), randn({3}, 32)}, 1e-5);
  }
  // 1x1 conv
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.sum_all(g.square(g.conv2d(v[0], v[1], v[2], 1, 0)));
      },
      {randn({3, 4, 4}, 33), randn({2, 3, 1, 1}, 34), randn({2}, 35)});
}

TEST_CASE("conv2d value against direct computation") {
  Graph<double> g;
  Tensor<double> x = randn({1, 4, 4}, 40);
  Tensor<double> w = randn({1, 1, 3, 3}, 41);
  Tensor<double> b({1}, {0.25});
  Var y = g.conv2d(g.constant(x), g.constant(w), g.constant(b), 1, 1);
  // direct at output (1,2)
  double acc = 0.25;
  for (int ky = 0; ky < 3; ++ky)
    for (int kx = 0; kx < 3; ++kx) {
      int iy = 1 + ky - 1, ix = 2 + kx - 1;
      if (iy >= 0 && iy < 4 && ix >= 0 && ix < 4)
        acc += x[iy * 4 + ix] * w[ky * 3 + kx];
    }
  CHECK(g.value(y)[1 * 4 + 2] == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("backward: upsampling") {
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.sum_all(g.square(g.upsample_nearest2x(v[0])));
      },
      {randn({2, 3, 3}, 50)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.sum_all(g.square(g.upsample_bilinear2x(v[0])));
      },
      {randn({2, 4, 4}, 51)});
}

TEST_CASE("upsample_bilinear2x values: half-pixel alignment") {
  Graph<double> g;
  // 1x2 map [0, 1] -> outputs at src coords -0.25, 0.25, 0.75, 1.25 (clamped)
  Var y = g.upsample_bilinear2x(g.constant(Tensor<double>({1, 1, 2}, {0.0, 1.0})));
  const auto& v = g.value(y);
  CHECK(v.dims() == std::vector<int>{1, 2, 4});
  CHECK(v[0] == doctest::Approx(0.0));
  CHECK(v[1] == doctest::Approx(0.25));
  CHECK(v[2] == doctest::Approx(0.75));
  CHECK(v[3] == doctest::Approx(1.0));
}

TEST_CASE("backward: normalizers") {
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        return g.mean_all(g.square(g.layer_norm(v[0], v[1], v[2])));
      },
      {randn({3, 6}, 60), randn({6}, 61, 0.5), randn({6}, 62, 0.5)}, 1e-5);
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        Var s = g.softmax_rows(v[0]);
        return g.sum_all(g.mul(s, g.constant(randn({3, 4}, 63))));
      },
      {randn({3, 4}, 64)});
  check_grad(
      [](Graph<double>& g, std::vector<Var>& v) {
        Var s = g.log_softmax_rows(v[0]);
        return g.sum_all(g.mul(s, g.constant(randn({3, 4}, 65))));
      },
      {randn({3, 4}, 66)});
}

TEST_CASE("softmax rows sum to one and match log_softmax") {
  Graph<double> g;
  Tensor<double> x = randn({4, 7}, 70, 3.0);
  Var s = g.softmax_rows(g.constant(x));
  Var ls = g.log_softmax_rows(g.constant(x));
  for (int r = 0; r < 4; ++r) {
    double acc = 0;
    for (int c = 0; c < 7; ++c) {
      acc += g.value(s).at(r, c);
      CHECK(std::log(g.value(s).at(r, c)) == doctest::Approx(g.value(ls).at(r, c)).epsilon(1e-9));
    }
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("no-grad graphs carry no backward state") {
  Graph<float> g;
  g.recording = false;
  Var a = g.leaf(Tensor<float>({2, 2}, {1, 2, 3, 4}), true);  // downgraded by recording=false
  Var b = g.matmul(a, a);
  CHECK_FALSE(g.requires_grad(a));
  CHECK_FALSE(g.requires_grad(b));
}

TEST_CASE("backward accumulates over shared subexpressions") {
  Graph<double> g;
  Var x = g.leaf(Tensor<double>({1}, {3.0}), true);
  Var y = g.add(g.mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
  g.backward(y);
  CHECK(g.grad(x)[0] == doctest::Approx(7.0));
}
