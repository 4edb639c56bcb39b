#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "revnet/audit.hpp"
#include "revnet/grad_check.hpp"
#include "revnet/vn_layers.hpp"

using namespace revnet;
namespace ro = revnet::ops;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i)
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  return worst;
}

double max_abs(const Tensor& a) {
  double worst = 0.0;
  for (double v : a.values()) worst = std::max(worst, std::abs(v));
  return worst;
}

Tensor identity_matrix(int n) {
  std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
  return Tensor::from({n, n}, std::move(v));
}

Tensor readout(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = Tensor::randn(out.shape(), rng);
  return ro::sum_all(ro::mul(out, w));
}

}  // namespace

TEST_CASE("vn_linear with identity weights is the identity") {
  Rng rng(1);
  VNLinear lin(4, 4, false, rng);
  lin.weight.leaf_values() = identity_matrix(4).values();
  Tensor x = Tensor::randn({4, 3}, rng);
  CHECK(max_abs_diff(lin.forward(x), x) == 0.0);
}

TEST_CASE("vn_linear bias term vanishes on a null feature") {
  Rng rng(2);
  VNLinear lin(4, 5, true, rng);
  lin.bias.leaf_values() = Tensor::randn({5, 3}, rng).values();
  Tensor zero = Tensor::zeros({4, 3});
  CHECK(max_abs(lin.forward(zero)) == 0.0);
}

TEST_CASE("vn_linear matches a hand matmul") {
  Rng rng(3);
  VNLinear lin(4, 2, false, rng);
  Tensor x = Tensor::randn({4, 3}, rng);
  Tensor out = lin.forward(x);
  for (int i = 0; i < 2; ++i)
    for (int t = 0; t < 3; ++t) {
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) acc += lin.weight.at({i, j}) * x.at({j, t});
      CHECK(out.at({i, t}) == doctest::Approx(acc).epsilon(1e-12));
    }
  CHECK_THROWS(lin.forward(Tensor::zeros({5, 3})));  // shape mismatch
}

TEST_CASE("vn_relu branch cases") {
  Tensor k = Tensor::from({1, 3}, {0.0, 0.0, 2.0});
  // aligned: unchanged
  Tensor x1 = Tensor::from({1, 3}, {0.0, 0.0, 2.0});
  CHECK(max_abs_diff(vn_relu_project(x1, k), x1) == 0.0);
  // anti-aligned unit vector projects to zero
  Tensor x2 = Tensor::from({1, 3}, {0.0, 0.0, -1.0});
  CHECK(max_abs(vn_relu_project(x2, k)) <= 1e-15);
  // orthogonal: unchanged
  Tensor x3 = Tensor::from({1, 3}, {1.5, -0.5, 0.0});
  CHECK(max_abs_diff(vn_relu_project(x3, k), x3) <= 1e-15);
  // null direction passes through
  Tensor k0 = Tensor::from({1, 3}, {0.0, 0.0, 0.0});
  CHECK(max_abs_diff(vn_relu_project(x2, k0), x2) == 0.0);
}

TEST_CASE("vn_relu projection is idempotent for fixed directions") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = Tensor::randn({5, 3}, rng);
    Tensor k = Tensor::randn({5, 3}, rng);
    Tensor once = vn_relu_project(x, k);
    Tensor twice = vn_relu_project(once, k);
    CHECK(max_abs_diff(once, twice) <= 1e-12);
  }
}

TEST_CASE("vn_mean_pool basics") {
  Rng rng(5);
  Tensor x = Tensor::randn({1, 4, 3}, rng);
  CHECK(max_abs_diff(vn_mean_pool(x), ro::reshape(x, {4, 3})) == 0.0);

  Tensor pair = ro::concat_dim0({x, ro::scale(x, -1.0)});
  CHECK(max_abs(vn_mean_pool(pair)) == 0.0);

  Tensor xs = Tensor::randn({3, 4, 3}, rng);
  Tensor manual = ro::scale(
      ro::add(ro::add(ro::reshape(ro::slice_dim0(xs, 0, 1), {4, 3}),
                      ro::reshape(ro::slice_dim0(xs, 1, 1), {4, 3})),
              ro::reshape(ro::slice_dim0(xs, 2, 1), {4, 3})),
      1.0 / 3.0);
  CHECK(max_abs_diff(vn_mean_pool(xs), manual) <= 1e-15);

  CHECK_THROWS(vn_mean_pool(Tensor::zeros({0, 4, 3})));
}

TEST_CASE("vn_max_pool selects by alignment with ties to the lowest index") {
  Tensor dirs = Tensor::from({1, 3}, {0.0, 0.0, 1.0});
  Tensor xs = Tensor::from({2, 1, 3}, {0, 0, -1, 0, 0, 1});
  Tensor out = vn_max_pool_select(xs, dirs);
  CHECK(out.at({0, 2}) == doctest::Approx(1.0));

  // single element returns itself
  Rng rng(6);
  Tensor one = Tensor::randn({1, 3, 3}, rng);
  VNMaxPool pool(3, rng);
  CHECK(max_abs_diff(pool.forward(one), ro::reshape(one, {3, 3})) == 0.0);

  // brute-force oracle on random sets
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4, c = 5;
    Tensor set = Tensor::randn({n, c, 3}, rng);
    Tensor d = Tensor::randn({c, 3}, rng);
    Tensor got = vn_max_pool_select(set, d);
    for (int ch = 0; ch < c; ++ch) {
      int best = 0;
      double best_dot = -1e300;
      for (int p = 0; p < n; ++p) {
        double dot = 0.0;
        for (int t = 0; t < 3; ++t) dot += set.at({p, ch, t}) * d.at({ch, t});
        if (dot > best_dot) {
          best_dot = dot;
          best = p;
        }
      }
      for (int t = 0; t < 3; ++t)
        CHECK(got.at({ch, t}) == doctest::Approx(set.at({best, ch, t})));
    }
  }
}

TEST_CASE("vn_batch_norm drives mean channel norms to one") {
  Rng rng(7);
  // unit-norm vectors stay unit up to the scale parameter
  {
    VNBatchNorm bn(2);
    std::vector<double> data;
    for (int p = 0; p < 3; ++p)
      for (int c = 0; c < 2; ++c) {
        Tensor v = Tensor::randn({1, 3}, rng);
        const double n = std::sqrt(v.at({0, 0}) * v.at({0, 0}) +
                                   v.at({0, 1}) * v.at({0, 1}) +
                                   v.at({0, 2}) * v.at({0, 2}));
        for (int t = 0; t < 3; ++t) data.push_back(v.at({0, t}) / n);
      }
    Tensor xs = Tensor::from({3, 2, 3}, data);
    Tensor out = bn.forward(xs, true);
    Tensor norms = ro::row_norms(out);
    for (double v : norms.values())
      CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  }
  // batch of one normalizes by its own statistics
  {
    VNBatchNorm bn(3);
    Tensor xs = Tensor::randn({1, 3, 3}, rng);
    Tensor out = bn.forward(xs, true);
    for (double v : ro::row_norms(out).values())
      CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  }
  // random batch: per-channel mean norm equals 1 within 1e-9 at scale 1
  {
    const int n = 6, c = 4;
    VNBatchNorm bn(c);
    Tensor xs = Tensor::randn({n, c, 3}, rng);
    Tensor out = bn.forward(xs, true);
    Tensor norms = ro::reshape(ro::row_norms(out), {n, c});
    for (int ch = 0; ch < c; ++ch) {
      double mean = 0.0;
      for (int p = 0; p < n; ++p) mean += norms.at({p, ch});
      CHECK(mean / n == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("vn_layer_norm_2norm normalizes the RMS of channel norms") {
  Rng rng(8);
  // all channels sharing one norm divide by it
  {
    VNLayerNorm2 ln(3);
    std::vector<double> data;
    const double r = 2.5;
    for (int c = 0; c < 3; ++c) {
      Tensor v = Tensor::randn({1, 3}, rng);
      const double n = std::sqrt(v.at({0, 0}) * v.at({0, 0}) +
                                 v.at({0, 1}) * v.at({0, 1}) +
                                 v.at({0, 2}) * v.at({0, 2}));
      for (int t = 0; t < 3; ++t) data.push_back(v.at({0, t}) * r / n);
    }
    Tensor x = Tensor::from({3, 3}, data);
    Tensor out = ln.forward(x);
    CHECK(max_abs_diff(out, ro::scale(x, 1.0 / r)) <= 1e-12);
  }
  // zero feature maps to zero
  {
    VNLayerNorm2 ln(4);
    CHECK(max_abs(ln.forward(Tensor::zeros({4, 3}))) == 0.0);
  }
  // RMS of output channel norms is 1
  {
    const int c = 5;
    VNLayerNorm2 ln(c);
    Tensor x = Tensor::randn({c, 3}, rng);
    Tensor out = ln.forward(x);
    double rms = 0.0;
    for (double v : ro::row_norms(out).values()) rms += v * v;
    rms = std::sqrt(rms / c);
    CHECK(rms == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("vn_zca_layer_norm whitens and handles degenerate input") {
  Rng rng(9);
  // re-whitening already-white data moves it only through the eigenvalue
  // floor (1e-5 shrinks unit variances by about 5e-6)
  {
    const int n = 50, c = 4;
    VNZCANorm zca(c);
    Tensor xs = Tensor::randn({n, c, 3}, rng);
    Tensor white = zca.forward(xs);
    Tensor again = zca.forward(white);
    CHECK(max_abs_diff(again, white) <= 1e-4);
  }
  // identical vectors collapse to (near) zero
  {
    VNZCANorm zca(1);
    Tensor one = Tensor::randn({1, 1, 3}, rng);
    Tensor rep = ro::gather_dim0(one, {0, 0, 0, 0});  // {4,1,3}
    Tensor out = zca.forward(rep);
    CHECK(max_abs(out) <= 1e-3);  // eps-regularized null covariance
  }
  // whitening property: output covariance ~ I, mean ~ 0
  {
    const int n = 20, c = 4;
    VNZCANorm zca(c);
    Tensor xs = Tensor::randn({n, c, 3}, rng);
    Tensor out = zca.forward(xs);
    const int rows = n * c;
    double mu[3] = {0, 0, 0};
    for (int r = 0; r < rows; ++r)
      for (int t = 0; t < 3; ++t)
        mu[t] += out.values()[static_cast<size_t>(r) * 3 + t] / rows;
    for (double m : mu) CHECK(std::abs(m) <= 1e-9);
    double cov[9] = {0};
    for (int r = 0; r < rows; ++r)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          cov[i * 3 + j] +=
              (out.values()[static_cast<size_t>(r) * 3 + i] - mu[i]) *
              (out.values()[static_cast<size_t>(r) * 3 + j] - mu[j]) / rows;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(std::abs(cov[i * 3 + j] - (i == j ? 1.0 : 0.0)) <= 1e-4);
  }
  // too few vectors
  {
    VNZCANorm zca(2);
    CHECK_THROWS(zca.forward(Tensor::zeros({1, 2, 3})));
  }
}

TEST_CASE("vn_invariant self-frame, invariance, and round trip") {
  Rng rng(10);
  // identity transform map on an orthonormal feature gives X X^T = I
  {
    VNInv inv(3, 0, true, rng);
    inv.mlp.stages[0].linear.weight.leaf_values() = identity_matrix(3).values();
    Rotation r = random_rotation(rng);
    auto [xinv, t] = inv.forward(r.matrix);
    CHECK(max_abs_diff(xinv, identity_matrix(3)) <= 1e-12);
  }
  // invariance and frame equivariance under rotation
  for (int trial = 0; trial < 30; ++trial) {
    VNInv inv(5, 5, true, rng);
    Tensor x = Tensor::randn({5, 3}, rng);
    Rotation r = random_rotation(rng);
    auto [xi, ti] = inv.forward(x);
    auto [xr, tr] = inv.forward(rotate_rows(x, r));
    CHECK(max_abs_diff(xr, xi) <= 1e-8);
    CHECK(max_abs_diff(tr, rotate_rows(ti, r)) <= 1e-8);
    // round trip through the orthonormal frame recovers the input
    Tensor back = ro::right_mul_shared(xi, ti);
    CHECK(max_abs_diff(back, x) <= 1e-8);
  }
  // rank-deficient transform is perturbed and flagged
  {
    VNInv inv(4, 0, true, rng);
    std::fill(inv.mlp.stages[0].linear.weight.leaf_values().begin(),
              inv.mlp.stages[0].linear.weight.leaf_values().end(), 0.0);
    Tensor x = Tensor::randn({4, 3}, rng);
    auto [xinv, t] = inv.forward(x);
    CHECK(inv.degenerate_count.load() == 1);
    CHECK(xinv.all_finite());
    // frame still orthonormal
    Tensor ttt = ro::matmul(t, ro::transpose(t));
    CHECK(max_abs_diff(ttt, identity_matrix(3)) <= 1e-9);
  }
}

TEST_CASE("vn_mlp composition and residual rules") {
  Rng rng(11);
  // empty spec is the identity
  VNMLP empty(4, {}, rng);
  Tensor x = Tensor::randn({2, 4, 3}, rng);
  CHECK(max_abs_diff(empty.forward(x), x) == 0.0);

  // single identity linear stage
  VNMLP ident(4, {{4, false, false, false}}, rng);
  ident.stages[0].linear.weight.leaf_values() = identity_matrix(4).values();
  CHECK(max_abs_diff(ident.forward(x), x) == 0.0);

  // two-stage spec equals manual composition
  VNMLP two(4, {{5, true, true, true}, {3, false, false, false}}, rng);
  Tensor manual = two.stages[0].linear.forward(x);
  manual = two.stages[0].norm->forward(manual);
  manual = two.stages[0].relu->forward(manual);
  manual = two.stages[1].linear.forward(manual);
  CHECK(max_abs_diff(two.forward(x), manual) == 0.0);

  // residual with mismatched channels is rejected
  CHECK_THROWS(VNMLP(4, {{5, false, false, false}}, rng, true));
}

TEST_CASE("vn_edge_conv degenerate graphs") {
  Rng rng(12);
  VNEdgeConv conv(0, 6, 3, rng);
  // single point: the only edge is (p, 0)
  Tensor p = Tensor::randn({1, 3}, rng);
  Tensor out = conv.forward_points(p, p);
  Tensor edge =
      ro::concat_dim1(ro::reshape(p, {1, 1, 3}), Tensor::zeros({1, 1, 3}));
  CHECK(max_abs_diff(out, conv.mlp.forward(edge)) <= 1e-14);

  // coincident points produce identical outputs
  Tensor same = ro::gather_dim0(p, {0, 0, 0, 0});
  Tensor out4 = conv.forward_points(same, same);
  for (int i = 1; i < 4; ++i)
    CHECK(max_abs_diff(ro::slice_dim0(out4, i, 1),
                       ro::slice_dim0(out4, 0, 1)) <= 1e-14);
}

TEST_CASE("layer equivariance suite stays within spec tolerances") {
  for (const AuditCheck& c : layer_equivariance_suite(30, 2024)) {
    INFO(c.name << " deviation " << c.max_deviation);
    CHECK(c.max_deviation <= c.spec_tol);
  }
  for (const AuditCheck& c : invariance_suite(30, 2025)) {
    INFO(c.name << " deviation " << c.max_deviation);
    CHECK(c.max_deviation <= c.spec_tol);
  }
  const AuditCheck bias = bias_equivariance_check(100, 2026);
  CHECK(bias.max_deviation <= 1e-10);
}

TEST_CASE("every layer passes gradient checks at 1e-4") {
  Rng rng(13);
  auto expect_pass = [](const GradCheckReport& r, const char* name) {
    INFO(name << ": " << r.summary());
    CHECK(r.pass);
  };

  {
    VNLinear lin(3, 4, true, rng);
    lin.bias.leaf_values() = Tensor::randn({4, 3}, rng, 0.5).values();
    Tensor x = Tensor::randn({2, 3, 3}, rng, 1.0, true);
    auto f = [&] { return readout(lin.forward(x), 42); };
    expect_pass(grad_check(f,
                           {{"x", x},
                            {"W", lin.weight},
                            {"WB", lin.bias_map},
                            {"B", lin.bias}},
                           1e-4),
                "vn_linear_bias");
  }
  {
    VNReLU relu(4, rng);
    Tensor x = Tensor::randn({2, 4, 3}, rng, 1.0, true);
    auto f = [&] { return readout(relu.forward(x), 43); };
    expect_pass(grad_check(f, {{"x", x}, {"K", relu.dir_map}}, 1e-4),
                "vn_relu");
  }
  {
    Tensor xs = Tensor::randn({3, 4, 3}, rng, 1.0, true);
    auto f = [&] { return readout(vn_mean_pool(xs), 44); };
    expect_pass(grad_check(f, {{"xs", xs}}, 1e-4), "vn_mean_pool");
  }
  {
    VNMaxPool pool(3, rng);
    Tensor xs = Tensor::randn({4, 3, 3}, rng, 1.0, true);
    auto f = [&] { return readout(pool.forward(xs), 45); };
    expect_pass(grad_check(f, {{"xs", xs}}, 1e-4), "vn_max_pool");
  }
  {
    VNBatchNorm bn(3);
    Tensor xs = Tensor::randn({4, 3, 3}, rng, 1.0, true);
    bn.forward(xs, true);  // populate running stats once
    auto f = [&] { return readout(bn.forward(xs, false), 46); };
    expect_pass(grad_check(f, {{"xs", xs}, {"gamma", bn.gamma}}, 1e-4),
                "vn_batch_norm");
  }
  {
    VNLayerNorm2 ln(4);
    Tensor x = Tensor::randn({2, 4, 3}, rng, 1.0, true);
    auto f = [&] { return readout(ln.forward(x), 47); };
    expect_pass(grad_check(f, {{"x", x}, {"scale", ln.scale}}, 1e-4),
                "vn_layer_norm_2norm");
  }
  {
    // stop-gradient rule: finite differences probe the frozen-whitening
    // forward that the analytic gradient differentiates
    VNZCANorm zca(4);
    Tensor xs = Tensor::randn({3, 4, 3}, rng, 1.0, true);
    Tensor w = zca.whitening(xs);
    auto f = [&] { return readout(zca.forward_frozen(xs, w), 48); };
    expect_pass(grad_check(f, {{"xs", xs}, {"alpha", zca.alpha}}, 1e-4),
                "vn_zca_layer_norm");
  }
  {
    VNMLP mlp(3, {{4, true, true, true}, {3, false, false, false}}, rng, true);
    Tensor x = Tensor::randn({2, 3, 3}, rng, 1.0, true);
    Tensor h0 = mlp.stages[0].linear.forward(x);
    Tensor w0 = mlp.stages[0].norm->whitening(h0);
    auto f = [&] {
      Tensor h = mlp.stages[0].linear.forward(x);
      h = mlp.stages[0].norm->forward_frozen(h, w0);
      h = mlp.stages[0].relu->forward(h);
      h = mlp.stages[1].linear.forward(h);
      return readout(ro::add(h, x), 49);
    };
    ParamList params;
    mlp.collect(params, "mlp");
    params.emplace_back("x", x);
    expect_pass(grad_check(f, params, 1e-4), "vn_mlp");
  }
  {
    VNInv inv(4, 4, true, rng);
    Tensor x = Tensor::randn({4, 3}, rng, 1.0, true);
    auto f = [&] {
      auto [xi, t] = inv.forward(x);
      return readout(xi, 51);
    };
    ParamList params;
    inv.collect(params, "inv");
    params.emplace_back("x", x);
    expect_pass(grad_check(f, params, 1e-4), "vn_invariant");
  }
}
