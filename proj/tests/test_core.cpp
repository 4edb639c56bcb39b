#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "revnet/grad_check.hpp"
#include "revnet/ops.hpp"
#include "revnet/so3.hpp"

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

// random-weighted scalar readout so every output coordinate gets a distinct
// upstream gradient
Tensor readout(const Tensor& out, Rng& rng) {
  Tensor w = Tensor::randn(out.shape(), rng);
  return ro::sum_all(ro::mul(out, w));
}

}  // namespace

TEST_CASE("random_rotation is deterministic and lands in SO(3)") {
  const Rotation a = random_rotation(1234u);
  const Rotation b = random_rotation(1234u);
  CHECK(max_abs_diff(a.matrix, b.matrix) == 0.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    CHECK(random_rotation(seed).valid(1e-10));
}

TEST_CASE("random_rotation Haar mean of R00 vanishes") {
  Rng rng(7);
  double mean = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) mean += random_rotation(rng).matrix.at({0, 0});
  mean /= n;
  CHECK(std::abs(mean) < 0.05);
}

TEST_CASE("eig_sym3 diagonal and identity cases") {
  auto [u_id, l_id] = eig_sym3(Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  for (int i = 0; i < 3; ++i) CHECK(l_id.at({i}) == doctest::Approx(1.0));

  auto [u, l] = eig_sym3(Tensor::from({3, 3}, {4, 0, 0, 0, 1, 0, 0, 0, 0}));
  CHECK(l.at({0}) == doctest::Approx(4.0));
  CHECK(l.at({1}) == doctest::Approx(1.0));
  CHECK(l.at({2}) == doctest::Approx(0.0));
  // eigenvectors of a diagonal matrix form a signed permutation
  for (int c = 0; c < 3; ++c) {
    int nonzero = 0;
    for (int r = 0; r < 3; ++r)
      if (std::abs(u.at({r, c})) > 1e-9) {
        ++nonzero;
        CHECK(std::abs(std::abs(u.at({r, c})) - 1.0) < 1e-9);
      }
    CHECK(nonzero == 1);
  }
}

TEST_CASE("eig_sym3 reconstructs random symmetric matrices") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(9);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j <= i; ++j) {
        const double v = rng.gaussian();
        s[static_cast<size_t>(i) * 3 + j] = v;
        s[static_cast<size_t>(j) * 3 + i] = v;
      }
    const Tensor st = Tensor::from({3, 3}, s);
    auto [u, l] = eig_sym3(st);
    // orthonormal columns
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int r = 0; r < 3; ++r) dot += u.at({r, i}) * u.at({r, j});
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-12);
      }
    CHECK(l.at({0}) >= l.at({1}));
    CHECK(l.at({1}) >= l.at({2}));
    // reconstruction
    double worst = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int r = 0; r < 3; ++r) acc += u.at({i, r}) * l.at({r}) * u.at({j, r});
        worst = std::max(worst, std::abs(acc - st.at({i, j})));
      }
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("eig_sym3 rejects non-symmetric input") {
  CHECK_THROWS(eig_sym3(Tensor::from({3, 3}, {1, 2, 3, 0, 1, 0, 0, 0, 1})));
}

TEST_CASE("whitening transform commutes with rotation conjugation") {
  Rng rng(23);
  int accepted = 0;
  while (accepted < 100) {
    // distinct eigenvalues with gap >= 1e-3 via explicit spectrum
    const double l1 = 1.0 + rng.uniform();
    const double l2 = l1 - (1e-3 + rng.uniform());
    const double l3 = std::max(l2 - (1e-3 + rng.uniform()), 1e-4);
    if (l2 <= l3) continue;
    const Rotation basis = random_rotation(rng);
    std::vector<double> s(9, 0.0);
    const auto& q = basis.matrix.values();
    const double lam[3] = {l1, l2, l3};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k)
          s[static_cast<size_t>(i) * 3 + j] += q[static_cast<size_t>(i) * 3 + k] * lam[k] * q[static_cast<size_t>(j) * 3 + k];
    const Tensor sigma = Tensor::from({3, 3}, s);
    const Rotation r = random_rotation(rng);

    // conjugate sigma by r: sigma_r = R^T sigma R
    Tensor rt = ro::transpose(r.matrix);
    Tensor sigma_r = ro::matmul(ro::matmul(rt, sigma), r.matrix);
    Tensor w = whitening_transform(sigma, 1e-5);
    Tensor w_r = whitening_transform(sigma_r, 1e-5);
    Tensor expect = ro::matmul(ro::matmul(rt, w), r.matrix);
    CHECK(max_abs_diff(w_r, expect) <= 1e-7);
    ++accepted;
  }
}

TEST_CASE("backward of a linear readout matches the column-sum structure") {
  Rng rng(3);
  Tensor w = Tensor::randn({2, 4}, rng, 1.0, true);
  Tensor x = Tensor::randn({4, 3}, rng);
  GradMap g = backward(ro::sum_all(ro::matmul(w, x)));
  const auto gw = g.grad(w);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) {
      double expect = 0.0;
      for (int k = 0; k < 3; ++k) expect += x.at({j, k});
      CHECK(gw[static_cast<size_t>(i) * 4 + j] == doctest::Approx(expect));
    }
}

TEST_CASE("backward of the Euclidean norm at (3,4,0)") {
  Tensor x = Tensor::from({1, 3}, {3, 4, 0}, true);
  GradMap g = backward(ro::sum_all(ro::row_norms(x)));
  const auto gx = g.grad(x);
  CHECK(gx[0] == doctest::Approx(0.6));
  CHECK(gx[1] == doctest::Approx(0.8));
  CHECK(gx[2] == doctest::Approx(0.0));
}

TEST_CASE("backward is linear over losses") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor y = Tensor::randn({4, 2}, rng, 1.0, true);
    Tensor prod = ro::matmul(x, y);
    Tensor f = ro::sum_all(ro::square(prod));
    Tensor g = ro::mean_all(prod);
    const double a = rng.gaussian(), b = rng.gaussian();
    GradMap gf = backward(f);
    GradMap gg = backward(g);
    GradMap gc = backward(ro::add(ro::scale(f, a), ro::scale(g, b)));
    for (const Tensor& leaf : {x, y}) {
      const auto vf = gf.grad(leaf), vg = gg.grad(leaf), vc = gc.grad(leaf);
      for (size_t i = 0; i < vf.size(); ++i)
        CHECK(std::abs(vc[i] - (a * vf[i] + b * vg[i])) < 1e-10);
    }
  }
}

TEST_CASE("backward visits shared subgraphs exactly once") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y = ro::scale(x, 3.0);
  Tensor loss = ro::sum_all(ro::add(y, y));  // y reused
  GradMap g = backward(loss);
  // d/dx sum(3x + 3x) = 6
  CHECK(g.grad(x)[0] == doctest::Approx(6.0));
  CHECK(g.grad(x)[1] == doctest::Approx(6.0));
  CHECK(last_backward_visit_count() == 3);  // add, scale, sum
}

TEST_CASE("backward flags a non-finite loss") {
  Tensor zero = Tensor::from({}, {0.0}, true);
  Tensor bad = ro::reciprocal(zero);
  CHECK_THROWS(backward(bad));
}

TEST_CASE("disconnected parameters read as zero gradients") {
  Rng rng(9);
  Tensor used = Tensor::randn({3}, rng, 1.0, true);
  Tensor unused = Tensor::randn({3}, rng, 1.0, true);
  GradMap g = backward(ro::sum_all(used));
  CHECK_FALSE(g.has(unused));
  for (double v : g.grad(unused)) CHECK(v == 0.0);
}

TEST_CASE("grad_check accepts a constant and a quadratic form") {
  Rng rng(13);
  Tensor x = Tensor::randn({4}, rng, 1.0, true);
  auto constant = [] { return Tensor::scalar(2.5); };
  // constant: gradients identically zero at any tolerance
  GradCheckReport r0 = grad_check(constant, {{"x", x}}, 1e-12);
  CHECK(r0.pass);

  Tensor a = Tensor::randn({4, 4}, rng);
  auto quad = [&] {
    Tensor col = ro::reshape(x, {4, 1});
    return ro::sum_all(ro::mul(col, ro::matmul(a, col)));
  };
  GradCheckReport r1 = grad_check(quad, {{"x", x}}, 1e-7);
  CHECK(r1.pass);
  CHECK(r1.worst <= 1e-7);
}

TEST_CASE("finite differences validate every core op") {
  Rng rng(17);
  auto check = [&](const char* name, auto&& fn,
                   std::vector<std::pair<std::string, Tensor>> params) {
    GradCheckReport r = grad_check(fn, params, 1e-5);
    INFO(name << ": " << r.summary());
    CHECK(r.pass);
  };

  Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({3, 4}, rng, 1.0, true);
  Rng ro_rng(18);
  {
    Rng local(100);
    Tensor w = Tensor::randn({3, 4}, local);
    check("add+mul+sub", [&] {
      return ro::sum_all(ro::mul(ro::add(a, ro::sub(a, b)), w));
    }, {{"a", a}, {"b", b}});
  }
  {
    check("scalar chain", [&] {
      Tensor t = ro::add_scalar(ro::square(a), 1.5);
      return ro::mean_all(ro::sqrt_op(ro::reciprocal(t)));
    }, {{"a", a}});
  }
  {
    Tensor m1 = Tensor::randn({2, 3}, rng, 1.0, true);
    Tensor m2 = Tensor::randn({3, 5}, rng, 1.0, true);
    Rng local(101);
    Tensor w = Tensor::randn({2, 5}, local);
    check("matmul+transpose", [&] {
      return ro::sum_all(ro::mul(ro::matmul(m1, m2), w));
    }, {{"m1", m1}, {"m2", m2}});
    Tensor v = Tensor::randn({5}, rng, 1.0, true);
    check("add_rowvec", [&] {
      return ro::sum_all(ro::square(ro::add_rowvec(ro::matmul(m1, m2), v)));
    }, {{"v", v}, {"m1", m1}});
    check("sub_rowvec+transpose", [&] {
      Tensor t = ro::transpose(ro::matmul(m1, m2));  // {5,2}
      Tensor v2 = ro::reshape(ro::slice_dim0(ro::reshape(v, {5, 1}), 0, 2), {2});
      return ro::sum_all(ro::square(ro::sub_rowvec(t, v2)));
    }, {{"m1", m1}, {"v", v}});
  }
  {
    Tensor x = Tensor::randn({4, 3}, rng, 1.0, true);
    Tensor s = Tensor::randn({4}, rng, 1.0, true);
    check("row_norms+row_scale+row_dots", [&] {
      Tensor scaled = ro::row_scale(x, s);
      Tensor n = ro::row_norms(scaled);
      Tensor d = ro::row_dots(scaled, x);
      return ro::sum_all(ro::mul(n, d));
    }, {{"x", x}, {"s", s}});
  }
  {
    Tensor x = Tensor::randn({3, 2, 3}, rng, 1.0, true);
    Tensor s = Tensor::randn({3}, rng, 1.0, true);
    Tensor alpha = Tensor::randn({2}, rng, 1.0, true);
    Rng local(102);
    Tensor w = Tensor::randn({3}, local);
    check("point_scale+block_norms+channel_scale", [&] {
      Tensor y = ro::channel_scale(ro::point_scale(x, s), alpha);
      return ro::sum_all(ro::mul(ro::block_norms(y), w));
    }, {{"x", x}, {"s", s}, {"alpha", alpha}});
  }
  {
    Tensor x = Tensor::randn({5, 2, 3}, rng, 1.0, true);
    Rng local(103);
    Tensor w = Tensor::randn({4, 2, 3}, local);
    check("gather+slice+concat", [&] {
      Tensor g = ro::gather_dim0(x, {4, 0, 0, 2});
      Tensor s = ro::slice_dim0(ro::concat_dim0({g, x}), 1, 4);
      return ro::sum_all(ro::mul(s, w));
    }, {{"x", x}});
  }
  {
    Tensor x = Tensor::randn({6, 2, 3}, rng, 1.0, true);
    Rng local(104);
    Tensor w1 = Tensor::randn({3, 2, 3}, local);
    Tensor w2 = Tensor::randn({2, 3}, local);
    check("group_mean+mean_dim0+sum_dim0", [&] {
      Tensor gm = ro::group_mean(x, 2);
      Tensor t1 = ro::sum_all(ro::mul(gm, w1));
      Tensor t2 = ro::sum_all(ro::mul(ro::add(ro::mean_dim0(x), ro::sum_dim0(x)), w2));
      return ro::add(t1, t2);
    }, {{"x", x}});
  }
  {
    Tensor w = Tensor::randn({4, 2}, rng, 1.0, true);
    Tensor x = Tensor::randn({3, 2, 3}, rng, 1.0, true);
    Tensor m = Tensor::randn({3, 3}, rng, 1.0, true);
    Tensor t = Tensor::randn({3, 3, 3}, rng, 1.0, true);
    Rng local(105);
    Tensor r1 = Tensor::randn({3, 4, 3}, local);
    check("shared_left_matmul+right_mul_shared+point_right_matmul", [&] {
      Tensor y = ro::shared_left_matmul(w, x);          // {3,4,3}
      Tensor z = ro::right_mul_shared(y, m);            // {3,4,3}
      Tensor pr = ro::point_right_matmul(ro::slice_dim1(z, 0, 4), t, true);
      return ro::sum_all(ro::mul(pr, r1));
    }, {{"w", w}, {"x", x}, {"m", m}, {"t", t}});
  }
  {
    Tensor q = Tensor::randn({2, 3, 3}, rng, 1.0, true);
    Tensor k = Tensor::randn({4, 3, 3}, rng, 1.0, true);
    Tensor v = Tensor::randn({4, 3, 3}, rng, 1.0, true);
    check("pairwise_sub+softmax+aggregate", [&] {
      Tensor d = ro::pairwise_sub(q, k);                   // {8,3,3}
      Tensor sc = ro::reshape(ro::row_dots(d, d), {2, 4, 3});
      Tensor att = ro::softmax_dim1(ro::scale(sc, -0.5));
      return ro::sum_all(ro::square(ro::cwsa_aggregate(att, v)));
    }, {{"q", q}, {"k", k}, {"v", v}});
  }
  {
    Tensor x = Tensor::randn({4, 2}, rng, 1.0, true);
    check("relu+clamp_min", [&] {
      return ro::sum_all(ro::add(ro::relu(x), ro::clamp_min(x, 0.25)));
    }, {{"x", x}});
  }
  {
    Tensor p = Tensor::randn({5, 3}, rng, 1.0, true);
    Tensor q = Tensor::randn({7, 3}, rng, 1.0, true);
    check("chamfer_l1", [&] { return ro::chamfer_l1_op(p, q); },
          {{"p", p}, {"q", q}});
    check("chamfer_l2", [&] { return ro::chamfer_l2_op(p, q, true); },
          {{"p", p}, {"q", q}});
    check("chamfer_l2_onedir", [&] { return ro::chamfer_l2_op(p, q, false); },
          {{"p", p}, {"q", q}});
  }
}

TEST_CASE("ops stay finite on standard-normal inputs") {
  Rng rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor x = Tensor::randn({4, 3, 3}, rng);
    CHECK(ro::softmax_dim1(x).all_finite());
    CHECK(ro::row_norms(x).all_finite());
    CHECK(ro::block_norms(x).all_finite());
    CHECK(ro::mean_dim0(x).all_finite());
    CHECK(ro::reciprocal(ro::add_scalar(ro::square(x), 1.0)).all_finite());
  }
}
