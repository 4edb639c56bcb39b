#include "revnet/audit.hpp"

#include <algorithm>
#include <cmath>

namespace revnet {

namespace ro = revnet::ops;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REVNET_CHECK(a.shape() == b.shape(), "audit: output shape mismatch");
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

// deviation of op under one random (input, params, rotation) draw
template <typename Fn>
double equivariance_trial(Rng& rng, int n, int c, Fn&& op) {
  Tensor x = Tensor::randn({n, c, 3}, rng);
  Rotation r = random_rotation(rng);
  Tensor lhs = op(rotate_rows(x, r));
  Tensor rhs = rotate_rows(op(x), r);
  return max_abs_diff(lhs, rhs);
}

}  // namespace

std::vector<AuditCheck> layer_equivariance_suite(int trials,
                                                 std::uint64_t seed) {
  Rng rng(seed);
  std::vector<AuditCheck> checks;
  auto run = [&](const std::string& name, double spec_tol, auto&& trial_fn) {
    AuditCheck c{name, 0.0, spec_tol};
    for (int t = 0; t < trials; ++t)
      c.max_deviation = std::max(c.max_deviation, trial_fn());
    checks.push_back(std::move(c));
  };

  run("vn_linear", 1e-8, [&] {
    const int n = 2 + static_cast<int>(rng.uniform_int(4));
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    const int co = 2 + static_cast<int>(rng.uniform_int(6));
    VNLinear lin(c, co, false, rng);
    return equivariance_trial(rng, n, c,
                              [&](const Tensor& x) { return lin.forward(x); });
  });
  run("vn_linear_bias", 1e-8, [&] {
    const int n = 2 + static_cast<int>(rng.uniform_int(4));
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    const int co = 2 + static_cast<int>(rng.uniform_int(6));
    VNLinear lin(c, co, true, rng);
    Tensor b = lin.bias;
    b.leaf_values() = Tensor::randn({co, 3}, rng).values();
    return equivariance_trial(rng, n, c,
                              [&](const Tensor& x) { return lin.forward(x); });
  });
  run("vn_relu", 1e-8, [&] {
    const int n = 2 + static_cast<int>(rng.uniform_int(4));
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    VNReLU relu(c, rng);
    return equivariance_trial(rng, n, c,
                              [&](const Tensor& x) { return relu.forward(x); });
  });
  run("vn_mean_pool", 1e-8, [&] {
    const int n = 2 + static_cast<int>(rng.uniform_int(5));
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    return equivariance_trial(rng, n, c,
                              [&](const Tensor& x) { return vn_mean_pool(x); });
  });
  run("vn_max_pool", 1e-8, [&] {
    const int n = 2 + static_cast<int>(rng.uniform_int(5));
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    VNMaxPool pool(c, rng);
    return equivariance_trial(rng, n, c,
                              [&](const Tensor& x) { return pool.forward(x); });
  });
  run("vn_batch_norm", 1e-8, [&] {
    const int n = 2 + static_cast<int>(rng.uniform_int(5));
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    VNBatchNorm bn(c);
    bn.gamma.leaf_values() = Tensor::randn({c}, rng).values();
    return equivariance_trial(
        rng, n, c, [&](const Tensor& x) { return bn.forward(x, true); });
  });
  run("vn_layer_norm_2norm", 1e-8, [&] {
    const int n = 1 + static_cast<int>(rng.uniform_int(5));
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    VNLayerNorm2 ln(c);
    ln.scale.leaf_values() = Tensor::randn({c}, rng).values();
    return equivariance_trial(rng, n, c,
                              [&](const Tensor& x) { return ln.forward(x); });
  });
  run("vn_zca_layer_norm", 1e-6, [&] {
    const int n = 2 + static_cast<int>(rng.uniform_int(5));
    const int c = 3 + static_cast<int>(rng.uniform_int(5));
    VNZCANorm zca(c);
    zca.alpha.leaf_values() = Tensor::randn({c}, rng).values();
    return equivariance_trial(rng, n, c,
                              [&](const Tensor& x) { return zca.forward(x); });
  });
  run("vn_mlp", 1e-8, [&] {
    const int n = 2 + static_cast<int>(rng.uniform_int(4));
    const int c = 3 + static_cast<int>(rng.uniform_int(4));
    const int h = 3 + static_cast<int>(rng.uniform_int(5));
    VNMLP mlp(c, {{h, true, true, true}, {c, false, false, false}}, rng,
              /*residual=*/true);
    return equivariance_trial(rng, n, c,
                              [&](const Tensor& x) { return mlp.forward(x); });
  });
  run("vn_edge_conv", 1e-8, [&] {
    const int n = 6 + static_cast<int>(rng.uniform_int(6));
    const int c = 2 + static_cast<int>(rng.uniform_int(4));
    const int k = 2 + static_cast<int>(rng.uniform_int(3));
    VNEdgeConv conv(c, c + 1, k, rng);
    Tensor pts = Tensor::randn({n, 3}, rng);
    Tensor feats = Tensor::randn({n, c, 3}, rng);
    Rotation r = random_rotation(rng);
    Tensor lhs = conv.forward_features(rotate_rows(pts, r),
                                       rotate_rows(feats, r));
    Tensor rhs = rotate_rows(conv.forward_features(pts, feats), r);
    return max_abs_diff(lhs, rhs);
  });
  run("cwsa_attend", 1e-8, [&] {
    const int c = 2 * (2 + static_cast<int>(rng.uniform_int(3)));
    const int m = 2 + static_cast<int>(rng.uniform_int(3));
    const int n = 2 + static_cast<int>(rng.uniform_int(4));
    MultiHeadCWSA attn(c, 2, rng);
    Tensor q = Tensor::randn({m, c, 3}, rng);
    Tensor k = Tensor::randn({n, c, 3}, rng);
    Tensor v = Tensor::randn({n, c, 3}, rng);
    Rotation r = random_rotation(rng);
    Tensor lhs = attn.attend(rotate_rows(q, r), rotate_rows(k, r),
                             rotate_rows(v, r));
    Tensor rhs = rotate_rows(attn.attend(q, k, v), r);
    return max_abs_diff(lhs, rhs);
  });
  return checks;
}

std::vector<AuditCheck> invariance_suite(int trials, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<AuditCheck> checks;

  AuditCheck inv_x{"vn_invariant_xinv", 0.0, 1e-8};
  AuditCheck inv_t{"vn_invariant_frame", 0.0, 1e-8};
  for (int t = 0; t < trials; ++t) {
    const int c = 3 + static_cast<int>(rng.uniform_int(5));
    VNInv inv(c, c, /*orthonormalize=*/true, rng);
    Tensor x = Tensor::randn({c, 3}, rng);
    Rotation r = random_rotation(rng);
    auto [xi, ti] = inv.forward(x);
    auto [xr, tr] = inv.forward(rotate_rows(x, r));
    inv_x.max_deviation = std::max(inv_x.max_deviation, max_abs_diff(xr, xi));
    inv_t.max_deviation =
        std::max(inv_t.max_deviation, max_abs_diff(tr, rotate_rows(ti, r)));
  }
  checks.push_back(inv_x);
  checks.push_back(inv_t);

  AuditCheck sc{"cwsa_scores", 0.0, 1e-8};
  for (int t = 0; t < trials; ++t) {
    const int c = 2 * (2 + static_cast<int>(rng.uniform_int(3)));
    const int n = 2 + static_cast<int>(rng.uniform_int(4));
    MultiHeadCWSA attn(c, 2, rng);
    Tensor q = Tensor::randn({c, 3}, rng);
    Tensor k = Tensor::randn({n, c, 3}, rng);
    Rotation r = random_rotation(rng);
    Tensor s0 = attn.scores(q, k);
    Tensor s1 = attn.scores(rotate_rows(q, r), rotate_rows(k, r));
    sc.max_deviation = std::max(sc.max_deviation, max_abs_diff(s1, s0));
  }
  checks.push_back(sc);
  return checks;
}

AuditCheck bias_equivariance_check(int trials, std::uint64_t seed) {
  Rng rng(seed);
  AuditCheck check{"vn_bias", 0.0, 1e-10};
  for (int t = 0; t < trials; ++t) {
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    const int co = 2 + static_cast<int>(rng.uniform_int(6));
    VNLinear lin(c, co, true, rng);
    Tensor w = lin.weight;
    std::fill(w.leaf_values().begin(), w.leaf_values().end(), 0.0);
    Tensor b = lin.bias;
    b.leaf_values() = Tensor::randn({co, 3}, rng).values();
    const int n = 1 + static_cast<int>(rng.uniform_int(3));
    Tensor x = Tensor::randn({n, c, 3}, rng);
    Rotation r = random_rotation(rng);
    Tensor lhs = lin.forward(rotate_rows(x, r));
    Tensor rhs = rotate_rows(lin.forward(x), r);
    check.max_deviation = std::max(check.max_deviation, max_abs_diff(lhs, rhs));
  }
  return check;
}

AuditCheck end_to_end_equivariance_check(const ModelConfig& cfg,
                                         int cloud_size, int trials,
                                         std::uint64_t seed) {
  Rng rng(seed);
  AuditCheck check{"end_to_end", 0.0, 1e-6};
  REVNET_CHECK(cloud_size >= cfg.n_observed,
               "audit: cloud_size must cover n_observed");
  std::unique_ptr<REVNet> model;
  for (int t = 0; t < trials; ++t) {
    if (t % 25 == 0)
      model = std::make_unique<REVNet>(cfg, rng.fork_seed());
    PointCloud cloud =
        PointCloud::from_tensor(Tensor::randn({cloud_size, 3}, rng));
    Rotation r = random_rotation(rng);
    auto [anchors, fine] = model->forward(cloud);
    auto [anchors_r, fine_r] = model->forward(rotated(cloud, r));
    const double denom =
        std::max({max_abs(fine.points), max_abs(anchors.positions),
                  max_abs(anchors.features)}) +
        1e-12;
    const double dev = std::max(
        {max_abs_diff(fine_r.points, rotate_rows(fine.points, r)),
         max_abs_diff(anchors_r.positions,
                      rotate_rows(anchors.positions, r)),
         max_abs_diff(anchors_r.features, rotate_rows(anchors.features, r))});
    check.max_deviation = std::max(check.max_deviation, dev / denom);
  }
  return check;
}

}  // namespace revnet
