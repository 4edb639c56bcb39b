#include "revnet/vn_layers.hpp"

#include <cmath>
#include <cstring>

#include "revnet/geometry.hpp"

namespace revnet {

namespace ro = revnet::ops;

Tensor as_set(const Tensor& x) {
  if (x.ndim() == 3) return x;
  REVNET_CHECK(x.ndim() == 2 && x.dim(1) == 3,
               "VN feature must be {C,3} or {n,C,3}, got " +
                   shape_str(x.shape()));
  return ro::reshape(x, {1, x.dim(0), 3});
}

namespace {

Tensor restore_rank(const Tensor& out, bool was_single) {
  if (!was_single) return out;
  return ro::reshape(out, {out.dim(1), out.dim(2)});
}

Tensor constant_vec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor::from({n}, std::move(v));
}

// out[c,:] = xs[idx[c], c, :]; gradient scatters into the selected vectors.
Tensor channel_gather(const Tensor& xs, const std::vector<int>& idx) {
  const int n = xs.dim(0), c = xs.dim(1), w = xs.dim(2);
  std::vector<double> out(static_cast<size_t>(c) * w);
  const auto& xv = xs.values();
  for (int ch = 0; ch < c; ++ch) {
    REVNET_CHECK(idx[ch] >= 0 && idx[ch] < n, "channel_gather: bad index");
    std::memcpy(out.data() + static_cast<size_t>(ch) * w,
                xv.data() + (static_cast<size_t>(idx[ch]) * c + ch) * w,
                static_cast<size_t>(w) * sizeof(double));
  }
  return Tensor::make_op(
      {c, w}, std::move(out), {xs},
      [xs, idx, c, w](const std::vector<double>& g, GradStore& gs) {
        auto& gx = gs.buf(xs.node(), xs.values().size());
        for (int ch = 0; ch < c; ++ch)
          for (int t = 0; t < w; ++t)
            gx[(static_cast<size_t>(idx[ch]) * c + ch) * w + t] +=
                g[static_cast<size_t>(ch) * w + t];
      });
}

}  // namespace

// ---- VNLinear ---------------------------------------------------------------

VNLinear::VNLinear(int cin, int cout, bool with_bias, Rng& rng)
    : has_bias(with_bias) {
  const double std = 1.0 / std::sqrt(static_cast<double>(cin));
  weight = Tensor::randn({cout, cin}, rng, std, true);
  if (with_bias) {
    bias_map = Tensor::randn({3, cin}, rng, std, true);
    bias = Tensor::zeros({cout, 3}, true);
  }
}

Tensor VNLinear::forward(const Tensor& x_in) const {
  const bool single = x_in.ndim() == 2;
  Tensor x = as_set(x_in);
  REVNET_CHECK(x.dim(1) == weight.dim(1),
               "vn_linear: expected " + std::to_string(weight.dim(1)) +
                   " channels, got " + std::to_string(x.dim(1)));
  Tensor out = ro::shared_left_matmul(weight, x);
  if (has_bias) {
    Tensor m = ro::shared_left_matmul(bias_map, x);  // {n,3,3}
    Tensor r = ro::block_norms(m);
    std::vector<double> mask(r.values().size());
    for (size_t i = 0; i < mask.size(); ++i)
      mask[i] = r.values()[i] < 1e-8 ? 0.0 : 1.0;
    Tensor s = ro::mul(ro::reciprocal(ro::clamp_min(r, 1e-8)),
                       constant_vec(std::move(mask)));
    Tensor mhat = ro::point_scale(m, s);
    out = ro::add(out, ro::shared_left_matmul(bias, mhat));
  }
  return restore_rank(out, single);
}

void VNLinear::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".W", weight);
  if (has_bias) {
    out.emplace_back(prefix + ".WB", bias_map);
    out.emplace_back(prefix + ".B", bias);
  }
}

// ---- VNReLU -----------------------------------------------------------------

VNReLU::VNReLU(int c, Rng& rng) {
  dir_map = Tensor::randn({c, c}, rng, 1.0 / std::sqrt(static_cast<double>(c)),
                          true);
}

Tensor vn_relu_project(const Tensor& x_in, const Tensor& dirs_in) {
  const bool single = x_in.ndim() == 2;
  Tensor x = as_set(x_in);
  Tensor k = as_set(dirs_in);
  REVNET_CHECK(x.shape() == k.shape(), "vn_relu: direction shape mismatch");
  Tensor kn = ro::row_norms(k);
  Tensor khat = ro::row_scale(k, ro::reciprocal(ro::clamp_min(kn, 1e-12)));
  Tensor s = ro::row_dots(x, khat);
  std::vector<double> mask(s.values().size());
  for (size_t i = 0; i < mask.size(); ++i)
    mask[i] = (s.values()[i] <= 0.0 && kn.values()[i] >= 1e-12) ? 1.0 : 0.0;
  Tensor out =
      ro::sub(x, ro::row_scale(khat, ro::mul(s, constant_vec(std::move(mask)))));
  return restore_rank(out, single);
}

Tensor VNReLU::forward(const Tensor& x_in) const {
  const bool single = x_in.ndim() == 2;
  Tensor x = as_set(x_in);
  Tensor k = ro::shared_left_matmul(dir_map, x);
  return restore_rank(vn_relu_project(x, k), single);
}

void VNReLU::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".K", dir_map);
}

// ---- pooling ------------------------------------------------------------------

Tensor vn_mean_pool(const Tensor& xs) {
  REVNET_CHECK(xs.defined() && xs.ndim() == 3 && xs.dim(0) >= 1,
               "vn_mean_pool: expected a non-empty {n,C,3} set");
  return ro::mean_dim0(xs);
}

VNMaxPool::VNMaxPool(int c, Rng& rng) {
  dir_map = Tensor::randn({c, c}, rng, 1.0 / std::sqrt(static_cast<double>(c)),
                          true);
}

Tensor vn_max_pool_select(const Tensor& xs, const Tensor& dirs) {
  REVNET_CHECK(xs.ndim() == 3 && xs.dim(0) >= 1,
               "vn_max_pool: expected a non-empty {n,C,3} set");
  REVNET_CHECK(dirs.ndim() == 2 && dirs.dim(0) == xs.dim(1) && dirs.dim(1) == 3,
               "vn_max_pool: directions must be {C,3}");
  const int n = xs.dim(0), c = xs.dim(1);
  const auto& xv = xs.values();
  const auto& dv = dirs.values();
  std::vector<int> idx(static_cast<size_t>(c), 0);
  for (int ch = 0; ch < c; ++ch) {
    double best = -std::numeric_limits<double>::infinity();
    for (int p = 0; p < n; ++p) {
      const double* vecp = xv.data() + (static_cast<size_t>(p) * c + ch) * 3;
      const double dot = vecp[0] * dv[ch * 3] + vecp[1] * dv[ch * 3 + 1] +
                         vecp[2] * dv[ch * 3 + 2];
      if (dot > best) {  // strict: ties keep the lowest index
        best = dot;
        idx[ch] = p;
      }
    }
  }
  return channel_gather(xs, idx);
}

Tensor VNMaxPool::forward(const Tensor& xs) const {
  Tensor dirs = ro::shared_left_matmul(dir_map, vn_mean_pool(xs));
  return vn_max_pool_select(xs, dirs);
}

void VNMaxPool::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".D", dir_map);
}

// ---- normalization --------------------------------------------------------------

VNBatchNorm::VNBatchNorm(int c) { gamma = Tensor::ones({c}).set_requires_grad(true); }

Tensor VNBatchNorm::forward(const Tensor& xs_in, bool training) const {
  Tensor xs = as_set(xs_in);
  const int n = xs.dim(0), c = xs.dim(1);
  REVNET_CHECK(c == gamma.dim(0), "vn_batch_norm: channel mismatch");
  Tensor mean_norm;
  if (training || !has_running) {
    Tensor norms = ro::reshape(ro::row_norms(xs), {n, c});
    mean_norm = ro::mean_dim0(norms);  // {C}
    if (training) {
      if (!has_running) {
        running_mean_norm = mean_norm.values();
        has_running = true;
      } else {
        for (int ch = 0; ch < c; ++ch)
          running_mean_norm[ch] = momentum * running_mean_norm[ch] +
                                  (1.0 - momentum) * mean_norm.values()[ch];
      }
    }
  } else {
    mean_norm = constant_vec(running_mean_norm);
  }
  Tensor s = ro::mul(gamma, ro::reciprocal(ro::add_scalar(mean_norm, eps)));
  return restore_rank(ro::channel_scale(xs, s), xs_in.ndim() == 2);
}

void VNBatchNorm::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
}

VNLayerNorm2::VNLayerNorm2(int c) {
  scale = Tensor::ones({c}).set_requires_grad(true);
}

Tensor VNLayerNorm2::forward(const Tensor& x_in) const {
  const bool single = x_in.ndim() == 2;
  Tensor x = as_set(x_in);
  const int c = x.dim(1);
  REVNET_CHECK(c == scale.dim(0), "vn_layer_norm_2norm: channel mismatch");
  Tensor norms2 = ro::square(ro::row_norms(x));          // {n*C}
  Tensor mean2 = ro::group_mean(norms2, c);              // {n}
  Tensor inv = ro::reciprocal(ro::clamp_min(ro::sqrt_op(mean2), 1e-12));
  Tensor out = ro::channel_scale(ro::point_scale(x, inv), scale);
  return restore_rank(out, single);
}

void VNLayerNorm2::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".scale", scale);
}

VNZCANorm::VNZCANorm(int c) {
  alpha = Tensor::ones({c}).set_requires_grad(true);
}

Tensor VNZCANorm::whitening(const Tensor& xs_in) const {
  Tensor xs = as_set(xs_in);
  const size_t rows = static_cast<size_t>(xs.size()) / 3;
  REVNET_CHECK(rows >= 3, "vn_zca_layer_norm: needs N*C >= 3 vectors");
  const auto& v = xs.values();
  double mu[3] = {0, 0, 0};
  for (size_t r = 0; r < rows; ++r)
    for (int t = 0; t < 3; ++t) mu[t] += v[r * 3 + t];
  for (double& m : mu) m /= static_cast<double>(rows);
  std::vector<double> sigma(9, 0.0);
  for (size_t r = 0; r < rows; ++r) {
    const double d[3] = {v[r * 3] - mu[0], v[r * 3 + 1] - mu[1],
                         v[r * 3 + 2] - mu[2]};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) sigma[i * 3 + j] += d[i] * d[j];
  }
  for (double& s : sigma) s /= static_cast<double>(rows);
  return whitening_transform(Tensor::from({3, 3}, std::move(sigma)), eps);
}

Tensor VNZCANorm::forward_frozen(const Tensor& xs_in, const Tensor& w_zca) const {
  const bool single = xs_in.ndim() == 2;
  Tensor xs = as_set(xs_in);
  const int rows = static_cast<int>(xs.size() / 3);
  REVNET_CHECK(rows >= 3, "vn_zca_layer_norm: needs N*C >= 3 vectors");
  REVNET_CHECK(xs.dim(1) == alpha.dim(0), "vn_zca_layer_norm: channel mismatch");
  Tensor mu = ro::mean_dim0(ro::reshape(xs, {rows, 3}));
  Tensor centered = ro::sub_rowvec(xs, mu);
  Tensor out = ro::channel_scale(ro::right_mul_shared(centered, w_zca), alpha);
  return restore_rank(out, single);
}

Tensor VNZCANorm::forward(const Tensor& xs_in) const {
  switch (mode) {
    case WhiteningMode::kLive:
      return forward_frozen(xs_in, whitening(xs_in));
    case WhiteningMode::kCapture:
      captured_w = whitening(xs_in);
      mode = WhiteningMode::kFrozen;
      return forward_frozen(xs_in, captured_w);
    case WhiteningMode::kFrozen:
      REVNET_CHECK(captured_w.defined(),
                   "vn_zca_layer_norm: frozen without a captured transform");
      return forward_frozen(xs_in, captured_w);
  }
  return Tensor();
}

void VNZCANorm::set_whitening_mode(WhiteningMode m) const {
  mode = m;
  if (m == WhiteningMode::kLive) captured_w = Tensor();
}

void VNZCANorm::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".alpha", alpha);
}

// ---- VNMLP --------------------------------------------------------------------

VNMLP::VNMLP(int cin, const std::vector<VNMLPStageSpec>& spec, Rng& rng,
             bool residual_)
    : residual(residual_) {
  int c = cin;
  for (const auto& st : spec) {
    Stage stage;
    stage.linear = VNLinear(c, st.out_channels, st.bias, rng);
    if (st.zca_norm) stage.norm.emplace(st.out_channels);
    if (st.relu) stage.relu.emplace(st.out_channels, rng);
    c = st.out_channels;
    stages.push_back(std::move(stage));
  }
  REVNET_CHECK(!residual || (!spec.empty() && c == cin),
               "vn_mlp: residual requires matching channel counts");
}

Tensor VNMLP::forward(const Tensor& xs_in) const {
  const bool single = xs_in.ndim() == 2;
  Tensor h = as_set(xs_in);
  const Tensor input = h;
  for (const Stage& st : stages) {
    h = st.linear.forward(h);
    if (st.norm) h = st.norm->forward(h);
    if (st.relu) h = st.relu->forward(h);
  }
  if (residual) h = ro::add(h, input);
  return restore_rank(h, single);
}

int VNMLP::out_channels(int cin_if_empty) const {
  if (stages.empty()) return cin_if_empty;
  return stages.back().linear.out_channels();
}

void VNMLP::set_whitening_mode(WhiteningMode m) const {
  for (const Stage& st : stages)
    if (st.norm) st.norm->set_whitening_mode(m);
}

void VNMLP::collect(ParamList& out, const std::string& prefix) const {
  for (size_t i = 0; i < stages.size(); ++i) {
    const std::string p = prefix + ".s" + std::to_string(i);
    stages[i].linear.collect(out, p + ".lin");
    if (stages[i].norm) stages[i].norm->collect(out, p + ".zca");
    if (stages[i].relu) stages[i].relu->collect(out, p + ".relu");
  }
}

// ---- VNInv --------------------------------------------------------------------

namespace {

// Value-space Gram-Schmidt to flag near rank-deficient 3x3 transforms.
bool rows3_degenerate(const double* t) {
  double u[9];
  std::memcpy(u, t, 9 * sizeof(double));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < i; ++j) {
      const double dot = u[i * 3] * u[j * 3] + u[i * 3 + 1] * u[j * 3 + 1] +
                         u[i * 3 + 2] * u[j * 3 + 2];
      for (int t2 = 0; t2 < 3; ++t2) u[i * 3 + t2] -= dot * u[j * 3 + t2];
    }
    const double norm = std::sqrt(u[i * 3] * u[i * 3] +
                                  u[i * 3 + 1] * u[i * 3 + 1] +
                                  u[i * 3 + 2] * u[i * 3 + 2]);
    if (norm < 1e-9) return true;
    for (int t2 = 0; t2 < 3; ++t2) u[i * 3 + t2] /= norm;
  }
  return false;
}

}  // namespace

Tensor orthonormalize_rows3(const Tensor& t) {
  REVNET_CHECK(t.ndim() == 3 && t.dim(1) == 3 && t.dim(2) == 3,
               "orthonormalize_rows3: expected {n,3,3}");
  const int n = t.dim(0);
  auto unit = [](const Tensor& r) {
    return ro::point_scale(
        r, ro::reciprocal(ro::clamp_min(ro::block_norms(r), 1e-12)));
  };
  Tensor r1 = ro::slice_dim1(t, 0, 1);
  Tensor r2 = ro::slice_dim1(t, 1, 1);
  Tensor r3 = ro::slice_dim1(t, 2, 1);
  Tensor u1 = unit(r1);
  Tensor w2 = ro::sub(r2, ro::point_scale(u1, ro::row_dots(r2, u1)));
  Tensor u2 = unit(w2);
  Tensor w3 = ro::sub(ro::sub(r3, ro::point_scale(u1, ro::row_dots(r3, u1))),
                      ro::point_scale(u2, ro::row_dots(r3, u2)));
  Tensor u3 = unit(w3);
  // proper rotation: flip the third row where det < 0 (forward-fixed sign)
  std::vector<double> sign(static_cast<size_t>(n), 1.0);
  const auto& a = u1.values();
  const auto& b = u2.values();
  const auto& c = u3.values();
  for (int p = 0; p < n; ++p) {
    const double* x = a.data() + static_cast<size_t>(p) * 3;
    const double* y = b.data() + static_cast<size_t>(p) * 3;
    const double* z = c.data() + static_cast<size_t>(p) * 3;
    const double det = x[0] * (y[1] * z[2] - y[2] * z[1]) -
                       x[1] * (y[0] * z[2] - y[2] * z[0]) +
                       x[2] * (y[0] * z[1] - y[1] * z[0]);
    if (det < 0.0) sign[static_cast<size_t>(p)] = -1.0;
  }
  u3 = ro::point_scale(u3, constant_vec(std::move(sign)));
  return ro::concat_dim1(ro::concat_dim1(u1, u2), u3);
}

VNInv::VNInv(int c, int hidden, bool orthonormalize_, Rng& rng)
    : orthonormalize(orthonormalize_) {
  std::vector<VNMLPStageSpec> spec;
  if (hidden > 0) {
    spec.push_back({hidden, false, false, true});
    spec.push_back({3, false, false, false});
  } else {
    spec.push_back({3, false, false, false});
  }
  mlp = VNMLP(c, spec, rng);
}

VNInv::VNInv(const VNInv& other)
    : mlp(other.mlp),
      orthonormalize(other.orthonormalize),
      degenerate_count(other.degenerate_count.load()) {}

VNInv& VNInv::operator=(const VNInv& other) {
  mlp = other.mlp;
  orthonormalize = other.orthonormalize;
  degenerate_count.store(other.degenerate_count.load());
  return *this;
}

std::pair<Tensor, Tensor> VNInv::forward_set(const Tensor& xs_in) const {
  Tensor xs = as_set(xs_in);
  Tensor traw = mlp.forward(xs);  // {n,3,3}
  Tensor t = traw;
  if (orthonormalize) {
    const int n = traw.dim(0);
    std::vector<double> perturb;
    long flagged = 0;
    for (int p = 0; p < n; ++p)
      if (rows3_degenerate(traw.values().data() + static_cast<size_t>(p) * 9)) {
        if (perturb.empty()) perturb.assign(static_cast<size_t>(n) * 9, 0.0);
        for (int d = 0; d < 3; ++d)
          perturb[static_cast<size_t>(p) * 9 + d * 3 + d] = 1e-8;
        ++flagged;
      }
    if (flagged > 0) {
      degenerate_count.fetch_add(flagged, std::memory_order_relaxed);
      t = ro::add(traw, Tensor::from(traw.shape(), std::move(perturb)));
    }
    t = orthonormalize_rows3(t);
  }
  Tensor xinv = ro::point_right_matmul(xs, t, /*transpose_t=*/true);
  return {xinv, t};
}

std::pair<Tensor, Tensor> VNInv::forward(const Tensor& x) const {
  REVNET_CHECK(x.ndim() == 2, "VNInv::forward: expected a single {C,3} feature");
  auto [xinv, t] = forward_set(x);
  return {ro::reshape(xinv, {x.dim(0), 3}), ro::reshape(t, {3, 3})};
}

void VNInv::collect(ParamList& out, const std::string& prefix) const {
  mlp.collect(out, prefix + ".mlp");
}

// ---- VNEdgeConv -----------------------------------------------------------------

VNEdgeConv::VNEdgeConv(int cin_features, int cout, int k_, Rng& rng) : k(k_) {
  REVNET_CHECK(k >= 1, "vn_edge_conv: k must be >= 1");
  const int cin_edge = cin_features > 0 ? 2 * cin_features : 2;
  mlp = VNMLP(cin_edge,
              {{cout, true, true, true}, {cout, false, false, false}}, rng);
}

namespace {

// kNN indices flattened query-major; k clamped to the source size.
std::vector<int> knn_indices(const Tensor& query, const Tensor& source, int k,
                             int& k_eff) {
  PointCloud qc = PointCloud::from_tensor(query);
  PointCloud sc = PointCloud::from_tensor(source);
  k_eff = std::min(k, sc.valid_count);
  return knn(qc, sc, k_eff).indices;
}

std::vector<int> repeat_each(int n, int k) {
  std::vector<int> idx(static_cast<size_t>(n) * k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) idx[static_cast<size_t>(i) * k + j] = i;
  return idx;
}

}  // namespace

Tensor VNEdgeConv::forward_points(const Tensor& query_pts,
                                  const Tensor& source_pts) const {
  REVNET_CHECK(query_pts.ndim() == 2 && query_pts.dim(1) == 3 &&
                   source_pts.ndim() == 2 && source_pts.dim(1) == 3,
               "vn_edge_conv: expected {m,3} and {s,3} positions");
  const int m = query_pts.dim(0);
  int k_eff = 0;
  const std::vector<int> nbr = knn_indices(query_pts, source_pts, k, k_eff);
  Tensor centers = ro::gather_dim0(ro::reshape(query_pts, {m, 1, 3}),
                                   repeat_each(m, k_eff));
  Tensor nbrs = ro::gather_dim0(
      ro::reshape(source_pts, {source_pts.dim(0), 1, 3}), nbr);
  Tensor edge = ro::concat_dim1(centers, ro::sub(nbrs, centers));
  return ro::group_mean(mlp.forward(edge), k_eff);
}

Tensor VNEdgeConv::forward_features(const Tensor& positions,
                                    const Tensor& features) const {
  REVNET_CHECK(positions.ndim() == 2 && positions.dim(1) == 3 &&
                   features.ndim() == 3 && features.dim(0) == positions.dim(0),
               "vn_edge_conv: positions {n,3} and features {n,C,3} required");
  const int n = positions.dim(0);
  int k_eff = 0;
  const std::vector<int> nbr = knn_indices(positions, positions, k, k_eff);
  Tensor centers = ro::gather_dim0(features, repeat_each(n, k_eff));
  Tensor nbrs = ro::gather_dim0(features, nbr);
  Tensor edge = ro::concat_dim1(centers, ro::sub(nbrs, centers));
  return ro::group_mean(mlp.forward(edge), k_eff);
}

void VNEdgeConv::collect(ParamList& out, const std::string& prefix) const {
  mlp.collect(out, prefix + ".mlp");
}

}  // namespace revnet
