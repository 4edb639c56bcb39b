#include "revnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace revnet::ops {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  REVNET_CHECK(a.shape() == b.shape(),
               std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()));
}

size_t block_size(const Tensor& x) {
  REVNET_CHECK(x.ndim() >= 1 && x.dim(0) > 0, "op requires non-empty dim 0");
  return static_cast<size_t>(x.size() / x.dim(0));
}

size_t row_width(const Tensor& x) {
  REVNET_CHECK(x.ndim() >= 1, "op requires rank >= 1");
  return static_cast<size_t>(x.dim(x.ndim() - 1));
}

Shape drop_dim0(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [a, b](const std::vector<double>& g, GradStore& gs) {
                           if (a.requires_grad()) {
                             auto& ga = gs.buf(a.node(), g.size());
                             for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (b.requires_grad()) {
                             auto& gb = gs.buf(b.node(), g.size());
                             for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                           }
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [a, b](const std::vector<double>& g, GradStore& gs) {
                           if (a.requires_grad()) {
                             auto& ga = gs.buf(a.node(), g.size());
                             for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (b.requires_grad()) {
                             auto& gb = gs.buf(b.node(), g.size());
                             for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return Tensor::make_op(
      a.shape(), std::move(out), {a, b},
      [a, b](const std::vector<double>& g, GradStore& gs) {
        const auto& av = a.values();
        const auto& bv2 = b.values();
        if (a.requires_grad()) {
          auto& ga = gs.buf(a.node(), g.size());
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (b.requires_grad()) {
          auto& gb = gs.buf(b.node(), g.size());
          for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= c;
  return Tensor::make_op(a.shape(), std::move(out), {a},
                         [a, c](const std::vector<double>& g, GradStore& gs) {
                           auto& ga = gs.buf(a.node(), g.size());
                           for (size_t i = 0; i < g.size(); ++i)
                             ga[i] += c * g[i];
                         });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& v : out) v += c;
  return Tensor::make_op(a.shape(), std::move(out), {a},
                         [a](const std::vector<double>& g, GradStore& gs) {
                           auto& ga = gs.buf(a.node(), g.size());
                           for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

Tensor reciprocal(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = 1.0 / v;
  return Tensor::make_op(
      a.shape(), out, {a},
      [a, out](const std::vector<double>& g, GradStore& gs) {
        auto& ga = gs.buf(a.node(), g.size());
        for (size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * out[i] * out[i];
      });
}

Tensor sqrt_op(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = std::sqrt(v);
  return Tensor::make_op(
      a.shape(), out, {a},
      [a, out](const std::vector<double>& g, GradStore& gs) {
        auto& ga = gs.buf(a.node(), g.size());
        for (size_t i = 0; i < g.size(); ++i)
          if (out[i] > 0.0) ga[i] += g[i] / (2.0 * out[i]);
      });
}

Tensor clamp_min(const Tensor& a, double m) {
  std::vector<double> out(a.values());
  for (double& v : out) v = std::max(v, m);
  return Tensor::make_op(a.shape(), std::move(out), {a},
                         [a, m](const std::vector<double>& g, GradStore& gs) {
                           const auto& av = a.values();
                           auto& ga = gs.buf(a.node(), g.size());
                           for (size_t i = 0; i < g.size(); ++i)
                             if (av[i] > m) ga[i] += g[i];
                         });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= v;
  return Tensor::make_op(a.shape(), std::move(out), {a},
                         [a](const std::vector<double>& g, GradStore& gs) {
                           const auto& av = a.values();
                           auto& ga = gs.buf(a.node(), g.size());
                           for (size_t i = 0; i < g.size(); ++i)
                             ga[i] += 2.0 * av[i] * g[i];
                         });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = std::max(v, 0.0);
  return Tensor::make_op(a.shape(), std::move(out), {a},
                         [a](const std::vector<double>& g, GradStore& gs) {
                           const auto& av = a.values();
                           auto& ga = gs.buf(a.node(), g.size());
                           for (size_t i = 0; i < g.size(); ++i)
                             if (av[i] > 0.0) ga[i] += g[i];
                         });
}

// ---- reductions ------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tensor::make_op({}, {s}, {a},
                         [a](const std::vector<double>& g, GradStore& gs) {
                           auto& ga = gs.buf(a.node(), a.values().size());
                           for (double& v : ga) v += g[0];
                         });
}

Tensor mean_all(const Tensor& a) {
  REVNET_CHECK(a.size() > 0, "mean_all: empty tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  return Tensor::make_op({}, {s * inv}, {a},
                         [a, inv](const std::vector<double>& g, GradStore& gs) {
                           auto& ga = gs.buf(a.node(), a.values().size());
                           for (double& v : ga) v += g[0] * inv;
                         });
}

// ---- dense 2-D -------------------------------------------------------------

namespace {
// c {m,n} += a {m,k} * b {k,n}, all row-major
void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
// c {m,n} += a {m,k} * b^T with b {n,k}
void mm_bt_acc(const double* a, const double* b, double* c, int m, int k,
               int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}
// c {m,n} += a^T * b with a {k,m}, b {k,n}
void mm_at_acc(const double* a, const double* b, double* c, int m, int k,
               int n) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<size_t>(p) * m;
    const double* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  REVNET_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
               "matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                   shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return Tensor::make_op(
      {m, n}, std::move(out), {a, b},
      [a, b, m, k, n](const std::vector<double>& g, GradStore& gs) {
        if (a.requires_grad()) {
          auto& ga = gs.buf(a.node(), static_cast<size_t>(m) * k);
          mm_bt_acc(g.data(), b.values().data(), ga.data(), m, n, k);
        }
        if (b.requires_grad()) {
          auto& gb = gs.buf(b.node(), static_cast<size_t>(k) * n);
          mm_at_acc(a.values().data(), g.data(), gb.data(), k, m, n);
        }
      });
}

Tensor transpose(const Tensor& a) {
  REVNET_CHECK(a.ndim() == 2, "transpose: rank-2 only");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  const auto& av = a.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
  return Tensor::make_op({n, m}, std::move(out), {a},
                         [a, m, n](const std::vector<double>& g, GradStore& gs) {
                           auto& ga = gs.buf(a.node(),
                                             static_cast<size_t>(m) * n);
                           for (int i = 0; i < m; ++i)
                             for (int j = 0; j < n; ++j)
                               ga[static_cast<size_t>(i) * n + j] +=
                                   g[static_cast<size_t>(j) * m + i];
                         });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  REVNET_CHECK(x.ndim() == 2 && v.ndim() == 1 && x.dim(1) == v.dim(0),
               "add_rowvec: shape mismatch");
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.values());
  const auto& vv = v.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += vv[j];
  return Tensor::make_op(
      x.shape(), std::move(out), {x, v},
      [x, v, m, n](const std::vector<double>& g, GradStore& gs) {
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), g.size());
          for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (v.requires_grad()) {
          auto& gv = gs.buf(v.node(), static_cast<size_t>(n));
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              gv[j] += g[static_cast<size_t>(i) * n + j];
        }
      });
}

Tensor sub_rowvec(const Tensor& x, const Tensor& v) {
  REVNET_CHECK(x.ndim() >= 1 && v.ndim() == 1 &&
                   static_cast<int>(row_width(x)) == v.dim(0),
               "sub_rowvec: shape mismatch");
  const size_t w = row_width(x);
  const size_t rows = static_cast<size_t>(x.size()) / w;
  std::vector<double> out(x.values());
  const auto& vv = v.values();
  for (size_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < w; ++j) out[r * w + j] -= vv[j];
  return Tensor::make_op(
      x.shape(), std::move(out), {x, v},
      [x, v, rows, w](const std::vector<double>& g, GradStore& gs) {
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), g.size());
          for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (v.requires_grad()) {
          auto& gv = gs.buf(v.node(), w);
          for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < w; ++j) gv[j] -= g[r * w + j];
        }
      });
}

// ---- row ops ----------------------------------------------------------------

Tensor row_norms(const Tensor& x) {
  const size_t w = row_width(x);
  const size_t rows = static_cast<size_t>(x.size()) / w;
  std::vector<double> out(rows, 0.0);
  const auto& xv = x.values();
  for (size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (size_t j = 0; j < w; ++j) s += xv[r * w + j] * xv[r * w + j];
    out[r] = std::sqrt(s);
  }
  return Tensor::make_op(
      {static_cast<int>(rows)}, out, {x},
      [x, out, rows, w](const std::vector<double>& g, GradStore& gs) {
        const auto& xv = x.values();
        auto& gx = gs.buf(x.node(), xv.size());
        for (size_t r = 0; r < rows; ++r) {
          if (out[r] == 0.0) continue;
          const double c = g[r] / out[r];
          for (size_t j = 0; j < w; ++j) gx[r * w + j] += c * xv[r * w + j];
        }
      });
}

Tensor row_dots(const Tensor& x, const Tensor& y) {
  check_same_shape(x, y, "row_dots");
  const size_t w = row_width(x);
  const size_t rows = static_cast<size_t>(x.size()) / w;
  std::vector<double> out(rows, 0.0);
  const auto& xv = x.values();
  const auto& yv = y.values();
  for (size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (size_t j = 0; j < w; ++j) s += xv[r * w + j] * yv[r * w + j];
    out[r] = s;
  }
  return Tensor::make_op(
      {static_cast<int>(rows)}, std::move(out), {x, y},
      [x, y, rows, w](const std::vector<double>& g, GradStore& gs) {
        const auto& xv = x.values();
        const auto& yv = y.values();
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), xv.size());
          for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < w; ++j) gx[r * w + j] += g[r] * yv[r * w + j];
        }
        if (y.requires_grad()) {
          auto& gy = gs.buf(y.node(), yv.size());
          for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < w; ++j) gy[r * w + j] += g[r] * xv[r * w + j];
        }
      });
}

Tensor row_scale(const Tensor& x, const Tensor& s) {
  const size_t w = row_width(x);
  const size_t rows = static_cast<size_t>(x.size()) / w;
  REVNET_CHECK(s.ndim() == 1 && static_cast<size_t>(s.dim(0)) == rows,
               "row_scale: scale length must equal row count");
  std::vector<double> out(x.values());
  const auto& sv = s.values();
  for (size_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < w; ++j) out[r * w + j] *= sv[r];
  return Tensor::make_op(
      x.shape(), std::move(out), {x, s},
      [x, s, rows, w](const std::vector<double>& g, GradStore& gs) {
        const auto& xv = x.values();
        const auto& sv = s.values();
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), xv.size());
          for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < w; ++j) gx[r * w + j] += g[r * w + j] * sv[r];
        }
        if (s.requires_grad()) {
          auto& gsv = gs.buf(s.node(), rows);
          for (size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (size_t j = 0; j < w; ++j) acc += g[r * w + j] * xv[r * w + j];
            gsv[r] += acc;
          }
        }
      });
}

// ---- block ops ---------------------------------------------------------------

Tensor point_scale(const Tensor& x, const Tensor& s) {
  const size_t bs = block_size(x);
  const size_t n = static_cast<size_t>(x.dim(0));
  REVNET_CHECK(s.ndim() == 1 && static_cast<size_t>(s.dim(0)) == n,
               "point_scale: scale length must equal dim 0");
  std::vector<double> out(x.values());
  const auto& sv = s.values();
  for (size_t p = 0; p < n; ++p)
    for (size_t j = 0; j < bs; ++j) out[p * bs + j] *= sv[p];
  return Tensor::make_op(
      x.shape(), std::move(out), {x, s},
      [x, s, n, bs](const std::vector<double>& g, GradStore& gs) {
        const auto& xv = x.values();
        const auto& sv = s.values();
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), xv.size());
          for (size_t p = 0; p < n; ++p)
            for (size_t j = 0; j < bs; ++j)
              gx[p * bs + j] += g[p * bs + j] * sv[p];
        }
        if (s.requires_grad()) {
          auto& gsv = gs.buf(s.node(), n);
          for (size_t p = 0; p < n; ++p) {
            double acc = 0.0;
            for (size_t j = 0; j < bs; ++j)
              acc += g[p * bs + j] * xv[p * bs + j];
            gsv[p] += acc;
          }
        }
      });
}

Tensor block_norms(const Tensor& x) {
  const size_t bs = block_size(x);
  const size_t n = static_cast<size_t>(x.dim(0));
  std::vector<double> out(n, 0.0);
  const auto& xv = x.values();
  for (size_t p = 0; p < n; ++p) {
    double s = 0.0;
    for (size_t j = 0; j < bs; ++j) s += xv[p * bs + j] * xv[p * bs + j];
    out[p] = std::sqrt(s);
  }
  return Tensor::make_op(
      {static_cast<int>(n)}, out, {x},
      [x, out, n, bs](const std::vector<double>& g, GradStore& gs) {
        const auto& xv = x.values();
        auto& gx = gs.buf(x.node(), xv.size());
        for (size_t p = 0; p < n; ++p) {
          if (out[p] == 0.0) continue;
          const double c = g[p] / out[p];
          for (size_t j = 0; j < bs; ++j) gx[p * bs + j] += c * xv[p * bs + j];
        }
      });
}

Tensor gather_dim0(const Tensor& x, const std::vector<int>& idx) {
  const size_t bs = block_size(x);
  const int n = x.dim(0);
  for (int i : idx)
    REVNET_CHECK(i >= 0 && i < n, "gather_dim0: index out of range");
  Shape os = x.shape();
  os[0] = static_cast<int>(idx.size());
  std::vector<double> out(idx.size() * bs);
  const auto& xv = x.values();
  for (size_t j = 0; j < idx.size(); ++j)
    std::memcpy(out.data() + j * bs,
                xv.data() + static_cast<size_t>(idx[j]) * bs,
                bs * sizeof(double));
  return Tensor::make_op(
      std::move(os), std::move(out), {x},
      [x, idx, bs](const std::vector<double>& g, GradStore& gs) {
        auto& gx = gs.buf(x.node(), x.values().size());
        for (size_t j = 0; j < idx.size(); ++j) {
          double* dst = gx.data() + static_cast<size_t>(idx[j]) * bs;
          const double* src = g.data() + j * bs;
          for (size_t t = 0; t < bs; ++t) dst[t] += src[t];
        }
      });
}

Tensor concat_dim0(const std::vector<Tensor>& xs) {
  REVNET_CHECK(!xs.empty(), "concat_dim0: empty list");
  const Shape tail = drop_dim0(xs[0].shape());
  int total = 0;
  size_t numel = 0;
  for (const Tensor& t : xs) {
    REVNET_CHECK(drop_dim0(t.shape()) == tail,
                 "concat_dim0: trailing shapes differ");
    total += t.dim(0);
    numel += t.values().size();
  }
  Shape os = xs[0].shape();
  os[0] = total;
  std::vector<double> out;
  out.reserve(numel);
  for (const Tensor& t : xs)
    out.insert(out.end(), t.values().begin(), t.values().end());
  return Tensor::make_op(
      std::move(os), std::move(out), xs,
      [xs](const std::vector<double>& g, GradStore& gs) {
        size_t off = 0;
        for (const Tensor& t : xs) {
          const size_t len = t.values().size();
          if (t.requires_grad()) {
            auto& gt = gs.buf(t.node(), len);
            for (size_t i = 0; i < len; ++i) gt[i] += g[off + i];
          }
          off += len;
        }
      });
}

Tensor slice_dim0(const Tensor& x, int start, int len) {
  REVNET_CHECK(start >= 0 && len >= 0 && start + len <= x.dim(0),
               "slice_dim0: out of range");
  const size_t bs = block_size(x);
  Shape os = x.shape();
  os[0] = len;
  std::vector<double> out(
      x.values().begin() + static_cast<size_t>(start) * bs,
      x.values().begin() + static_cast<size_t>(start + len) * bs);
  return Tensor::make_op(std::move(os), std::move(out), {x},
                         [x, start, bs](const std::vector<double>& g,
                                        GradStore& gs) {
                           auto& gx = gs.buf(x.node(), x.values().size());
                           const size_t off = static_cast<size_t>(start) * bs;
                           for (size_t i = 0; i < g.size(); ++i)
                             gx[off + i] += g[i];
                         });
}

Tensor group_mean(const Tensor& x, int k) {
  REVNET_CHECK(k >= 1 && x.dim(0) % k == 0,
               "group_mean: dim 0 must be a multiple of k");
  const size_t bs = block_size(x);
  const int groups = x.dim(0) / k;
  Shape os = x.shape();
  os[0] = groups;
  std::vector<double> out(static_cast<size_t>(groups) * bs, 0.0);
  const auto& xv = x.values();
  const double inv = 1.0 / k;
  for (int gidx = 0; gidx < groups; ++gidx)
    for (int j = 0; j < k; ++j) {
      const double* src =
          xv.data() + (static_cast<size_t>(gidx) * k + j) * bs;
      double* dst = out.data() + static_cast<size_t>(gidx) * bs;
      for (size_t t = 0; t < bs; ++t) dst[t] += src[t] * inv;
    }
  return Tensor::make_op(
      std::move(os), std::move(out), {x},
      [x, k, groups, bs, inv](const std::vector<double>& g, GradStore& gs) {
        auto& gx = gs.buf(x.node(), x.values().size());
        for (int gidx = 0; gidx < groups; ++gidx)
          for (int j = 0; j < k; ++j) {
            double* dst = gx.data() + (static_cast<size_t>(gidx) * k + j) * bs;
            const double* src = g.data() + static_cast<size_t>(gidx) * bs;
            for (size_t t = 0; t < bs; ++t) dst[t] += src[t] * inv;
          }
      });
}

Tensor mean_dim0(const Tensor& x) {
  const size_t bs = block_size(x);
  const int n = x.dim(0);
  std::vector<double> out(bs, 0.0);
  const auto& xv = x.values();
  const double inv = 1.0 / n;
  for (int p = 0; p < n; ++p)
    for (size_t j = 0; j < bs; ++j) out[j] += xv[static_cast<size_t>(p) * bs + j] * inv;
  return Tensor::make_op(
      drop_dim0(x.shape()), std::move(out), {x},
      [x, n, bs, inv](const std::vector<double>& g, GradStore& gs) {
        auto& gx = gs.buf(x.node(), x.values().size());
        for (int p = 0; p < n; ++p)
          for (size_t j = 0; j < bs; ++j)
            gx[static_cast<size_t>(p) * bs + j] += g[j] * inv;
      });
}

Tensor sum_dim0(const Tensor& x) {
  const size_t bs = block_size(x);
  const int n = x.dim(0);
  std::vector<double> out(bs, 0.0);
  const auto& xv = x.values();
  for (int p = 0; p < n; ++p)
    for (size_t j = 0; j < bs; ++j) out[j] += xv[static_cast<size_t>(p) * bs + j];
  return Tensor::make_op(
      drop_dim0(x.shape()), std::move(out), {x},
      [x, n, bs](const std::vector<double>& g, GradStore& gs) {
        auto& gx = gs.buf(x.node(), x.values().size());
        for (int p = 0; p < n; ++p)
          for (size_t j = 0; j < bs; ++j)
            gx[static_cast<size_t>(p) * bs + j] += g[j];
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  REVNET_CHECK(shape_numel(shape) == x.size(),
               "reshape: element count mismatch " + shape_str(x.shape()) +
                   " -> " + shape_str(shape));
  std::vector<double> out(x.values());
  return Tensor::make_op(std::move(shape), std::move(out), {x},
                         [x](const std::vector<double>& g, GradStore& gs) {
                           auto& gx = gs.buf(x.node(), g.size());
                           for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

// ---- channel ops -------------------------------------------------------------

namespace {
// Interprets x as {n, C, w}: returns (n, C, w) with n=1 for rank-2 inputs.
void vn_dims(const Tensor& x, size_t& n, size_t& c, size_t& w,
             const char* op) {
  if (x.ndim() == 3) {
    n = static_cast<size_t>(x.dim(0));
    c = static_cast<size_t>(x.dim(1));
    w = static_cast<size_t>(x.dim(2));
  } else if (x.ndim() == 2) {
    n = 1;
    c = static_cast<size_t>(x.dim(0));
    w = static_cast<size_t>(x.dim(1));
  } else {
    REVNET_CHECK(false, std::string(op) + ": expected rank 2 or 3 VN tensor");
  }
}
}  // namespace

Tensor channel_scale(const Tensor& x, const Tensor& a) {
  size_t n, c, w;
  vn_dims(x, n, c, w, "channel_scale");
  REVNET_CHECK(a.ndim() == 1 && static_cast<size_t>(a.dim(0)) == c,
               "channel_scale: alpha length must equal channel count");
  std::vector<double> out(x.values());
  const auto& av = a.values();
  for (size_t p = 0; p < n; ++p)
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t j = 0; j < w; ++j) out[(p * c + ch) * w + j] *= av[ch];
  return Tensor::make_op(
      x.shape(), std::move(out), {x, a},
      [x, a, n, c, w](const std::vector<double>& g, GradStore& gs) {
        const auto& xv = x.values();
        const auto& av = a.values();
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), xv.size());
          for (size_t p = 0; p < n; ++p)
            for (size_t ch = 0; ch < c; ++ch)
              for (size_t j = 0; j < w; ++j)
                gx[(p * c + ch) * w + j] += g[(p * c + ch) * w + j] * av[ch];
        }
        if (a.requires_grad()) {
          auto& ga = gs.buf(a.node(), c);
          for (size_t p = 0; p < n; ++p)
            for (size_t ch = 0; ch < c; ++ch) {
              double acc = 0.0;
              for (size_t j = 0; j < w; ++j)
                acc += g[(p * c + ch) * w + j] * xv[(p * c + ch) * w + j];
              ga[ch] += acc;
            }
        }
      });
}

Tensor concat_dim1(const Tensor& a, const Tensor& b) {
  REVNET_CHECK(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) &&
                   a.dim(2) == b.dim(2),
               "concat_dim1: shapes must agree outside dim 1");
  const size_t n = static_cast<size_t>(a.dim(0));
  const size_t ca = static_cast<size_t>(a.dim(1));
  const size_t cb = static_cast<size_t>(b.dim(1));
  const size_t w = static_cast<size_t>(a.dim(2));
  std::vector<double> out(n * (ca + cb) * w);
  const auto& avv = a.values();
  const auto& bvv = b.values();
  for (size_t p = 0; p < n; ++p) {
    std::memcpy(out.data() + p * (ca + cb) * w, avv.data() + p * ca * w,
                ca * w * sizeof(double));
    std::memcpy(out.data() + p * (ca + cb) * w + ca * w,
                bvv.data() + p * cb * w, cb * w * sizeof(double));
  }
  return Tensor::make_op(
      {static_cast<int>(n), static_cast<int>(ca + cb), static_cast<int>(w)},
      std::move(out), {a, b},
      [a, b, n, ca, cb, w](const std::vector<double>& g, GradStore& gs) {
        if (a.requires_grad()) {
          auto& ga = gs.buf(a.node(), n * ca * w);
          for (size_t p = 0; p < n; ++p)
            for (size_t i = 0; i < ca * w; ++i)
              ga[p * ca * w + i] += g[p * (ca + cb) * w + i];
        }
        if (b.requires_grad()) {
          auto& gb = gs.buf(b.node(), n * cb * w);
          for (size_t p = 0; p < n; ++p)
            for (size_t i = 0; i < cb * w; ++i)
              gb[p * cb * w + i] += g[p * (ca + cb) * w + ca * w + i];
        }
      });
}

Tensor slice_dim1(const Tensor& x, int start, int len) {
  REVNET_CHECK(x.ndim() == 3 && start >= 0 && len >= 0 &&
                   start + len <= x.dim(1),
               "slice_dim1: out of range");
  const size_t n = static_cast<size_t>(x.dim(0));
  const size_t c = static_cast<size_t>(x.dim(1));
  const size_t w = static_cast<size_t>(x.dim(2));
  std::vector<double> out(n * static_cast<size_t>(len) * w);
  const auto& xv = x.values();
  for (size_t p = 0; p < n; ++p)
    std::memcpy(out.data() + p * len * w,
                xv.data() + (p * c + start) * w, len * w * sizeof(double));
  return Tensor::make_op(
      {static_cast<int>(n), len, static_cast<int>(w)}, std::move(out), {x},
      [x, n, c, w, start, len](const std::vector<double>& g, GradStore& gs) {
        auto& gx = gs.buf(x.node(), x.values().size());
        for (size_t p = 0; p < n; ++p)
          for (size_t i = 0; i < static_cast<size_t>(len) * w; ++i)
            gx[(p * c + start) * w + i] += g[p * len * w + i];
      });
}

// ---- VN matrix products --------------------------------------------------------

Tensor shared_left_matmul(const Tensor& w, const Tensor& x) {
  REVNET_CHECK(w.ndim() == 2, "shared_left_matmul: weight must be rank 2");
  size_t n, b, c;
  vn_dims(x, n, b, c, "shared_left_matmul");
  REVNET_CHECK(w.dim(1) == static_cast<int>(b),
               "shared_left_matmul: weight columns " +
                   std::to_string(w.dim(1)) + " vs input channels " +
                   std::to_string(b));
  const size_t a = static_cast<size_t>(w.dim(0));
  Shape os = x.shape();
  os[x.ndim() - 2] = static_cast<int>(a);
  std::vector<double> out(n * a * c, 0.0);
  const auto& wv = w.values();
  const auto& xv = x.values();
  for (size_t p = 0; p < n; ++p)
    mm_acc(wv.data(), xv.data() + p * b * c, out.data() + p * a * c,
           static_cast<int>(a), static_cast<int>(b), static_cast<int>(c));
  return Tensor::make_op(
      std::move(os), std::move(out), {w, x},
      [w, x, n, a, b, c](const std::vector<double>& g, GradStore& gs) {
        const auto& wv = w.values();
        const auto& xv = x.values();
        if (w.requires_grad()) {
          auto& gw = gs.buf(w.node(), a * b);
          for (size_t p = 0; p < n; ++p)
            mm_bt_acc(g.data() + p * a * c, xv.data() + p * b * c, gw.data(),
                      static_cast<int>(a), static_cast<int>(c),
                      static_cast<int>(b));
        }
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), xv.size());
          for (size_t p = 0; p < n; ++p)
            mm_at_acc(wv.data(), g.data() + p * a * c, gx.data() + p * b * c,
                      static_cast<int>(b), static_cast<int>(a),
                      static_cast<int>(c));
        }
      });
}

Tensor right_mul_shared(const Tensor& x, const Tensor& m) {
  REVNET_CHECK(m.ndim() == 2 && m.dim(0) == m.dim(1),
               "right_mul_shared: square matrix required");
  const size_t d = static_cast<size_t>(m.dim(0));
  REVNET_CHECK(row_width(x) == d, "right_mul_shared: row width mismatch");
  const size_t rows = static_cast<size_t>(x.size()) / d;
  std::vector<double> out(x.values().size(), 0.0);
  mm_acc(x.values().data(), m.values().data(), out.data(),
         static_cast<int>(rows), static_cast<int>(d), static_cast<int>(d));
  return Tensor::make_op(
      x.shape(), std::move(out), {x, m},
      [x, m, rows, d](const std::vector<double>& g, GradStore& gs) {
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), x.values().size());
          mm_bt_acc(g.data(), m.values().data(), gx.data(),
                    static_cast<int>(rows), static_cast<int>(d),
                    static_cast<int>(d));
        }
        if (m.requires_grad()) {
          auto& gm = gs.buf(m.node(), d * d);
          mm_at_acc(x.values().data(), g.data(), gm.data(),
                    static_cast<int>(d), static_cast<int>(rows),
                    static_cast<int>(d));
        }
      });
}

Tensor point_right_matmul(const Tensor& x, const Tensor& t, bool transpose_t) {
  REVNET_CHECK(x.ndim() == 3 && t.ndim() == 3 && x.dim(0) == t.dim(0) &&
                   t.dim(1) == t.dim(2) && x.dim(2) == t.dim(1),
               "point_right_matmul: expected {n,C,d} x {n,d,d}");
  const size_t n = static_cast<size_t>(x.dim(0));
  const size_t c = static_cast<size_t>(x.dim(1));
  const size_t d = static_cast<size_t>(x.dim(2));
  std::vector<double> out(n * c * d, 0.0);
  const auto& xv = x.values();
  const auto& tv = t.values();
  for (size_t p = 0; p < n; ++p) {
    const double* xp = xv.data() + p * c * d;
    const double* tp = tv.data() + p * d * d;
    double* op_ = out.data() + p * c * d;
    if (transpose_t)
      mm_bt_acc(xp, tp, op_, static_cast<int>(c), static_cast<int>(d),
                static_cast<int>(d));
    else
      mm_acc(xp, tp, op_, static_cast<int>(c), static_cast<int>(d),
             static_cast<int>(d));
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x, t},
      [x, t, n, c, d, transpose_t](const std::vector<double>& g,
                                   GradStore& gs) {
        const auto& xv = x.values();
        const auto& tv = t.values();
        if (x.requires_grad()) {
          auto& gx = gs.buf(x.node(), xv.size());
          for (size_t p = 0; p < n; ++p) {
            const double* gp = g.data() + p * c * d;
            const double* tp = tv.data() + p * d * d;
            double* dst = gx.data() + p * c * d;
            // out = X*op(T) => gX = G*op(T)^T
            if (transpose_t)
              mm_acc(gp, tp, dst, static_cast<int>(c), static_cast<int>(d),
                     static_cast<int>(d));
            else
              mm_bt_acc(gp, tp, dst, static_cast<int>(c), static_cast<int>(d),
                        static_cast<int>(d));
          }
        }
        if (t.requires_grad()) {
          auto& gt = gs.buf(t.node(), tv.size());
          for (size_t p = 0; p < n; ++p) {
            const double* gp = g.data() + p * c * d;
            const double* xp = xv.data() + p * c * d;
            double* dst = gt.data() + p * d * d;
            if (transpose_t)  // gT = G^T * X
              mm_at_acc(gp, xp, dst, static_cast<int>(d),
                        static_cast<int>(c), static_cast<int>(d));
            else  // gT = X^T * G
              mm_at_acc(xp, gp, dst, static_cast<int>(d),
                        static_cast<int>(c), static_cast<int>(d));
          }
        }
      });
}

// ---- attention --------------------------------------------------------------

Tensor pairwise_sub(const Tensor& q, const Tensor& k) {
  REVNET_CHECK(q.ndim() == 3 && k.ndim() == 3 && q.dim(1) == k.dim(1) &&
                   q.dim(2) == k.dim(2),
               "pairwise_sub: channel/width mismatch");
  const size_t m = static_cast<size_t>(q.dim(0));
  const size_t n = static_cast<size_t>(k.dim(0));
  const size_t bs = static_cast<size_t>(q.dim(1)) * q.dim(2);
  std::vector<double> out(m * n * bs);
  const auto& qv = q.values();
  const auto& kv = k.values();
  for (size_t j = 0; j < m; ++j)
    for (size_t i = 0; i < n; ++i) {
      double* dst = out.data() + (j * n + i) * bs;
      const double* qp = qv.data() + j * bs;
      const double* kp = kv.data() + i * bs;
      for (size_t t = 0; t < bs; ++t) dst[t] = qp[t] - kp[t];
    }
  return Tensor::make_op(
      {static_cast<int>(m * n), q.dim(1), q.dim(2)}, std::move(out), {q, k},
      [q, k, m, n, bs](const std::vector<double>& g, GradStore& gs) {
        if (q.requires_grad()) {
          auto& gq = gs.buf(q.node(), q.values().size());
          for (size_t j = 0; j < m; ++j)
            for (size_t i = 0; i < n; ++i) {
              const double* src = g.data() + (j * n + i) * bs;
              double* dst = gq.data() + j * bs;
              for (size_t t = 0; t < bs; ++t) dst[t] += src[t];
            }
        }
        if (k.requires_grad()) {
          auto& gk = gs.buf(k.node(), k.values().size());
          for (size_t j = 0; j < m; ++j)
            for (size_t i = 0; i < n; ++i) {
              const double* src = g.data() + (j * n + i) * bs;
              double* dst = gk.data() + i * bs;
              for (size_t t = 0; t < bs; ++t) dst[t] -= src[t];
            }
        }
      });
}

Tensor softmax_dim1(const Tensor& s) {
  REVNET_CHECK(s.ndim() == 3, "softmax_dim1: expected {m,n,C}");
  const size_t m = static_cast<size_t>(s.dim(0));
  const size_t n = static_cast<size_t>(s.dim(1));
  const size_t c = static_cast<size_t>(s.dim(2));
  std::vector<double> out(s.values());
  for (size_t j = 0; j < m; ++j)
    for (size_t ch = 0; ch < c; ++ch) {
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < n; ++i)
        mx = std::max(mx, out[(j * n + i) * c + ch]);
      double z = 0.0;
      for (size_t i = 0; i < n; ++i) {
        double& v = out[(j * n + i) * c + ch];
        v = std::exp(v - mx);
        z += v;
      }
      for (size_t i = 0; i < n; ++i) out[(j * n + i) * c + ch] /= z;
    }
  return Tensor::make_op(
      s.shape(), out, {s},
      [s, out, m, n, c](const std::vector<double>& g, GradStore& gs) {
        auto& gin = gs.buf(s.node(), g.size());
        for (size_t j = 0; j < m; ++j)
          for (size_t ch = 0; ch < c; ++ch) {
            double dot = 0.0;
            for (size_t i = 0; i < n; ++i) {
              const size_t at = (j * n + i) * c + ch;
              dot += out[at] * g[at];
            }
            for (size_t i = 0; i < n; ++i) {
              const size_t at = (j * n + i) * c + ch;
              gin[at] += out[at] * (g[at] - dot);
            }
          }
      });
}

Tensor cwsa_aggregate(const Tensor& s, const Tensor& v) {
  REVNET_CHECK(s.ndim() == 3 && v.ndim() == 3 && s.dim(1) == v.dim(0) &&
                   s.dim(2) == v.dim(1),
               "cwsa_aggregate: expected {m,n,C} x {n,C,3}");
  const size_t m = static_cast<size_t>(s.dim(0));
  const size_t n = static_cast<size_t>(s.dim(1));
  const size_t c = static_cast<size_t>(s.dim(2));
  const size_t w = static_cast<size_t>(v.dim(2));
  std::vector<double> out(m * c * w, 0.0);
  const auto& sv = s.values();
  const auto& vv = v.values();
  for (size_t j = 0; j < m; ++j)
    for (size_t i = 0; i < n; ++i)
      for (size_t ch = 0; ch < c; ++ch) {
        const double coef = sv[(j * n + i) * c + ch];
        const double* vp = vv.data() + (i * c + ch) * w;
        double* dst = out.data() + (j * c + ch) * w;
        for (size_t t = 0; t < w; ++t) dst[t] += coef * vp[t];
      }
  return Tensor::make_op(
      {static_cast<int>(m), static_cast<int>(c), static_cast<int>(w)},
      std::move(out), {s, v},
      [s, v, m, n, c, w](const std::vector<double>& g, GradStore& gs) {
        const auto& sv = s.values();
        const auto& vv = v.values();
        if (s.requires_grad()) {
          auto& gsv = gs.buf(s.node(), sv.size());
          for (size_t j = 0; j < m; ++j)
            for (size_t i = 0; i < n; ++i)
              for (size_t ch = 0; ch < c; ++ch) {
                const double* vp = vv.data() + (i * c + ch) * w;
                const double* gp = g.data() + (j * c + ch) * w;
                double acc = 0.0;
                for (size_t t = 0; t < w; ++t) acc += vp[t] * gp[t];
                gsv[(j * n + i) * c + ch] += acc;
              }
        }
        if (v.requires_grad()) {
          auto& gvv = gs.buf(v.node(), vv.size());
          for (size_t j = 0; j < m; ++j)
            for (size_t i = 0; i < n; ++i)
              for (size_t ch = 0; ch < c; ++ch) {
                const double coef = sv[(j * n + i) * c + ch];
                const double* gp = g.data() + (j * c + ch) * w;
                double* dst = gvv.data() + (i * c + ch) * w;
                for (size_t t = 0; t < w; ++t) dst[t] += coef * gp[t];
              }
        }
      });
}

// ---- point-set losses ---------------------------------------------------------

namespace {
struct NearestResult {
  std::vector<int> idx;
  std::vector<double> dist;  // Euclidean
};

NearestResult nearest_each(const std::vector<double>& a, size_t na,
                           const std::vector<double>& b, size_t nb) {
  NearestResult r;
  r.idx.resize(na);
  r.dist.resize(na);
  for (size_t i = 0; i < na; ++i) {
    const double ax = a[i * 3], ay = a[i * 3 + 1], az = a[i * 3 + 2];
    double best = std::numeric_limits<double>::infinity();
    int bi = 0;
    for (size_t j = 0; j < nb; ++j) {
      const double dx = ax - b[j * 3], dy = ay - b[j * 3 + 1],
                   dz = az - b[j * 3 + 2];
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < best) {  // strict: ties keep the lowest index
        best = d2;
        bi = static_cast<int>(j);
      }
    }
    r.idx[i] = bi;
    r.dist[i] = std::sqrt(best);
  }
  return r;
}

void check_cloud_arg(const Tensor& p, const char* op) {
  REVNET_CHECK(p.ndim() == 2 && p.dim(1) == 3 && p.dim(0) >= 1,
               std::string(op) + ": expected a non-empty {n,3} tensor");
}
}  // namespace

Tensor chamfer_l1_op(const Tensor& p, const Tensor& q) {
  check_cloud_arg(p, "chamfer_l1");
  check_cloud_arg(q, "chamfer_l1");
  const size_t np = static_cast<size_t>(p.dim(0));
  const size_t nq = static_cast<size_t>(q.dim(0));
  const auto fwd = nearest_each(p.values(), np, q.values(), nq);
  const auto bwd = nearest_each(q.values(), nq, p.values(), np);
  double total = 0.0;
  for (double d : fwd.dist) total += d / static_cast<double>(np);
  for (double d : bwd.dist) total += d / static_cast<double>(nq);
  return Tensor::make_op(
      {}, {total}, {p, q},
      [p, q, fwd, bwd, np, nq](const std::vector<double>& g, GradStore& gs) {
        const double gp_scale = g[0] / static_cast<double>(np);
        const double gq_scale = g[0] / static_cast<double>(nq);
        const auto& pv = p.values();
        const auto& qv = q.values();
        std::vector<double>* gp =
            p.requires_grad() ? &gs.buf(p.node(), pv.size()) : nullptr;
        std::vector<double>* gq =
            q.requires_grad() ? &gs.buf(q.node(), qv.size()) : nullptr;
        for (size_t i = 0; i < np; ++i) {
          if (fwd.dist[i] == 0.0) continue;
          const size_t j = static_cast<size_t>(fwd.idx[i]);
          const double c = gp_scale / fwd.dist[i];
          for (int t = 0; t < 3; ++t) {
            const double u = c * (pv[i * 3 + t] - qv[j * 3 + t]);
            if (gp) (*gp)[i * 3 + t] += u;
            if (gq) (*gq)[j * 3 + t] -= u;
          }
        }
        for (size_t j = 0; j < nq; ++j) {
          if (bwd.dist[j] == 0.0) continue;
          const size_t i = static_cast<size_t>(bwd.idx[j]);
          const double c = gq_scale / bwd.dist[j];
          for (int t = 0; t < 3; ++t) {
            const double u = c * (qv[j * 3 + t] - pv[i * 3 + t]);
            if (gq) (*gq)[j * 3 + t] += u;
            if (gp) (*gp)[i * 3 + t] -= u;
          }
        }
      });
}

Tensor chamfer_l2_op(const Tensor& p, const Tensor& q, bool symmetric) {
  check_cloud_arg(p, "chamfer_l2");
  check_cloud_arg(q, "chamfer_l2");
  const size_t np = static_cast<size_t>(p.dim(0));
  const size_t nq = static_cast<size_t>(q.dim(0));
  const auto fwd = nearest_each(p.values(), np, q.values(), nq);
  NearestResult bwd;
  if (symmetric) bwd = nearest_each(q.values(), nq, p.values(), np);
  double total = 0.0;
  for (double d : fwd.dist) total += d * d / static_cast<double>(np);
  if (symmetric)
    for (double d : bwd.dist) total += d * d / static_cast<double>(nq);
  return Tensor::make_op(
      {}, {total}, {p, q},
      [p, q, fwd, bwd, np, nq, symmetric](const std::vector<double>& g,
                                          GradStore& gs) {
        const auto& pv = p.values();
        const auto& qv = q.values();
        std::vector<double>* gp =
            p.requires_grad() ? &gs.buf(p.node(), pv.size()) : nullptr;
        std::vector<double>* gq =
            q.requires_grad() ? &gs.buf(q.node(), qv.size()) : nullptr;
        const double cp = 2.0 * g[0] / static_cast<double>(np);
        for (size_t i = 0; i < np; ++i) {
          const size_t j = static_cast<size_t>(fwd.idx[i]);
          for (int t = 0; t < 3; ++t) {
            const double u = cp * (pv[i * 3 + t] - qv[j * 3 + t]);
            if (gp) (*gp)[i * 3 + t] += u;
            if (gq) (*gq)[j * 3 + t] -= u;
          }
        }
        if (symmetric) {
          const double cq = 2.0 * g[0] / static_cast<double>(nq);
          for (size_t j = 0; j < nq; ++j) {
            const size_t i = static_cast<size_t>(bwd.idx[j]);
            for (int t = 0; t < 3; ++t) {
              const double u = cq * (qv[j * 3 + t] - pv[i * 3 + t]);
              if (gq) (*gq)[j * 3 + t] += u;
              if (gp) (*gp)[i * 3 + t] -= u;
            }
          }
        }
      });
}

}  // namespace revnet::ops
