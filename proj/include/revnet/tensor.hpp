#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "revnet/rng.hpp"

namespace revnet {

using Shape = std::vector<int>;

[[noreturn]] void fail(const std::string& msg);

#define REVNET_CHECK(cond, msg) \
  do {                          \
    if (!(cond)) ::revnet::fail(msg); \
  } while (0)

long long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class GradStore;

/// One recorded operation (or leaf) on the tape. Nodes form a DAG through
/// `parents`; `seq` is the global creation order, which is a topological
/// order by construction. `value` is immutable once the node participates in
/// a graph; leaves may be rewritten between passes (parameter updates).
struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates into the parents' buffers in `store`, given this node's
  // upstream gradient. Saved forward intermediates live in the closure.
  std::function<void(const std::vector<double>& grad_out, GradStore& store)>
      backward;
};

/// Value-semantics handle to a tape node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v) { return from({}, {v}); }
  /// i.i.d. N(0, stddev^2) entries.
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  long long size() const { return static_cast<long long>(n_->value.size()); }

  const std::vector<double>& values() const { return n_->value; }
  /// Leaf-only mutable access (parameter updates, grad-check perturbation).
  std::vector<double>& leaf_values();

  double value() const;                    // scalar tensors
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool b);

  bool is_leaf() const { return n_->parents.empty() && !n_->backward; }
  bool all_finite() const;

  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return n_; }

  /// Internal: wrap an op result.
  static Tensor make_op(Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(const std::vector<double>&,
                                           GradStore&)>
                            backward);
  static Tensor wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

/// Gradient buffers keyed by node, used while walking the tape and as the
/// result map. A missing entry reads as a zero gradient (disconnected
/// parameters are not an error).
class GradStore {
 public:
  std::vector<double>& buf(const Node* n, size_t size);
  bool has(const Tensor& t) const { return g_.count(t.node()) != 0; }
  /// Gradient of `t`; zeros if the parameter was not reached.
  std::vector<double> grad(const Tensor& t) const;
  double grad_scalar(const Tensor& t) const;
  void erase(const Node* n) { g_.erase(n); }
  /// this += s * other (matching entries created as needed).
  void add_scaled(const GradStore& other, double s);
  size_t entry_count() const { return g_.size(); }
  void keep_only_leaves();
  void check_finite(const char* msg) const;
  double global_norm() const;
  void scale_all(double s);

 private:
  std::unordered_map<const Node*, std::vector<double>> g_;
};

using GradMap = GradStore;

/// Reverse-mode sweep from a scalar loss. Visits every reachable recorded
/// node exactly once, in reverse creation (= reverse topological) order.
/// Returns gradients for all reachable leaves with requires_grad set.
/// Throws if the loss is not scalar or a NaN/Inf shows up in any gradient.
GradMap backward(const Tensor& loss);

/// Exposed for tests: number of backward closures executed by the last
/// backward() call on this thread.
std::uint64_t last_backward_visit_count();

}  // namespace revnet
