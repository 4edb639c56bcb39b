#include "revnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace revnet {

namespace {
std::atomic<std::uint64_t> g_seq{1};
thread_local std::uint64_t t_last_visits = 0;
}  // namespace

void fail(const std::string& msg) { throw std::runtime_error(msg); }

long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) {
    REVNET_CHECK(d >= 0, "negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "{";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "}";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return wrap(std::move(n));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.n_->value.begin(), t.n_->value.end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  REVNET_CHECK(shape_numel(shape) == static_cast<long long>(data.size()),
               "Tensor::from: shape " + shape_str(shape) +
                   " does not match data length " + std::to_string(data.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return wrap(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.n_->value) v = stddev * rng.gaussian();
  return t;
}

std::vector<double>& Tensor::leaf_values() {
  REVNET_CHECK(is_leaf(), "mutable access is restricted to leaf tensors");
  return n_->value;
}

double Tensor::value() const {
  REVNET_CHECK(size() == 1, "value() requires a scalar tensor, got shape " +
                                shape_str(shape()));
  return n_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  REVNET_CHECK(static_cast<int>(idx.size()) == ndim(), "at(): rank mismatch");
  long long off = 0;
  int i = 0;
  for (int v : idx) {
    REVNET_CHECK(v >= 0 && v < dim(i), "at(): index out of range");
    off = off * dim(i) + v;
    ++i;
  }
  return n_->value[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool b) {
  REVNET_CHECK(is_leaf(), "requires_grad can only be toggled on leaves");
  n_->requires_grad = b;
  return *this;
}

bool Tensor::all_finite() const {
  for (double v : n_->value)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::make_op(
    Shape shape, std::vector<double> value, std::vector<Tensor> parents,
    std::function<void(const std::vector<double>&, GradStore&)> backward) {
  REVNET_CHECK(shape_numel(shape) == static_cast<long long>(value.size()),
               "make_op: shape/value mismatch");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  for (const Tensor& p : parents)
    if (p.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::move(backward);
  }
  return wrap(std::move(n));
}

std::vector<double>& GradStore::buf(const Node* n, size_t size) {
  auto it = g_.find(n);
  if (it == g_.end()) it = g_.emplace(n, std::vector<double>(size, 0.0)).first;
  return it->second;
}

std::vector<double> GradStore::grad(const Tensor& t) const {
  auto it = g_.find(t.node());
  if (it == g_.end()) return std::vector<double>(t.values().size(), 0.0);
  return it->second;
}

double GradStore::grad_scalar(const Tensor& t) const {
  auto it = g_.find(t.node());
  return it == g_.end() ? 0.0 : it->second.at(0);
}

void GradStore::add_scaled(const GradStore& other, double s) {
  for (const auto& [node, g] : other.g_) {
    auto& mine = buf(node, g.size());
    for (size_t i = 0; i < g.size(); ++i) mine[i] += s * g[i];
  }
}

void GradStore::keep_only_leaves() {
  for (auto it = g_.begin(); it != g_.end();)
    if (it->first->backward || !it->first->parents.empty() ||
        !it->first->requires_grad)
      it = g_.erase(it);
    else
      ++it;
}

void GradStore::check_finite(const char* msg) const {
  for (const auto& [node, g] : g_)
    for (double v : g)
      REVNET_CHECK(std::isfinite(v), msg);
}

double GradStore::global_norm() const {
  double s = 0.0;
  for (const auto& [node, g] : g_)
    for (double v : g) s += v * v;
  return std::sqrt(s);
}

void GradStore::scale_all(double s) {
  for (auto& [node, g] : g_)
    for (double& v : g) v *= s;
}

GradMap backward(const Tensor& loss) {
  REVNET_CHECK(loss.defined() && loss.size() == 1,
               "backward: loss must be a scalar");
  REVNET_CHECK(std::isfinite(loss.value()), "backward: loss is not finite");
  GradStore store;
  t_last_visits = 0;
  if (!loss.requires_grad()) return store;  // nothing reachable

  // Collect the reachable recorded subgraph.
  std::vector<Node*> order;
  std::unordered_map<const Node*, bool> seen;
  std::vector<Node*> stack{loss.node()};
  seen[loss.node()] = true;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && !seen[p.get()]) {
        seen[p.get()] = true;
        stack.push_back(p.get());
      }
  }
  // Creation order is topological: children always have larger seq.
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  store.buf(loss.node(), 1)[0] = 1.0;
  for (Node* n : order) {
    if (!n->backward) continue;
    auto& g = store.buf(n, n->value.size());
    for (double v : g)
      REVNET_CHECK(std::isfinite(v), "backward: non-finite gradient");
    n->backward(g, store);
    ++t_last_visits;
    store.erase(n);  // intermediate grads are consumed exactly once
  }
  store.keep_only_leaves();
  store.check_finite("backward: non-finite leaf gradient");
  return store;
}

std::uint64_t last_backward_visit_count() { return t_last_visits; }

}  // namespace revnet
