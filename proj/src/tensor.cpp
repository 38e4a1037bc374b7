#include "textseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace textseg {

namespace {
std::atomic<uint64_t> g_seq{1};
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw TensorError("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

TensorNode& Tensor::node() const {
  if (!node_) throw TensorError("use of undefined tensor");
  return *node_;
}

int64_t Tensor::dim(int axis) const {
  const auto& s = node().shape;
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw TensorError("axis out of range for shape " + shape_str(s));
  return s[axis];
}

Real Tensor::item() const {
  if (numel() != 1) throw TensorError("item() requires a single-element tensor, got " + shape_str(shape()));
  return node().values[0];
}

const std::vector<Real>& Tensor::grad() const {
  if (node().grad.empty()) throw TensorError("tensor has no gradient buffer (backward not run?)");
  return node().grad;
}

void Tensor::zero_grad() {
  auto& g = node().grad;
  std::fill(g.begin(), g.end(), Real(0));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values.assign(static_cast<size_t>(n), Real(0));
  node->requires_grad = requires_grad;
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<Real> values, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw TensorError("value count " + std::to_string(values.size()) + " does not match shape " +
                      shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::detach() const {
  return Tensor::from_values(shape(), values(), false);
}

Tensor make_op_node(const char* op, Shape shape, std::vector<Real> values,
                    std::vector<Tensor> parents,
                    std::function<void(TensorNode&)> backward_fn) {
  const int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw TensorError(std::string(op) + ": output value count does not match shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool rg = false;
  node->parents.reserve(parents.size());
  for (const auto& p : parents) {
    node->parents.push_back(p.node_ptr());
    rg = rg || p.requires_grad();
  }
  node->requires_grad = rg;
  if (rg) node->backward_fn = std::move(backward_fn);
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  Tensor out(std::move(node));
  if constexpr (detail::kDebugChecks) check_finite(out, op);
  return out;
}

void Tensor::backward() {
  if (numel() != 1) throw TensorError("backward() requires a scalar root, got " + shape_str(shape()));
  TensorNode* root = node_.get();
  if (!root->requires_grad)
    throw TensorError("backward() on a tensor that does not require grad");

  // Collect reachable nodes, then order by descending creation sequence.
  std::vector<TensorNode*> nodes;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });

  root->ensure_grad();
  root->grad[0] += Real(1);
  for (TensorNode* n : nodes) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

void check_finite(const Tensor& t, const char* what) {
  for (Real v : t.values()) {
    if (!std::isfinite(v))
      throw TensorError(std::string(what) + ": non-finite value encountered");
  }
}

}  // namespace textseg
