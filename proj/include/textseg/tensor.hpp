#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "textseg/real.hpp"

namespace textseg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

// One node of the compute graph. Values are dense row-major. The creation
// sequence number doubles as a topological order: parents always exist before
// their children, so backward visits nodes in descending sequence.
struct TensorNode {
  Shape shape;
  std::vector<Real> values;
  std::vector<Real> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // reads this->grad, accumulates into parents

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
  }
};

// Value-semantics handle over a shared graph node. Copying a Tensor aliases
// the node; ops create fresh nodes wired to their parents.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int ndim() const { return static_cast<int>(node().shape.size()); }
  int64_t dim(int axis) const;
  int64_t numel() const { return node().numel(); }

  std::vector<Real>& values() { return node().values; }
  const std::vector<Real>& values() const { return node().values; }
  Real item() const;

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool rg) { node().requires_grad = rg; }
  const std::vector<Real>& grad() const;
  bool has_grad() const { return !node().grad.empty(); }
  void zero_grad();

  // Reverse-mode sweep from a scalar root; visits reachable grad-requiring
  // nodes in reverse creation order exactly once.
  void backward();

  // New leaf with copied values and no graph history.
  Tensor detach() const;

  TensorNode& node() const;
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

// Allocates an op node wired to its parents; requires_grad is inherited.
Tensor make_op_node(const char* op, Shape shape, std::vector<Real> values,
                    std::vector<Tensor> parents,
                    std::function<void(TensorNode&)> backward_fn);

// Throws if any value is non-finite. Applied to every op output in debug
// builds; available to callers in all builds.
void check_finite(const Tensor& t, const char* what);

namespace detail {
#ifdef NDEBUG
inline constexpr bool kDebugChecks = false;
#else
inline constexpr bool kDebugChecks = true;
#endif
}  // namespace detail

}  // namespace textseg
