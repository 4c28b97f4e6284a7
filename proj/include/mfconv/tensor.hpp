#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfconv {

using Shape = std::vector<std::size_t>;

/// Raised when tensor extents do not line up for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller breaks an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  // Parents are kept alive by the child; backward_fn must never capture the
  // owning node, otherwise the graph leaks.
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major array of doubles taking part in a reverse-mode graph.
///
/// Copies share storage (handle semantics), so a parameter held by a layer
/// and by an optimizer is the same buffer. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  /// Gradient buffer; empty span when the tensor does not require grad.
  std::span<const double> grad() const;
  std::span<double> grad();
  void zero_grad();

  /// Deep copy of values, detached from any graph.
  Tensor clone() const;
  /// Same values, no graph history, no grad.
  Tensor detach() const { return clone(); }

  /// Reverse-mode sweep from this scalar. Leaves accumulate into grad().
  void backward() const;

  // Graph-building hooks for operation implementations.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward_fn);
  detail::Node& node() const;
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Topologically ordered view of the graph feeding a root tensor.
class Graph {
 public:
  explicit Graph(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  /// Parents before children; the root is last.
  const std::vector<detail::Node*>& order() const { return order_; }
  /// Visits every node once in reverse topological order.
  void backward();

 private:
  Tensor root_;
  std::vector<detail::Node*> order_;
};

}  // namespace mfconv
