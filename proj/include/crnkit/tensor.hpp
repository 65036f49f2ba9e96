#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "crnkit/errors.hpp"

namespace crnkit {

using Shape = std::vector<std::size_t>;

namespace detail {

struct TensorNode {
  Shape shape;
  // Values are shared so a parameter mirror on another worker can reuse the
  // same storage while owning its own gradient buffer.
  std::shared_ptr<std::vector<double>> values;
  std::vector<double> grad;  // empty until this node participates in a backward pass
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major tensor handle. The trailing axis is the feature axis; all
// leading axes together are treated as rows by the linear-algebra ops.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor row(std::vector<double> values);  // rank-1

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const;  // element count
  std::size_t cols() const;  // trailing extent (1 for rank-0)
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  double* data();
  const double* data() const;
  double value() const;  // single-element tensors only
  double at(std::initializer_list<std::size_t> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  bool has_grad() const;
  // Gradient buffer, allocated (zeroed) on first use.
  std::vector<double>& grad_buffer();
  const std::vector<double>& grad() const;  // throws ContractError if absent
  double grad_at(std::initializer_list<std::size_t> idx) const;
  void clear_grad();

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> node);

  // Same shape, shared value storage, fresh gradient state. Used to hand
  // read-only parameter values to worker threads.
  Tensor alias() const;

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode tape. Constructing one makes it the active tape for the
// current thread; ops record backward closures onto it in forward order and
// backward() replays them once in reverse. One backward per tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::function<void()> backward_step);
  std::size_t node_count() const { return steps_.size(); }

  // Seeds d(loss)/d(loss) = 1 and visits every recorded step exactly once in
  // reverse order. loss must be a single-element tensor that requires grad.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// ---- ops ----------------------------------------------------------------
// Every op computes eagerly; when a tape is active and any input requires
// grad, the op records a closure that accumulates into input grad buffers.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Elementwise product. Shapes must match, or b may be rank-1 with length
// a.cols(), broadcast across a's rows.
Tensor hadamard(const Tensor& a, const Tensor& b);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t len);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t len);
Tensor broadcast_rows(const Tensor& v, std::size_t n_rows);  // rank-1 -> n_rows x len
Tensor reshape(const Tensor& a, Shape shape);

Tensor elu(const Tensor& a);  // alpha = 1
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);

// softmax along axis (rank-1: axis 0; rank-2: axis 0 = down columns,
// axis 1 = along rows).
Tensor softmax(const Tensor& a, std::size_t axis);

Tensor mean_pool(const Tensor& a, std::size_t axis);
Tensor max_pool(const Tensor& a, std::size_t axis);  // ties: first index wins
Tensor sum_pool(const Tensor& a, std::size_t axis);

// Elementwise mean of same-shape tensors.
Tensor mean_of(std::span<const Tensor> parts);
// y[r, c] = x[r, c] * w[r]
Tensor scale_rows(const Tensor& x, const Tensor& w);

// x: rows x in, W: in x out, optional b: out. Returns rows x out (rank-1 in
// gives rank-1 out).
Tensor linear(const Tensor& x, const Tensor& W, const Tensor* b = nullptr);

// ---- losses -------------------------------------------------------------

// -log p[label]; p is a probability vector (post-softmax).
Tensor cross_entropy(const Tensor& p, std::size_t label);
// max(0, 1 + s_neg - s_pos) for scalar scores.
Tensor hinge_pair(const Tensor& s_pos, const Tensor& s_neg);
// Mean squared error over all elements.
Tensor mse(const Tensor& pred, const Tensor& target);

}  // namespace crnkit
