#pragma once

// Define-by-run reverse-mode differentiation over dense row-major tensors.
//
// Every operation that touches a tensor with requires_grad records a node
// holding its parents and a backward closure. backward() visits the nodes
// reachable from a scalar loss exactly once, newest first, and sums
// gradients into every tensor that needs one. Graphs are rebuilt on each
// forward pass and are confined to the thread that built them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xda {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

class Tensor {
 public:
  Tensor();

  static Tensor constant(Shape shape, std::vector<Real> data);
  static Tensor parameter(Shape shape, std::vector<Real> data);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value);

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const;
  std::size_t size() const;

  std::span<const Real> data() const;
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::size_t flat_index) const;

  bool requires_grad() const;
  bool has_grad() const;
  // Zeros when no gradient has been accumulated.
  std::vector<Real> grad() const;
  void zero_grad();

  // Same storage semantics as the source but disconnected from its graph.
  Tensor detach() const;
  // Fresh leaf with copied storage.
  Tensor clone(bool requires_grad) const;

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  void accumulate(std::size_t i, Real g);
  std::vector<Real>& ensure_grad();
};

// --- elementwise and shape operations ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real s);
// x[..., n] + v[n], broadcast over leading dimensions.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor relu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // rank 2 only
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
// Stacks equal-shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
// out[i] = x[index[i]]; backward scatters with summation.
Tensor gather(const Tensor& x, std::span<const std::size_t> index, Shape out_shape);
// Mean over the leading axis of a rank-2 tensor: [N x d] -> [d].
Tensor mean_rows(const Tensor& x);

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);

// --- normalization and probabilities ---
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);
// Softmax over the trailing dimension of scale * x, max-subtracted.
Tensor softmax_rows(const Tensor& x, Real scale = 1.0);

// Floor applied to probabilities before taking logarithms.
inline constexpr Real kProbFloor = 1e-8;

// Mean over non-ignored pixels of -w_p * sum_c t_pc log softmax(logits)_pc.
// A row of `target` that is all zero marks an ignored pixel.
Tensor cross_entropy(const Tensor& logits, const Tensor& target, const Tensor& weight);
// Elementwise p * log(p / q) with both sides floored; p acts as a fixed
// target and never receives gradient.
Tensor kl_rows(const Tensor& p, const Tensor& q);

Tensor stop_gradient(const Tensor& x);

// Align-corners-false bilinear resampling of an [h x w x c] field.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

// --- reductions ---
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Populates gradients of every requires_grad tensor reachable from `loss`.
void backward(const Tensor& loss);

// Maximum over all input coordinates of |analytic - numeric| /
// max(|analytic|, |numeric|, floor). `fd_fn` is the function differenced
// numerically; pass the same function as `fn` unless a branch is severed by
// stop_gradient, in which case `fd_fn` is the graph with that branch frozen.
struct GradCheckResult {
  Real max_rel_error = 0;
  Real max_abs_error = 0;
  std::size_t nan_coordinates = 0;
};
using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;
GradCheckResult grad_check(const ScalarFn& fn, std::span<const Tensor> inputs, Real eps = 1e-6,
                           Real floor = 1e-3);
GradCheckResult grad_check_against(const ScalarFn& fn, const ScalarFn& fd_fn,
                                   std::span<const Tensor> inputs, Real eps = 1e-6,
                                   Real floor = 1e-3);

}  // namespace xda
