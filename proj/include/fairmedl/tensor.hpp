#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fairmedl/errors.hpp"

namespace fairmedl {

enum class Activation { relu, sigmoid, tanh, softmax };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

namespace detail {

// One node of the implicit tape. Nodes carry a creation-order id; backward
// replays reachable nodes in strictly decreasing id order, which makes the
// pass deterministic for a fixed graph.
struct TapeNode {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // persistent; accumulated across backward calls
  std::vector<double> adj;   // scratch adjoint for the current backward pass
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TapeNode>> parents;
  // Reads this->adj, accumulates into parents' adj buffers.
  std::function<void(TapeNode&)> backward_fn;

  std::size_t size() const { return values.size(); }
};

}  // namespace detail

/// Dense 1-D or 2-D tensor of doubles participating in reverse-mode
/// differentiation. Copying a Tensor copies the handle, not the buffer.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> values,
         bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // rank-2 only

  double value() const;  // scalar tensors only
  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // leaf updates (optimizer)

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  detail::TapeNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TapeNode>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TapeNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TapeNode> node_;

  friend Tensor make_op_result(std::vector<std::size_t> shape,
                               std::vector<double> values,
                               std::vector<std::shared_ptr<detail::TapeNode>> parents,
                               std::function<void(detail::TapeNode&)> backward_fn);
};

/// Builds a tape node from precomputed forward values. The hook other modules
/// use to define fused ops (losses, samplers) without touching TapeNode.
Tensor make_op_result(std::vector<std::size_t> shape, std::vector<double> values,
                      std::vector<std::shared_ptr<detail::TapeNode>> parents,
                      std::function<void(detail::TapeNode&)> backward_fn);

// ---- primitive operations -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);        // identical shapes
Tensor sub(const Tensor& a, const Tensor& b);        // identical shapes
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& bias);  // [n,d] + [d]
Tensor exp_(const Tensor& x);
Tensor abs_(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sum(const Tensor& x);   // -> scalar
Tensor mean(const Tensor& x);  // -> scalar

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_(const Tensor& x);
Tensor softmax_rows(const Tensor& x);  // rank-1 treated as a single row
Tensor activation(const Tensor& x, Activation kind);

/// Gathers rows of a [K,d] tensor by index; backward scatter-adds.
Tensor gather_rows(const Tensor& src, const std::vector<int>& idx);
Tensor concat_cols(const Tensor& a, const Tensor& b);

/// Identity forward; backward multiplies the incoming gradient by -strength.
Tensor gradient_reversal(const Tensor& x, double strength);

/// Accumulates d loss / d tensor into every tensor reachable from `loss`.
/// Repeated calls without zero_grad add up.
void backward(const Tensor& loss);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// eps must lie in [1e-7, 1e-3].
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double eps);

std::string shape_to_string(const std::vector<std::size_t>& s);

}  // namespace fairmedl
