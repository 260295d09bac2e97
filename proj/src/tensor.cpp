#include "fairmedl/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace fairmedl {

namespace {

using detail::TapeNode;

thread_local std::uint64_t g_next_id = 0;

std::shared_ptr<TapeNode> new_node(std::vector<std::size_t> shape,
                                   std::vector<double> values,
                                   bool requires_grad) {
  auto n = std::make_shared<TapeNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  n->id = ++g_next_id;
  return n;
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) +
                         " and " + shape_to_string(b.shape()) + " differ");
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "tanh") return Activation::tanh;
  if (name == "softmax") return Activation::softmax;
  throw ConfigError("unknown activation kind: " + name);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::softmax: return "softmax";
  }
  throw ConfigError("unknown activation kind");
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values,
               bool requires_grad) {
  if (shape.empty() || shape.size() > 2) {
    throw DimensionError("tensor rank must be 1 or 2, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_ = new_node(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor({1}, {v}, requires_grad);
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::size() const {
  require_defined(*this, "size");
  return node_->values.size();
}

std::size_t Tensor::rows() const {
  if (shape().size() != 2) throw DimensionError("rows(): tensor is not rank-2");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (shape().size() != 2) throw DimensionError("cols(): tensor is not rank-2");
  return node_->shape[1];
}

double Tensor::value() const {
  if (size() != 1) {
    throw ContractError("value(): tensor of shape " + shape_to_string(shape()) +
                        " is not scalar");
  }
  return node_->values[0];
}

const std::vector<double>& Tensor::values() const {
  require_defined(*this, "values");
  return node_->values;
}

std::vector<double>& Tensor::mutable_values() {
  require_defined(*this, "mutable_values");
  return node_->values;
}

bool Tensor::requires_grad() const {
  require_defined(*this, "requires_grad");
  return node_->requires_grad;
}

bool Tensor::has_grad() const {
  require_defined(*this, "has_grad");
  return !node_->grad.empty();
}

const std::vector<double>& Tensor::grad() const {
  require_defined(*this, "grad");
  if (node_->grad.empty()) throw ContractError("grad(): no gradient accumulated");
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  node_->grad.clear();
}

Tensor make_op_result(std::vector<std::size_t> shape, std::vector<double> values,
                      std::vector<std::shared_ptr<TapeNode>> parents,
                      std::function<void(TapeNode&)> backward_fn) {
  auto n = new_node(std::move(shape), std::move(values), false);
  n->parents = std::move(parents);
  n->backward_fn = std::move(backward_fn);
  return Tensor(std::move(n));
}

namespace {


void ensure_adj(TapeNode& node) {
  if (node.adj.empty()) node.adj.assign(node.size(), 0.0);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " are incompatible");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  {
    ConstMap A(a.values().data(), m, k);
    ConstMap B(b.values().data(), k, n);
    MutMap O(out.data(), m, n);
    O.noalias() = A * B;
  }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(
      {m, n}, std::move(out), {pa, pb},
      [pa, pb, m, k, n](TapeNode& self) {
        ConstMap G(self.adj.data(), m, n);
        ConstMap A(pa->values.data(), m, k);
        ConstMap B(pb->values.data(), k, n);
        ensure_adj(*pa);
        ensure_adj(*pb);
        MutMap GA(pa->adj.data(), m, k);
        MutMap GB(pb->adj.data(), k, n);
        GA.noalias() += G * B.transpose();
        GB.noalias() += A.transpose() * G;
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](TapeNode& self) {
    ensure_adj(*pa);
    ensure_adj(*pb);
    for (std::size_t i = 0; i < self.size(); ++i) {
      pa->adj[i] += self.adj[i];
      pb->adj[i] += self.adj[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](TapeNode& self) {
    ensure_adj(*pa);
    ensure_adj(*pb);
    for (std::size_t i = 0; i < self.size(); ++i) {
      pa->adj[i] += self.adj[i];
      pb->adj[i] -= self.adj[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](TapeNode& self) {
    ensure_adj(*pa);
    ensure_adj(*pb);
    for (std::size_t i = 0; i < self.size(); ++i) {
      pa->adj[i] += self.adj[i] * pb->values[i];
      pb->adj[i] += self.adj[i] * pa->values[i];
    }
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  require_defined(x, "add_scalar");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] + c;
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i) px->adj[i] += self.adj[i];
  });
}

Tensor mul_scalar(const Tensor& x, double c) {
  require_defined(x, "mul_scalar");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * c;
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px, c](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i) px->adj[i] += self.adj[i] * c;
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_rowvec");
  require_defined(bias, "add_rowvec");
  if (x.shape().size() != 2 || bias.shape().size() != 1 || bias.size() != x.cols()) {
    throw DimensionError("add_rowvec: shapes " + shape_to_string(x.shape()) + " and " +
                         shape_to_string(bias.shape()) + " are incompatible");
  }
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x.values()[r * d + c] + bias.values()[c];
  auto px = x.node_ptr();
  auto pb = bias.node_ptr();
  return make_op_result({n, d}, std::move(out), {px, pb}, [px, pb, n, d](TapeNode& self) {
    ensure_adj(*px);
    ensure_adj(*pb);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        px->adj[r * d + c] += self.adj[r * d + c];
        pb->adj[c] += self.adj[r * d + c];
      }
  });
}

Tensor exp_(const Tensor& x) {
  require_defined(x, "exp");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.values()[i]);
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i) px->adj[i] += self.adj[i] * self.values[i];
  });
}

Tensor abs_(const Tensor& x) {
  require_defined(x, "abs");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(x.values()[i]);
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i) {
      const double v = px->values[i];
      const double s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      px->adj[i] += self.adj[i] * s;
    }
  });
}

Tensor square(const Tensor& x) {
  require_defined(x, "square");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * x.values()[i];
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i)
      px->adj[i] += self.adj[i] * 2.0 * px->values[i];
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto px = x.node_ptr();
  return make_op_result({1}, {s}, {px}, [px](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < px->size(); ++i) px->adj[i] += self.adj[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.size() == 0) throw ContractError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv_n = 1.0 / static_cast<double>(x.size());
  auto px = x.node_ptr();
  return make_op_result({1}, {s * inv_n}, {px}, [px, inv_n](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < px->size(); ++i) px->adj[i] += self.adj[0] * inv_n;
  });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i)
      if (px->values[i] > 0.0) px->adj[i] += self.adj[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  require_defined(x, "sigmoid");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i) {
      const double s = self.values[i];
      px->adj[i] += self.adj[i] * s * (1.0 - s);
    }
  });
}

Tensor tanh_(const Tensor& x) {
  require_defined(x, "tanh");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.values()[i]);
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i) {
      const double t = self.values[i];
      px->adj[i] += self.adj[i] * (1.0 - t * t);
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_defined(x, "softmax");
  const bool vector_input = x.shape().size() == 1;
  const std::size_t n = vector_input ? 1 : x.rows();
  const std::size_t k = vector_input ? x.size() : x.cols();
  std::vector<double> out(n * k);
  for (std::size_t r = 0; r < n; ++r) {
    double mx = x.values()[r * k];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, x.values()[r * k + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      out[r * k + c] = std::exp(x.values()[r * k + c] - mx);
      z += out[r * k + c];
    }
    for (std::size_t c = 0; c < k; ++c) out[r * k + c] /= z;
  }
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px, n, k](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c)
        dot += self.adj[r * k + c] * self.values[r * k + c];
      for (std::size_t c = 0; c < k; ++c)
        px->adj[r * k + c] += self.values[r * k + c] * (self.adj[r * k + c] - dot);
    }
  });
}

Tensor activation(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh_(x);
    case Activation::softmax: return softmax_rows(x);
  }
  throw ConfigError("unknown activation kind");
}

Tensor gather_rows(const Tensor& src, const std::vector<int>& idx) {
  require_defined(src, "gather_rows");
  if (src.shape().size() != 2) throw DimensionError("gather_rows: source must be rank-2");
  const std::size_t k = src.rows(), d = src.cols(), n = idx.size();
  for (int i : idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= k) {
      throw ContractError("gather_rows: index " + std::to_string(i) +
                          " out of range [0, " + std::to_string(k) + ")");
    }
  }
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = src.values()[idx[r] * d + c];
  auto ps = src.node_ptr();
  return make_op_result({n, d}, std::move(out), {ps}, [ps, idx, d](TapeNode& self) {
    ensure_adj(*ps);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c)
        ps->adj[static_cast<std::size_t>(idx[r]) * d + c] += self.adj[r * d + c];
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_defined(a, "concat_cols");
  require_defined(b, "concat_cols");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.rows() != b.rows()) {
    throw DimensionError("concat_cols: shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " are incompatible");
  }
  const std::size_t n = a.rows(), da = a.cols(), db = b.cols();
  std::vector<double> out(n * (da + db));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < da; ++c) out[r * (da + db) + c] = a.values()[r * da + c];
    for (std::size_t c = 0; c < db; ++c) out[r * (da + db) + da + c] = b.values()[r * db + c];
  }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result({n, da + db}, std::move(out), {pa, pb},
                        [pa, pb, n, da, db](TapeNode& self) {
                          ensure_adj(*pa);
                          ensure_adj(*pb);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t c = 0; c < da; ++c)
                              pa->adj[r * da + c] += self.adj[r * (da + db) + c];
                            for (std::size_t c = 0; c < db; ++c)
                              pb->adj[r * db + c] += self.adj[r * (da + db) + da + c];
                          }
                        });
}

Tensor gradient_reversal(const Tensor& x, double strength) {
  require_defined(x, "gradient_reversal");
  if (!(strength > 0.0)) {
    throw ConfigError("gradient_reversal: strength must be > 0, got " +
                      std::to_string(strength));
  }
  std::vector<double> out = x.values();
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), {px}, [px, strength](TapeNode& self) {
    ensure_adj(*px);
    for (std::size_t i = 0; i < self.size(); ++i) px->adj[i] -= strength * self.adj[i];
  });
}

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_to_string(loss.shape()));
  }
  // Collect the reachable subgraph.
  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> seen;
  std::vector<TapeNode*> stack{loss.node()};
  seen.insert(loss.node());
  while (!stack.empty()) {
    TapeNode* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Replay the tape in reverse creation order.
  std::sort(order.begin(), order.end(),
            [](const TapeNode* a, const TapeNode* b) { return a->id > b->id; });
  for (TapeNode* n : order) n->adj.clear();
  ensure_adj(*loss.node());
  loss.node()->adj[0] = 1.0;
  for (TapeNode* n : order) {
    if (n->backward_fn && !n->adj.empty()) n->backward_fn(*n);
  }
  for (TapeNode* n : order) {
    if (n->adj.empty()) continue;
    if (n->grad.empty()) n->grad.assign(n->size(), 0.0);
    for (std::size_t i = 0; i < n->size(); ++i) n->grad[i] += n->adj[i];
    n->adj.clear();
  }
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ContractError("finite_difference_check: eps must be in [1e-7, 1e-3], got " +
                        std::to_string(eps));
  }
  require_defined(x, "finite_difference_check");

  Tensor leaf(x.shape(), x.values(), true);
  Tensor y = f(leaf);
  if (!y.defined() || y.size() != 1) {
    throw ContractError("finite_difference_check: f must return a scalar");
  }
  backward(y);
  std::vector<double> analytic(x.size(), 0.0);
  if (leaf.has_grad()) analytic = leaf.grad();

  double max_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> vp = x.values();
    std::vector<double> vm = x.values();
    vp[i] += eps;
    vm[i] -= eps;
    const double fp = f(Tensor(x.shape(), vp)).value();
    const double fm = f(Tensor(x.shape(), vm)).value();
    const double fd = (fp - fm) / (2.0 * eps);
    const double err = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(analytic[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace fairmedl
