#pragma once

// Reverse-mode differentiation over batched real tensors.
//
// Every value on the tape is a row-major matrix whose rows are independent
// samples (except for batch normalization, which couples rows). Complex
// quantities use the packed split layout from complex_linalg.hpp, and their
// adjoints live in the same layout: the slot of Re(z) holds dL/dRe(z) and the
// slot of Im(z) holds dL/dIm(z). No Wirtinger conventions are involved.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "unibf/complex_linalg.hpp"

namespace unibf::ad {

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values);

  std::size_t size() const noexcept { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
  bool same_shape(const Tensor& o) const noexcept {
    return rows == o.rows && cols == o.cols;
  }
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Registered primitives. Shapes (B = batch rows):
///   affine(x Bxn, W nxm, b 1xm) -> Bxm                 x W + b
///   relu(x) -> same
///   batch_norm_train(x Bxn, gamma 1xn, beta 1xn)       batch statistics
///   batch_norm_eval(x, gamma, beta, mean 1xn, var 1xn) running statistics
///   scaled_softmax(z BxK, P Bx1) -> BxK                P * softmax(z)
///   gram(h Bx2KM, q BxK) -> Bx2MM                      sigma2 I + sum q_j h_j h_j^H
///   hpd_solve(A Bx2MM, rhs Bx2RM) -> Bx2RM             A^{-1} rhs_r per r
///   hdot(a Bx2RM, b Bx2SM) -> Bx2RS                    entry (r,s) = a_r^H b_s
///   norm2(x Bx2GN) -> BxG                              squared norm per group
///   scale_groups(x Bx2GN, s BxG) -> Bx2GN              group g scaled by s_g
///   add/sub/mul/div(a, b)                              b same shape or Bx1
///   sqrt, log2(x) -> same
///   add_scalar(x) / scale(x) -> same                   x + c / c * x
///   gather(x) -> Bx|index|                             columns by index
///   group_sum(x Bx(G*N)) -> BxG                        contiguous groups of N
///   concat(a Bxn1, b Bxn2) -> Bx(n1+n2)
///   mean(x) -> 1x1
enum class Op : std::uint8_t {
  leaf,
  affine,
  relu,
  batch_norm_train,
  batch_norm_eval,
  scaled_softmax,
  gram,
  hpd_solve,
  hdot,
  norm2,
  scale_groups,
  add,
  sub,
  mul,
  div,
  sqrt,
  log2,
  add_scalar,
  scale,
  gather,
  group_sum,
  concat,
  mean,
  kCount
};

std::string_view op_name(Op op);

struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
};

struct Attrs {
  /// add_scalar/scale constant, batch-norm epsilon, gram sigma2.
  double scalar = 0.0;
  /// Complex vector length (gram, hdot) or group size (norm2, group_sum).
  std::size_t dim = 0;
  /// gather column indices.
  std::vector<std::size_t> index;
};

/// Gradients keyed by parameter name, in registration order.
class GradMap {
 public:
  void add(std::string name, Tensor grad);
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  bool contains(std::string_view name) const;
  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Tensor>& grads() const noexcept { return grads_; }
  std::vector<Tensor>& grads() noexcept { return grads_; }
  double global_norm() const;
  void scale(double factor);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> grads_;
};

/// Ordered record of primitive applications. Single owner; one backward
/// pass per forward pass. A non-recording tape computes identical values but
/// keeps nothing needed for differentiation.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const noexcept { return recording_; }

  Var constant(Tensor value);
  Var parameter(std::string name, Tensor value);
  /// Leaves that borrow `value`; it must outlive the tape and stay unchanged.
  Var constant_ref(const Tensor& value);
  Var parameter_ref(std::string name, const Tensor& value);

  /// Applies `op` to `inputs` and appends the node. Throws ShapeError on
  /// incompatible operands and std::invalid_argument for unknown primitives.
  Var record(Op op, std::span<const Var> inputs, Attrs attrs = {});

  const Tensor& value(Var v) const;
  Op op(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Cholesky factors kept by an hpd_solve node, one per row.
  const std::vector<linalg::Cholesky>& factors(Var v) const;

  /// Batch mean and (biased) variance of a batch_norm_train node.
  const Tensor& batch_mean(Var v) const;
  const Tensor& batch_var(Var v) const;

  /// Smallest |x| over all ReLU inputs on the tape (+inf if none).
  double min_relu_margin() const;

  /// d(loss)/d(parameter) for every registered parameter. `loss` must be 1x1.
  GradMap backward(Var loss);

 private:
  struct Node {
    Op op = Op::leaf;
    std::vector<std::int32_t> inputs;
    Attrs attrs;
    Tensor value;
    const Tensor* external = nullptr;
    std::vector<Tensor> saved;
    std::vector<linalg::Cholesky> factors;
    bool needs_grad = false;
    bool is_param = false;
    std::string name;

    const Tensor& val() const noexcept { return external ? *external : value; }
  };

  const Node& node(Var v) const;
  void backward_node(const Node& n, const Tensor& g, std::vector<Tensor>& grads);

  bool recording_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

// Builders; each is record() with the matching Op.
Var affine(Tape& t, Var x, Var w, Var b);
Var relu(Tape& t, Var x);
Var batch_norm_train(Tape& t, Var x, Var gamma, Var beta, double eps);
Var batch_norm_eval(Tape& t, Var x, Var gamma, Var beta, Var mean, Var var,
                    double eps);
Var scaled_softmax(Tape& t, Var z, Var power);
Var gram(Tape& t, Var h, Var q, std::size_t m, double sigma2);
Var hpd_solve(Tape& t, Var a, Var rhs);
Var hdot(Tape& t, Var a, Var b, std::size_t m);
Var norm2(Tape& t, Var x, std::size_t group);
Var scale_groups(Tape& t, Var x, Var s);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var div(Tape& t, Var a, Var b);
Var sqrt(Tape& t, Var x);
Var log2(Tape& t, Var x);
Var add_scalar(Tape& t, Var x, double c);
Var scale(Tape& t, Var x, double c);
Var gather(Tape& t, Var x, std::vector<std::size_t> index);
Var slice(Tape& t, Var x, std::size_t begin, std::size_t count);
Var group_sum(Tape& t, Var x, std::size_t group);
Var concat(Tape& t, Var a, Var b);
Var mean(Tape& t, Var x);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
using ScalarFn = std::function<double(const NamedTensors&)>;

/// Central differences (f(p + step e_i) - f(p - step e_i)) / (2 step) for
/// every coordinate of every tensor. Throws NumericError if f is not finite.
GradMap finite_diff_grad(const ScalarFn& f, NamedTensors params,
                         double step = 1e-6);

}  // namespace unibf::ad
