#include "unibf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "unibf/error.hpp"
#include "unibf/simd/kernels.hpp"

namespace unibf::ad {

using linalg::CMat;
using linalg::Complex;
using linalg::CVec;

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c)
    throw ShapeError("Tensor: " + std::to_string(data.size()) +
                     " values for shape " + std::to_string(r) + "x" +
                     std::to_string(c));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data.begin(), data.end(),
                     [](double x) { return std::isfinite(x); });
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::affine: return "affine";
    case Op::relu: return "relu";
    case Op::batch_norm_train: return "batch_norm_train";
    case Op::batch_norm_eval: return "batch_norm_eval";
    case Op::scaled_softmax: return "scaled_softmax";
    case Op::gram: return "gram";
    case Op::hpd_solve: return "hpd_solve";
    case Op::hdot: return "hdot";
    case Op::norm2: return "norm2";
    case Op::scale_groups: return "scale_groups";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::sqrt: return "sqrt";
    case Op::log2: return "log2";
    case Op::add_scalar: return "add_scalar";
    case Op::scale: return "scale";
    case Op::gather: return "gather";
    case Op::group_sum: return "group_sum";
    case Op::concat: return "concat";
    case Op::mean: return "mean";
    case Op::kCount: break;
  }
  return "unknown";
}

// ---------------------------------------------------------------- GradMap

void GradMap::add(std::string name, Tensor grad) {
  names_.push_back(std::move(name));
  grads_.push_back(std::move(grad));
}

const Tensor& GradMap::at(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return grads_[i];
  throw std::out_of_range("GradMap: no gradient for '" + std::string(name) +
                          "'");
}

Tensor& GradMap::at(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

bool GradMap::contains(std::string_view name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

double GradMap::global_norm() const {
  double s = 0.0;
  for (const auto& g : grads_)
    for (double x : g.data) s += x * x;
  return std::sqrt(s);
}

void GradMap::scale(double factor) {
  for (auto& g : grads_)
    for (double& x : g.data) x *= factor;
}

// ---------------------------------------------------------------- helpers

namespace {

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

std::string dims(const Tensor& t) {
  return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

void require_arity(Op op, std::size_t got, std::size_t want) {
  if (got != want)
    shape_fail(op, "expected " + std::to_string(want) + " inputs, got " +
                       std::to_string(got));
}

// Broadcast rule for binary elementwise ops: same shape or b is Bx1.
bool broadcasts(const Tensor& a, const Tensor& b) {
  return b.rows == a.rows && b.cols == 1 && a.cols != 1;
}

void check_binary(Op op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b) && !broadcasts(a, b))
    shape_fail(op, "operands " + dims(a) + " and " + dims(b));
}

inline double bval(const Tensor& b, bool bc, std::size_t r, std::size_t c) {
  return bc ? b.data[r] : b.data[r * b.cols + c];
}

// Number of complex vectors of length m in a packed row of `cols` reals.
std::size_t vectors_in(Op op, std::size_t cols, std::size_t m) {
  if (m == 0 || cols % (2 * m) != 0)
    shape_fail(op, "row of " + std::to_string(cols) +
                       " reals does not hold complex vectors of length " +
                       std::to_string(m));
  return cols / (2 * m);
}

std::size_t matrix_dim(Op op, std::size_t cols) {
  const auto n = static_cast<std::size_t>(
      std::llround(std::sqrt(static_cast<double>(cols) / 2.0)));
  if (n == 0 || 2 * n * n != cols)
    shape_fail(op, "row of " + std::to_string(cols) +
                       " reals is not a packed square complex matrix");
  return n;
}

Tensor transpose(const Tensor& w) {
  Tensor t(w.cols, w.rows);
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) t(j, i) = w(i, j);
  return t;
}

// ------------------------------------------------------------- forwards

Tensor fwd_affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rows != x.cols || b.rows != 1 || b.cols != w.cols)
    shape_fail(Op::affine,
               "x " + dims(x) + ", W " + dims(w) + ", b " + dims(b));
  Tensor y(x.rows, w.cols);
  for (std::size_t r = 0; r < y.rows; ++r)
    std::copy(b.data.begin(), b.data.end(), y.data.begin() + r * y.cols);
  if (x.rows > 0 && x.cols > 0 && w.cols > 0)
    simd::kernels().gemm(false, x.rows, w.cols, x.cols, x.data.data(), x.cols,
                         w.data.data(), w.cols, y.data.data(), y.cols, true);
  return y;
}

void check_bn_params(Op op, const Tensor& x, std::span<const Tensor* const> ps) {
  for (const Tensor* p : ps)
    if (p->rows != 1 || p->cols != x.cols)
      shape_fail(op, "per-feature tensor " + dims(*p) + " for input " + dims(x));
}

Tensor fwd_softmax(const Tensor& z, const Tensor& p, Tensor* probs) {
  if (p.rows != z.rows || p.cols != 1 || z.cols == 0)
    shape_fail(Op::scaled_softmax, "z " + dims(z) + ", P " + dims(p));
  Tensor y(z.rows, z.cols);
  if (probs) *probs = Tensor(z.rows, z.cols);
  for (std::size_t r = 0; r < z.rows; ++r) {
    const auto zr = z.row(r);
    const double mx = *std::max_element(zr.begin(), zr.end());
    double denom = 0.0;
    std::vector<double> e(z.cols);
    for (std::size_t i = 0; i < z.cols; ++i) {
      e[i] = std::exp(zr[i] - mx);
      denom += e[i];
    }
    for (std::size_t i = 0; i < z.cols; ++i) {
      const double s = e[i] / denom;
      y(r, i) = p.data[r] * s;
      if (probs) (*probs)(r, i) = s;
    }
  }
  return y;
}

}  // namespace

// ------------------------------------------------------------------ Tape

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw std::out_of_range("Tape: variable does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).val(); }

Op Tape::op(Var v) const { return node(v).op; }

const std::vector<linalg::Cholesky>& Tape::factors(Var v) const {
  const Node& n = node(v);
  if (n.op != Op::hpd_solve)
    throw std::invalid_argument("Tape::factors: not an hpd_solve node");
  return n.factors;
}

const Tensor& Tape::batch_mean(Var v) const {
  const Node& n = node(v);
  if (n.op != Op::batch_norm_train)
    throw std::invalid_argument("Tape::batch_mean: not a batch_norm_train node");
  return n.saved.at(0);
}

const Tensor& Tape::batch_var(Var v) const {
  const Node& n = node(v);
  if (n.op != Op::batch_norm_train)
    throw std::invalid_argument("Tape::batch_var: not a batch_norm_train node");
  return n.saved.at(1);
}

double Tape::min_relu_margin() const {
  double margin = std::numeric_limits<double>::infinity();
  for (const Node& n : nodes_) {
    if (n.op != Op::relu) continue;
    for (double x : nodes_[static_cast<std::size_t>(n.inputs[0])].val().data)
      margin = std::min(margin, std::abs(x));
  }
  return margin;
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::constant_ref(const Tensor& value) {
  Node n;
  n.external = &value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::parameter_ref(std::string name, const Tensor& value) {
  Node n;
  n.external = &value;
  n.is_param = true;
  n.needs_grad = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(std::string name, Tensor value) {
  Node n;
  n.value = std::move(value);
  n.is_param = true;
  n.needs_grad = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::record(Op op, std::span<const Var> inputs, Attrs attrs) {
  if (static_cast<unsigned>(op) >= static_cast<unsigned>(Op::kCount) ||
      op == Op::leaf)
    throw std::invalid_argument("Tape::record: unknown primitive id " +
                                std::to_string(static_cast<unsigned>(op)));
  if (consumed_)
    throw std::logic_error("Tape::record: tape already differentiated");

  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  for (Var v : inputs) in.push_back(&node(v).val());

  Node n;
  n.op = op;
  for (Var v : inputs) {
    n.inputs.push_back(v.id);
    n.needs_grad = n.needs_grad || node(v).needs_grad;
  }

  switch (op) {
    case Op::affine: {
      require_arity(op, in.size(), 3);
      n.value = fwd_affine(*in[0], *in[1], *in[2]);
      break;
    }
    case Op::relu: {
      require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      n.value = Tensor(x.rows, x.cols);
      simd::kernels().relu(x.data.data(), n.value.data.data(), x.size());
      break;
    }
    case Op::batch_norm_train: {
      require_arity(op, in.size(), 3);
      const Tensor& x = *in[0];
      const Tensor& gamma = *in[1];
      const Tensor& beta = *in[2];
      const Tensor* ps[] = {&gamma, &beta};
      check_bn_params(op, x, ps);
      if (x.rows < 2)
        shape_fail(op, "batch statistics need at least 2 rows, got " +
                           std::to_string(x.rows));
      const double eps = attrs.scalar;
      const auto b = static_cast<double>(x.rows);
      Tensor mu(1, x.cols), var(1, x.cols), istd(1, x.cols);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.cols; ++c) mu.data[c] += x(r, c);
      for (double& m : mu.data) m /= b;
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.cols; ++c) {
          const double d = x(r, c) - mu.data[c];
          var.data[c] += d * d;
        }
      for (std::size_t c = 0; c < x.cols; ++c) {
        var.data[c] /= b;
        istd.data[c] = 1.0 / std::sqrt(var.data[c] + eps);
      }
      Tensor xhat(x.rows, x.cols);
      n.value = Tensor(x.rows, x.cols);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.cols; ++c) {
          const double xh = (x(r, c) - mu.data[c]) * istd.data[c];
          xhat(r, c) = xh;
          n.value(r, c) = gamma.data[c] * xh + beta.data[c];
        }
      n.saved.push_back(std::move(mu));
      n.saved.push_back(std::move(var));
      if (recording_) {
        n.saved.push_back(std::move(xhat));
        n.saved.push_back(std::move(istd));
      }
      break;
    }
    case Op::batch_norm_eval: {
      require_arity(op, in.size(), 5);
      const Tensor& x = *in[0];
      const Tensor* ps[] = {in[1], in[2], in[3], in[4]};
      check_bn_params(op, x, ps);
      const Tensor& gamma = *in[1];
      const Tensor& beta = *in[2];
      const Tensor& rm = *in[3];
      const Tensor& rv = *in[4];
      n.value = Tensor(x.rows, x.cols);
      std::vector<double> istd(x.cols);
      for (std::size_t c = 0; c < x.cols; ++c)
        istd[c] = 1.0 / std::sqrt(rv.data[c] + attrs.scalar);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.cols; ++c)
          n.value(r, c) =
              gamma.data[c] * ((x(r, c) - rm.data[c]) * istd[c]) + beta.data[c];
      break;
    }
    case Op::scaled_softmax: {
      require_arity(op, in.size(), 2);
      Tensor probs;
      n.value = fwd_softmax(*in[0], *in[1], recording_ ? &probs : nullptr);
      if (recording_) n.saved.push_back(std::move(probs));
      break;
    }
    case Op::gram: {
      require_arity(op, in.size(), 2);
      const Tensor& h = *in[0];
      const Tensor& q = *in[1];
      const std::size_t m = attrs.dim;
      const std::size_t k = vectors_in(op, h.cols, m);
      if (q.rows != h.rows || q.cols != k)
        shape_fail(op, "h " + dims(h) + " holds " + std::to_string(k) +
                           " users but q is " + dims(q));
      n.value = Tensor(h.rows, 2 * m * m);
      std::vector<CVec> hv(k);
      for (std::size_t r = 0; r < h.rows; ++r) {
        for (std::size_t j = 0; j < k; ++j)
          hv[j] = linalg::unpack(h.row(r), k, m, j);
        linalg::pack_matrix(linalg::gram_matrix(hv, q.row(r), attrs.scalar),
                            n.value.row(r));
      }
      break;
    }
    case Op::hpd_solve: {
      require_arity(op, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& rhs = *in[1];
      const std::size_t m = matrix_dim(op, a.cols);
      const std::size_t nr = vectors_in(op, rhs.cols, m);
      if (rhs.rows != a.rows)
        shape_fail(op, "A " + dims(a) + " vs rhs " + dims(rhs));
      n.value = Tensor(rhs.rows, rhs.cols);
      if (recording_) n.factors.reserve(a.rows);
      for (std::size_t r = 0; r < a.rows; ++r) {
        linalg::Cholesky chol(linalg::unpack_matrix(a.row(r), m));
        for (std::size_t j = 0; j < nr; ++j)
          linalg::pack(chol.solve(linalg::unpack(rhs.row(r), nr, m, j)),
                       n.value.row(r), nr, j);
        if (recording_) n.factors.push_back(std::move(chol));
      }
      break;
    }
    case Op::hdot: {
      require_arity(op, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const std::size_t m = attrs.dim;
      const std::size_t ra = vectors_in(op, a.cols, m);
      const std::size_t sb = vectors_in(op, b.cols, m);
      if (a.rows != b.rows) shape_fail(op, "a " + dims(a) + " vs b " + dims(b));
      n.value = Tensor(a.rows, 2 * ra * sb);
      std::vector<CVec> av(ra), bv(sb);
      for (std::size_t r = 0; r < a.rows; ++r) {
        for (std::size_t i = 0; i < ra; ++i) av[i] = linalg::unpack(a.row(r), ra, m, i);
        for (std::size_t j = 0; j < sb; ++j) bv[j] = linalg::unpack(b.row(r), sb, m, j);
        auto out = n.value.row(r);
        for (std::size_t i = 0; i < ra; ++i)
          for (std::size_t j = 0; j < sb; ++j) {
            const Complex g = linalg::hdot(av[i], bv[j]);
            out[i * sb + j] = g.real();
            out[ra * sb + i * sb + j] = g.imag();
          }
      }
      break;
    }
    case Op::norm2: {
      require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      const std::size_t g = vectors_in(op, x.cols, attrs.dim);
      const std::size_t len = attrs.dim;
      n.value = Tensor(x.rows, g);
      for (std::size_t r = 0; r < x.rows; ++r) {
        const auto row = x.row(r);
        for (std::size_t gi = 0; gi < g; ++gi) {
          double s = 0.0;
          for (std::size_t i = 0; i < len; ++i) {
            const double re = row[gi * len + i];
            const double im = row[g * len + gi * len + i];
            s += re * re + im * im;
          }
          n.value(r, gi) = s;
        }
      }
      break;
    }
    case Op::scale_groups: {
      require_arity(op, in.size(), 2);
      const Tensor& x = *in[0];
      const Tensor& s = *in[1];
      if (s.rows != x.rows || s.cols == 0 || x.cols % (2 * s.cols) != 0)
        shape_fail(op, "x " + dims(x) + " vs scales " + dims(s));
      const std::size_t g = s.cols;
      const std::size_t len = x.cols / (2 * g);
      n.value = Tensor(x.rows, x.cols);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t gi = 0; gi < g; ++gi)
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t c = gi * len + i;
            n.value(r, c) = s(r, gi) * x(r, c);
            n.value(r, g * len + c) = s(r, gi) * x(r, g * len + c);
          }
      break;
    }
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div: {
      require_arity(op, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      check_binary(op, a, b);
      const bool bc = broadcasts(a, b);
      n.value = Tensor(a.rows, a.cols);
      for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) {
          const double x = a(r, c);
          const double y = bval(b, bc, r, c);
          double z = 0.0;
          switch (op) {
            case Op::add: z = x + y; break;
            case Op::sub: z = x - y; break;
            case Op::mul: z = x * y; break;
            default: z = x / y; break;
          }
          n.value(r, c) = z;
        }
      break;
    }
    case Op::sqrt:
    case Op::log2: {
      require_arity(op, in.size(), 1);
      n.value = *in[0];
      for (double& x : n.value.data) x = op == Op::sqrt ? std::sqrt(x) : std::log2(x);
      break;
    }
    case Op::add_scalar:
    case Op::scale: {
      require_arity(op, in.size(), 1);
      n.value = *in[0];
      for (double& x : n.value.data)
        x = op == Op::add_scalar ? x + attrs.scalar : x * attrs.scalar;
      break;
    }
    case Op::gather: {
      require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      for (std::size_t c : attrs.index)
        if (c >= x.cols)
          shape_fail(op, "column " + std::to_string(c) + " out of range for " + dims(x));
      n.value = Tensor(x.rows, attrs.index.size());
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t j = 0; j < attrs.index.size(); ++j)
          n.value(r, j) = x(r, attrs.index[j]);
      break;
    }
    case Op::group_sum: {
      require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      const std::size_t len = attrs.dim;
      if (len == 0 || x.cols % len != 0)
        shape_fail(op, "width " + std::to_string(x.cols) +
                           " is not a multiple of group " + std::to_string(len));
      const std::size_t g = x.cols / len;
      n.value = Tensor(x.rows, g);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t gi = 0; gi < g; ++gi) {
          double s = 0.0;
          for (std::size_t i = 0; i < len; ++i) s += x(r, gi * len + i);
          n.value(r, gi) = s;
        }
      break;
    }
    case Op::concat: {
      require_arity(op, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.rows != b.rows) shape_fail(op, dims(a) + " vs " + dims(b));
      n.value = Tensor(a.rows, a.cols + b.cols);
      for (std::size_t r = 0; r < a.rows; ++r) {
        std::copy(a.row(r).begin(), a.row(r).end(), n.value.row(r).begin());
        std::copy(b.row(r).begin(), b.row(r).end(),
                  n.value.row(r).begin() + static_cast<std::ptrdiff_t>(a.cols));
      }
      break;
    }
    case Op::mean: {
      require_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      if (x.size() == 0) shape_fail(op, "empty input");
      double s = 0.0;
      for (double v : x.data) s += v;
      n.value = Tensor(1, 1, s / static_cast<double>(x.size()));
      break;
    }
    case Op::leaf:
    case Op::kCount:
      break;
  }

  n.attrs = std::move(attrs);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

// --------------------------------------------------------------- backward

namespace {

Tensor& acc(std::vector<Tensor>& grads, std::int32_t id, const Tensor& like) {
  Tensor& g = grads[static_cast<std::size_t>(id)];
  if (g.data.empty() && like.size() > 0) g = Tensor(like.rows, like.cols);
  return g;
}

// Hermitian part (A + A^H) / 2 of an adjoint matrix.
CMat hermitian_part(const CMat& a) {
  CMat h(a.n);
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t j = 0; j < a.n; ++j)
      h.set(i, j, 0.5 * (a(i, j) + std::conj(a(j, i))));
  return h;
}

}  // namespace

void Tape::backward_node(const Node& n, const Tensor& g,
                         std::vector<Tensor>& grads) {
  auto in_node = [&](std::size_t i) -> const Node& {
    return nodes_[static_cast<std::size_t>(n.inputs[i])];
  };
  auto in_val = [&](std::size_t i) -> const Tensor& { return in_node(i).val(); };
  auto wants = [&](std::size_t i) { return in_node(i).needs_grad; };
  auto grad_of = [&](std::size_t i) -> Tensor& {
    return acc(grads, n.inputs[i], in_val(i));
  };

  switch (n.op) {
    case Op::affine: {
      const Tensor& x = in_val(0);
      const Tensor& w = in_val(1);
      const auto& k = simd::kernels();
      if (wants(0)) {
        Tensor& gx = grad_of(0);  // dY W^T
        const Tensor wt = transpose(w);
        k.gemm(false, g.rows, w.rows, w.cols, g.data.data(), g.cols,
               wt.data.data(), wt.cols, gx.data.data(), gx.cols, true);
      }
      if (wants(1)) {
        Tensor& gw = grad_of(1);  // X^T dY
        k.gemm(true, w.rows, w.cols, g.rows, x.data.data(), x.cols,
               g.data.data(), g.cols, gw.data.data(), gw.cols, true);
      }
      if (wants(2)) {
        Tensor& gb = grad_of(2);
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t c = 0; c < g.cols; ++c) gb.data[c] += g(r, c);
      }
      break;
    }
    case Op::relu: {
      const Tensor& x = in_val(0);
      Tensor local(x.rows, x.cols);
      simd::kernels().relu_backward(x.data.data(), g.data.data(),
                                    local.data.data(), x.size());
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < local.size(); ++i) gx.data[i] += local.data[i];
      break;
    }
    case Op::batch_norm_train: {
      const Tensor& gamma = in_val(1);
      const Tensor& xhat = n.saved[2];
      const Tensor& istd = n.saved[3];
      const std::size_t rows = g.rows, cols = g.cols;
      std::vector<double> sum_g(cols, 0.0), sum_gx(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data.data() + r * cols;
        const double* xr = xhat.data.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
          sum_g[c] += gr[c];
          sum_gx[c] += gr[c] * xr[c];
        }
      }
      if (wants(1)) {
        Tensor& gg = grad_of(1);
        for (std::size_t c = 0; c < cols; ++c) gg.data[c] += sum_gx[c];
      }
      if (wants(2)) {
        Tensor& gb = grad_of(2);
        for (std::size_t c = 0; c < cols; ++c) gb.data[c] += sum_g[c];
      }
      if (wants(0)) {
        Tensor& gx = grad_of(0);
        const auto b = static_cast<double>(rows);
        std::vector<double> coef(cols);
        for (std::size_t c = 0; c < cols; ++c)
          coef[c] = gamma.data[c] * istd.data[c] / b;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data.data() + r * cols;
          const double* xr = xhat.data.data() + r * cols;
          double* out = gx.data.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c)
            out[c] += coef[c] * (b * gr[c] - sum_g[c] - xr[c] * sum_gx[c]);
        }
      }
      break;
    }
    case Op::batch_norm_eval: {
      const Tensor& x = in_val(0);
      const Tensor& gamma = in_val(1);
      const Tensor& rm = in_val(3);
      const Tensor& rv = in_val(4);
      for (std::size_t c = 0; c < g.cols; ++c) {
        const double istd = 1.0 / std::sqrt(rv.data[c] + n.attrs.scalar);
        double sg = 0.0, sgx = 0.0;
        for (std::size_t r = 0; r < g.rows; ++r) {
          sg += g(r, c);
          sgx += g(r, c) * (x(r, c) - rm.data[c]) * istd;
        }
        if (wants(0)) {
          Tensor& gx = grad_of(0);
          for (std::size_t r = 0; r < g.rows; ++r)
            gx(r, c) += g(r, c) * gamma.data[c] * istd;
        }
        if (wants(1)) grad_of(1).data[c] += sgx;
        if (wants(2)) grad_of(2).data[c] += sg;
        if (wants(3)) grad_of(3).data[c] -= gamma.data[c] * istd * sg;
        if (wants(4)) grad_of(4).data[c] -= 0.5 * gamma.data[c] * sgx * istd * istd;
      }
      break;
    }
    case Op::scaled_softmax: {
      const Tensor& y = n.value;
      const Tensor& s = n.saved[0];
      for (std::size_t r = 0; r < g.rows; ++r) {
        double dot = 0.0;  // sum_i gy_i * s_i
        for (std::size_t i = 0; i < g.cols; ++i) dot += g(r, i) * s(r, i);
        if (wants(0)) {
          Tensor& gz = grad_of(0);
          const double p = in_val(1).data[r];
          for (std::size_t j = 0; j < g.cols; ++j)
            gz(r, j) += y(r, j) * g(r, j) - p * s(r, j) * dot;
        }
        if (wants(1)) grad_of(1).data[r] += dot;
      }
      break;
    }
    case Op::gram: {
      const Tensor& h = in_val(0);
      const Tensor& q = in_val(1);
      const std::size_t m = n.attrs.dim;
      const std::size_t k = h.cols / (2 * m);
      for (std::size_t r = 0; r < g.rows; ++r) {
        const CMat abar = hermitian_part(linalg::unpack_matrix(g.row(r), m));
        for (std::size_t j = 0; j < k; ++j) {
          const CVec hj = linalg::unpack(h.row(r), k, m, j);
          const CVec ah = linalg::matvec(abar, hj);
          if (wants(1)) grad_of(1)(r, j) += linalg::hdot(hj, ah).real();
          if (wants(0)) {
            auto gh = grad_of(0).row(r);
            const double w = 2.0 * q(r, j);
            for (std::size_t i = 0; i < m; ++i) {
              gh[j * m + i] += w * ah.re[i];
              gh[k * m + j * m + i] += w * ah.im[i];
            }
          }
        }
      }
      break;
    }
    case Op::hpd_solve: {
      const Tensor& x = n.value;
      if (n.factors.empty()) break;
      const std::size_t m = n.factors.front().size();
      const std::size_t nr = x.cols / (2 * m);
      for (std::size_t r = 0; r < g.rows; ++r) {
        const linalg::Cholesky& chol = n.factors[r];
        CMat abar(m);
        for (std::size_t j = 0; j < nr; ++j) {
          // rhs adjoint A^{-1} xbar, matrix adjoint -rhsbar x^H
          const CVec bbar = chol.solve(linalg::unpack(g.row(r), nr, m, j));
          const CVec xj = linalg::unpack(x.row(r), nr, m, j);
          if (wants(1)) {
            auto gb = grad_of(1).row(r);
            for (std::size_t i = 0; i < m; ++i) {
              gb[j * m + i] += bbar.re[i];
              gb[nr * m + j * m + i] += bbar.im[i];
            }
          }
          for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = 0; b < m; ++b)
              abar.set(a, b, abar(a, b) - bbar[a] * std::conj(xj[b]));
        }
        if (wants(0)) {
          const CMat herm = hermitian_part(abar);
          auto ga = grad_of(0).row(r);
          for (std::size_t i = 0; i < m * m; ++i) {
            ga[i] += herm.re[i];
            ga[m * m + i] += herm.im[i];
          }
        }
      }
      break;
    }
    case Op::hdot: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const std::size_t m = n.attrs.dim;
      const std::size_t ra = a.cols / (2 * m);
      const std::size_t sb = b.cols / (2 * m);
      for (std::size_t r = 0; r < g.rows; ++r) {
        const auto gr = g.row(r);
        auto gbar = [&](std::size_t i, std::size_t j) {
          return Complex(gr[i * sb + j], gr[ra * sb + i * sb + j]);
        };
        const auto arow = a.row(r);
        const auto brow = b.row(r);
        auto a_at = [&](std::size_t i, std::size_t e) {
          return Complex(arow[i * m + e], arow[ra * m + i * m + e]);
        };
        auto b_at = [&](std::size_t j, std::size_t e) {
          return Complex(brow[j * m + e], brow[sb * m + j * m + e]);
        };
        if (wants(0)) {
          auto ga = grad_of(0).row(r);
          for (std::size_t i = 0; i < ra; ++i)
            for (std::size_t e = 0; e < m; ++e) {
              Complex s{0.0, 0.0};
              for (std::size_t j = 0; j < sb; ++j)
                s += std::conj(gbar(i, j)) * b_at(j, e);
              ga[i * m + e] += s.real();
              ga[ra * m + i * m + e] += s.imag();
            }
        }
        if (wants(1)) {
          auto gb = grad_of(1).row(r);
          for (std::size_t j = 0; j < sb; ++j)
            for (std::size_t e = 0; e < m; ++e) {
              Complex s{0.0, 0.0};
              for (std::size_t i = 0; i < ra; ++i) s += gbar(i, j) * a_at(i, e);
              gb[j * m + e] += s.real();
              gb[sb * m + j * m + e] += s.imag();
            }
        }
      }
      break;
    }
    case Op::norm2: {
      const Tensor& x = in_val(0);
      const std::size_t len = n.attrs.dim;
      const std::size_t groups = g.cols;
      Tensor& gx = grad_of(0);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const double w = 2.0 * g(r, gi);
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t c = gi * len + i;
            gx(r, c) += w * x(r, c);
            gx(r, groups * len + c) += w * x(r, groups * len + c);
          }
        }
      break;
    }
    case Op::scale_groups: {
      const Tensor& x = in_val(0);
      const Tensor& s = in_val(1);
      const std::size_t groups = s.cols;
      const std::size_t len = x.cols / (2 * groups);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t gi = 0; gi < groups; ++gi) {
          double ds = 0.0;
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t c = gi * len + i;
            const std::size_t ci = groups * len + c;
            ds += g(r, c) * x(r, c) + g(r, ci) * x(r, ci);
            if (wants(0)) {
              Tensor& gx = grad_of(0);
              gx(r, c) += s(r, gi) * g(r, c);
              gx(r, ci) += s(r, gi) * g(r, ci);
            }
          }
          if (wants(1)) grad_of(1)(r, gi) += ds;
        }
      break;
    }
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const bool bc = broadcasts(a, b);
      for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) {
          const double gy = g(r, c);
          const double x = a(r, c);
          const double y = bval(b, bc, r, c);
          double da = 0.0, db = 0.0;
          switch (n.op) {
            case Op::add: da = gy; db = gy; break;
            case Op::sub: da = gy; db = -gy; break;
            case Op::mul: da = gy * y; db = gy * x; break;
            default: da = gy / y; db = -gy * x / (y * y); break;
          }
          if (wants(0)) grad_of(0)(r, c) += da;
          if (wants(1)) {
            Tensor& gb = grad_of(1);
            if (bc) gb.data[r] += db;
            else gb(r, c) += db;
          }
        }
      break;
    }
    case Op::sqrt: {
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.data[i] += g.data[i] / (2.0 * n.value.data[i]);
      break;
    }
    case Op::log2: {
      const Tensor& x = in_val(0);
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.data[i] += g.data[i] / (x.data[i] * std::numbers::ln2);
      break;
    }
    case Op::add_scalar: {
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
      break;
    }
    case Op::scale: {
      Tensor& gx = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.data[i] += n.attrs.scalar * g.data[i];
      break;
    }
    case Op::gather: {
      Tensor& gx = grad_of(0);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t j = 0; j < n.attrs.index.size(); ++j)
          gx(r, n.attrs.index[j]) += g(r, j);
      break;
    }
    case Op::group_sum: {
      Tensor& gx = grad_of(0);
      const std::size_t len = n.attrs.dim;
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t gi = 0; gi < g.cols; ++gi)
          for (std::size_t i = 0; i < len; ++i) gx(r, gi * len + i) += g(r, gi);
      break;
    }
    case Op::concat: {
      const std::size_t na = in_val(0).cols;
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) {
          if (c < na) {
            if (wants(0)) grad_of(0)(r, c) += g(r, c);
          } else if (wants(1)) {
            grad_of(1)(r, c - na) += g(r, c);
          }
        }
      break;
    }
    case Op::mean: {
      Tensor& gx = grad_of(0);
      const double w = g.data[0] / static_cast<double>(gx.size());
      for (double& v : gx.data) v += w;
      break;
    }
    case Op::leaf:
    case Op::kCount:
      break;
  }
}

GradMap Tape::backward(Var loss) {
  if (!recording_)
    throw std::logic_error("Tape::backward: tape was not recording");
  if (consumed_)
    throw std::logic_error("Tape::backward: tape already differentiated");
  const Node& ln = node(loss);
  if (ln.val().rows != 1 || ln.val().cols != 1)
    throw ShapeError("Tape::backward: loss must be a scalar, got " +
                     dims(ln.val()));
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.id)] = Tensor(1, 1, 1.0);
  for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.op == Op::leaf || !n.needs_grad || grads[i].data.empty()) continue;
    backward_node(n, grads[i], grads);
    grads[i] = Tensor();  // release early
  }

  GradMap out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.is_param) continue;
    if (grads[i].data.empty())
      out.add(n.name, Tensor(n.val().rows, n.val().cols));
    else
      out.add(n.name, std::move(grads[i]));
  }
  return out;
}

// --------------------------------------------------------------- builders

namespace {
Var rec(Tape& t, Op op, std::initializer_list<Var> in, Attrs a = {}) {
  return t.record(op, std::span<const Var>(in.begin(), in.size()), std::move(a));
}
Attrs scalar_attr(double s) {
  Attrs a;
  a.scalar = s;
  return a;
}
Attrs dim_attr(std::size_t d, double s = 0.0) {
  Attrs a;
  a.dim = d;
  a.scalar = s;
  return a;
}
}  // namespace

Var affine(Tape& t, Var x, Var w, Var b) { return rec(t, Op::affine, {x, w, b}); }
Var relu(Tape& t, Var x) { return rec(t, Op::relu, {x}); }
Var batch_norm_train(Tape& t, Var x, Var gamma, Var beta, double eps) {
  return rec(t, Op::batch_norm_train, {x, gamma, beta}, scalar_attr(eps));
}
Var batch_norm_eval(Tape& t, Var x, Var gamma, Var beta, Var mean, Var var,
                    double eps) {
  return rec(t, Op::batch_norm_eval, {x, gamma, beta, mean, var},
             scalar_attr(eps));
}
Var scaled_softmax(Tape& t, Var z, Var power) {
  return rec(t, Op::scaled_softmax, {z, power});
}
Var gram(Tape& t, Var h, Var q, std::size_t m, double sigma2) {
  return rec(t, Op::gram, {h, q}, dim_attr(m, sigma2));
}
Var hpd_solve(Tape& t, Var a, Var rhs) { return rec(t, Op::hpd_solve, {a, rhs}); }
Var hdot(Tape& t, Var a, Var b, std::size_t m) {
  return rec(t, Op::hdot, {a, b}, dim_attr(m));
}
Var norm2(Tape& t, Var x, std::size_t group) {
  return rec(t, Op::norm2, {x}, dim_attr(group));
}
Var scale_groups(Tape& t, Var x, Var s) { return rec(t, Op::scale_groups, {x, s}); }
Var add(Tape& t, Var a, Var b) { return rec(t, Op::add, {a, b}); }
Var sub(Tape& t, Var a, Var b) { return rec(t, Op::sub, {a, b}); }
Var mul(Tape& t, Var a, Var b) { return rec(t, Op::mul, {a, b}); }
Var div(Tape& t, Var a, Var b) { return rec(t, Op::div, {a, b}); }
Var sqrt(Tape& t, Var x) { return rec(t, Op::sqrt, {x}); }
Var log2(Tape& t, Var x) { return rec(t, Op::log2, {x}); }
Var add_scalar(Tape& t, Var x, double c) {
  return rec(t, Op::add_scalar, {x}, scalar_attr(c));
}
Var scale(Tape& t, Var x, double c) { return rec(t, Op::scale, {x}, scalar_attr(c)); }
Var gather(Tape& t, Var x, std::vector<std::size_t> index) {
  Attrs a;
  a.index = std::move(index);
  return rec(t, Op::gather, {x}, std::move(a));
}
Var slice(Tape& t, Var x, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return gather(t, x, std::move(idx));
}
Var group_sum(Tape& t, Var x, std::size_t group) {
  return rec(t, Op::group_sum, {x}, dim_attr(group));
}
Var concat(Tape& t, Var a, Var b) { return rec(t, Op::concat, {a, b}); }
Var mean(Tape& t, Var x) { return rec(t, Op::mean, {x}); }

// ------------------------------------------------------ finite differences

GradMap finite_diff_grad(const ScalarFn& f, NamedTensors params, double step) {
  if (!(step > 0.0)) throw DomainError("finite_diff_grad: step must be > 0");
  GradMap out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor grad(params[p].second.rows, params[p].second.cols);
    for (std::size_t i = 0; i < grad.size(); ++i) {
      double& coord = params[p].second.data[i];
      const double orig = coord;
      coord = orig + step;
      const double fp = f(params);
      coord = orig - step;
      const double fm = f(params);
      coord = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("finite_diff_grad: non-finite objective at '" +
                           params[p].first + "'[" + std::to_string(i) + "]");
      grad.data[i] = (fp - fm) / (2.0 * step);
    }
    out.add(params[p].first, std::move(grad));
  }
  return out;
}

}  // namespace unibf::ad
