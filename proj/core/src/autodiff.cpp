#include "radloc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Dense>

#include "radloc/error.hpp"
#include "radloc/se2.hpp"

namespace radloc::ad {

namespace {

thread_local bool g_grad_enabled = true;
thread_local KinkTrace* g_kinks = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

using BackwardFn = std::function<void(const Node&)>;

Tensor make_out(Shape shape, std::vector<double> value, std::initializer_list<Tensor> parents, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool req = false;
    for (const Tensor& p : parents)
      if (p.defined() && p.requires_grad()) req = true;
    if (req) {
      n->requires_grad = true;
      // constant inputs are kept alive too: backward closures read their values
      for (const Tensor& p : parents)
        if (p.defined()) n->parents.push_back(p.node_ptr());
      n->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

Tensor make_out_many(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    for (const Tensor& p : parents)
      if (p.defined() && p.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
      for (const Tensor& p : parents)
        if (p.defined()) n->parents.push_back(p.node_ptr());
      n->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

// Gradient sink for a parent: null when the parent does not need gradients.
double* grad_of(Node* n) { return (n && n->requires_grad) ? n->ensure_grad().data() : nullptr; }

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ConfigError(std::string(op) + ": " + msg);
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    std::ostringstream os;
    os << "expected rank " << r << ", got shape " << shape_str(t.shape());
    throw ConfigError(std::string(op) + ": " + os.str());
  }
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Node* an = a.node();
  return make_out(a.shape(), std::move(out), {a}, [an, df](const Node& o) {
    double* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t i = 0; i < o.value.size(); ++i) ga[i] += o.grad[i] * df(an->value[i], o.value[i]);
  });
}

// DF(a, b, out, da&, db&)
template <class F, class DF>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DF df) {
  const std::size_t na = a.numel(), nb = b.numel();
  if (na != nb && na != 1 && nb != 1) {
    throw ConfigError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (na == nb && a.shape() != b.shape() && na != 1) {
    throw ConfigError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = std::max(na, nb);
  const Shape shape = (na >= nb) ? a.shape() : b.shape();
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[na == 1 ? 0 : i], bv[nb == 1 ? 0 : i]);
  Node* an = a.node();
  Node* bn = b.node();
  return make_out(shape, std::move(out), {a, b}, [an, bn, na, nb, df](const Node& o) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    for (std::size_t i = 0; i < o.value.size(); ++i) {
      const std::size_t ia = na == 1 ? 0 : i;
      const std::size_t ib = nb == 1 ? 0 : i;
      double da = 0.0, db = 0.0;
      df(an->value[ia], bn->value[ib], o.value[i], da, db);
      if (ga) ga[ia] += o.grad[i] * da;
      if (gb) gb[ib] += o.grad[i] * db;
    }
  });
}

}  // namespace

std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ")";
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

KinkTrace::KinkTrace() : prev_(g_kinks) { g_kinks = this; }
KinkTrace::~KinkTrace() { g_kinks = prev_; }

bool kink_tracing() { return g_kinks != nullptr; }

void record_branch(std::int64_t id) {
  if (!g_kinks) return;
  g_kinks->digest_ = (g_kinks->digest_ ^ static_cast<std::uint64_t>(id)) * 1099511628211ull;
  ++g_kinks->count_;
}

Tensor custom_op(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 std::function<void(const Node&)> backward) {
  if (numel_of(shape) != value.size()) throw ConfigError("custom_op: value size does not match " + shape_str(shape));
  return make_out_many(std::move(shape), std::move(value), inputs, std::move(backward));
}

// ------------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value.assign(numel_of(shape), v);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw ConfigError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

double Tensor::item() const {
  if (numel() != 1) throw ConfigError("Tensor::item on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::backward() const {
  if (numel() != 1) throw ConfigError("Tensor::backward without seed on non-scalar " + shape_str(shape()));
  const double one = 1.0;
  backward(std::span<const double>(&one, 1));
}

void Tensor::backward(std::span<const double> seed) const {
  if (!node_->requires_grad) return;
  if (seed.size() != numel()) throw ConfigError("Tensor::backward: seed size mismatch");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto& g = node_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are transient; leaves keep accumulating.
  for (Node* n : order) {
    if (n->backward_fn) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

void Tensor::zero_grad() const {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

// -------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double, double, double& da, double& db) { da = 1.0; db = 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double, double, double& da, double& db) { da = 1.0; db = -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double x, double y, double, double& da, double& db) { da = y; db = x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(a, b, "div", [](double x, double y) { return x / y; },
                [](double, double y, double o, double& da, double& db) {
                  da = 1.0 / y;
                  db = -o / y;
                });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

static void trace_sides(const Tensor& a, double at) {
  if (!g_kinks) return;
  for (double x : a.data()) record_branch(x > at ? 1 : 0);
}

Tensor relu(const Tensor& a) {
  trace_sides(a, 0.0);
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_clamped(const Tensor& a, double floor) {
  trace_sides(a, floor);
  return unary(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x >= floor ? 1.0 / x : 0.0; });
}

Tensor sin(const Tensor& a) {
  return unary(a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary(a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  trace_sides(a, floor);
  return unary(
      a, [floor](double x) { return std::max(x, floor); }, [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Tensor wrap_angle(const Tensor& a) {
  if (g_kinks)
    for (double x : a.data()) record_branch(static_cast<std::int64_t>(std::lround((x - radloc::wrap_angle(x)) / (2.0 * kPi))));
  return unary(a, [](double x) { return radloc::wrap_angle(x); }, [](double, double) { return 1.0; });
}

// ------------------------------------------------------------ shape & reduce

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Node* an = a.node();
  return make_out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), {a}, [an](const Node& o) {
    double* ga = grad_of(an);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  const auto v = a.data();
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  Node* an = a.node();
  return make_out({1}, {s}, {a}, [an](const Node& o) {
    double* ga = grad_of(an);
    for (std::size_t i = 0; i < an->value.size(); ++i) ga[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor index(const Tensor& a, std::size_t i) {
  if (i >= a.numel()) throw ConfigError("index: out of range");
  Node* an = a.node();
  return make_out({1}, {a.at(i)}, {a}, [an, i](const Node& o) { grad_of(an)[i] += o.grad[0]; });
}

Tensor stack(const std::vector<Tensor>& scalars, Shape shape) {
  if (numel_of(shape) != scalars.size()) throw ConfigError("stack: element count does not match shape");
  std::vector<double> v(scalars.size());
  std::vector<Node*> nodes(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].numel() != 1) throw ConfigError("stack: elements must be scalars");
    v[i] = scalars[i].at(0);
    nodes[i] = scalars[i].node();
  }
  return make_out_many(std::move(shape), std::move(v), scalars, [nodes](const Node& o) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (double* g = grad_of(nodes[i])) g[0] += o.grad[i];
    }
  });
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  require(a.rank() >= 1 && begin >= 0 && end <= a.dim(0) && begin < end, "slice_rows", "bad range");
  const std::size_t row = a.numel() / static_cast<std::size_t>(a.dim(0));
  Shape shape = a.shape();
  shape[0] = end - begin;
  const std::size_t off = static_cast<std::size_t>(begin) * row;
  std::vector<double> v(a.data().begin() + static_cast<std::ptrdiff_t>(off),
                        a.data().begin() + static_cast<std::ptrdiff_t>(off + row * static_cast<std::size_t>(end - begin)));
  Node* an = a.node();
  return make_out(std::move(shape), std::move(v), {a}, [an, off](const Node& o) {
    double* ga = grad_of(an);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[off + i] += o.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  Shape shape = parts[0].shape();
  int rows = 0;
  std::vector<double> v;
  std::vector<Node*> nodes;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    require(s.size() == shape.size() && std::equal(s.begin() + 1, s.end(), shape.begin() + 1), "concat_rows",
            "trailing shapes differ");
    rows += s[0];
    v.insert(v.end(), p.data().begin(), p.data().end());
    nodes.push_back(p.node());
  }
  shape[0] = rows;
  return make_out_many(std::move(shape), std::move(v), parts, [nodes](const Node& o) {
    std::size_t off = 0;
    for (Node* n : nodes) {
      if (double* g = grad_of(n))
        for (std::size_t i = 0; i < n->value.size(); ++i) g[i] += o.grad[off + i];
      off += n->value.size();
    }
  });
}

// -------------------------------------------------------------- small linalg

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul", "inner dimensions differ");
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MapMat(out.data(), m, n).noalias() = CMapMat(a.data().data(), m, k) * CMapMat(b.data().data(), k, n);
  Node* an = a.node();
  Node* bn = b.node();
  return make_out({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](const Node& o) {
    CMapMat g(o.grad.data(), m, n);
    if (double* ga = grad_of(an)) MapMat(ga, m, k).noalias() += g * CMapMat(bn->value.data(), k, n).transpose();
    if (double* gb = grad_of(bn)) MapMat(gb, k, n).noalias() += CMapMat(an->value.data(), m, k).transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.numel());
  MapMat(out.data(), n, m) = CMapMat(a.data().data(), m, n).transpose();
  Node* an = a.node();
  return make_out({n, m}, std::move(out), {a}, [an, m, n](const Node& o) {
    MapMat(grad_of(an), m, n) += CMapMat(o.grad.data(), n, m).transpose();
  });
}

Tensor inverse(const Tensor& a) {
  require_rank(a, 2, "inverse");
  const int n = a.dim(0);
  require(a.dim(1) == n, "inverse", "matrix must be square");
  CMapMat am(a.data().data(), n, n);
  Eigen::FullPivLU<RowMat> lu(am);
  if (!lu.isInvertible()) throw NumericalError("inverse: singular matrix");
  std::vector<double> out(a.numel());
  MapMat(out.data(), n, n) = lu.inverse();
  Node* an = a.node();
  return make_out({n, n}, std::move(out), {a}, [an, n](const Node& o) {
    CMapMat inv(o.value.data(), n, n);
    MapMat(grad_of(an), n, n).noalias() -= inv.transpose() * CMapMat(o.grad.data(), n, n) * inv.transpose();
  });
}

namespace {

// Cofactor matrix C with det = sum_j A(0,j) C(0,j); d det / dA = C.
RowMat cofactors(const RowMat& a) {
  const auto n = a.rows();
  RowMat c(n, n);
  if (n == 1) {
    c(0, 0) = 1.0;
  } else if (n == 2) {
    c << a(1, 1), -a(1, 0), -a(0, 1), a(0, 0);
  } else if (n == 3) {
    c(0, 0) = a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1);
    c(0, 1) = -(a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0));
    c(0, 2) = a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0);
    c(1, 0) = -(a(0, 1) * a(2, 2) - a(0, 2) * a(2, 1));
    c(1, 1) = a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0);
    c(1, 2) = -(a(0, 0) * a(2, 1) - a(0, 1) * a(2, 0));
    c(2, 0) = a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1);
    c(2, 1) = -(a(0, 0) * a(1, 2) - a(0, 2) * a(1, 0));
    c(2, 2) = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
  } else {
    c = a.determinant() * a.inverse().transpose();
  }
  return c;
}

}  // namespace

Tensor det(const Tensor& a) {
  require_rank(a, 2, "det");
  const int n = a.dim(0);
  require(a.dim(1) == n, "det", "matrix must be square");
  const RowMat am = CMapMat(a.data().data(), n, n);
  const double d = am.determinant();
  Node* an = a.node();
  return make_out({1}, {d}, {a}, [an, n](const Node& o) {
    const RowMat c = cofactors(CMapMat(an->value.data(), n, n));
    MapMat(grad_of(an), n, n) += o.grad[0] * c;
  });
}

// ---------------------------------------------------------------- row-wise

Tensor softmin_rows(const Tensor& x, double tau) {
  require_rank(x, 2, "softmin_rows");
  require(tau > 0.0, "softmin_rows", "temperature must be positive");
  const int rows = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (int r = 0; r < rows; ++r) {
    const double* in = xv.data() + static_cast<std::size_t>(r) * n;
    double* y = out.data() + static_cast<std::size_t>(r) * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, -in[i] / tau);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      y[i] = std::exp(-in[i] / tau - mx);
      z += y[i];
    }
    for (int i = 0; i < n; ++i) y[i] /= z;
  }
  Node* xn = x.node();
  return make_out(x.shape(), std::move(out), {x}, [xn, rows, n, tau](const Node& o) {
    double* gx = grad_of(xn);
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * n;
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += o.grad[off + i] * o.value[off + i];
      for (int i = 0; i < n; ++i) gx[off + i] += -(1.0 / tau) * o.value[off + i] * (o.grad[off + i] - dot);
    }
  });
}

Tensor row_dot(const Tensor& x, std::span<const double> w) {
  require_rank(x, 2, "row_dot");
  const int rows = x.dim(0), n = x.dim(1);
  require(static_cast<int>(w.size()) == n, "row_dot", "weight length mismatch");
  std::vector<double> weights(w.begin(), w.end());
  std::vector<double> out(static_cast<std::size_t>(rows), 0.0);
  for (int r = 0; r < rows; ++r)
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(r)] += x.at(static_cast<std::size_t>(r) * n + i) * weights[i];
  Node* xn = x.node();
  return make_out({rows}, std::move(out), {x}, [xn, rows, n, weights = std::move(weights)](const Node& o) {
    double* gx = grad_of(xn);
    for (int r = 0; r < rows; ++r)
      for (int i = 0; i < n; ++i) gx[static_cast<std::size_t>(r) * n + i] += o.grad[r] * weights[i];
  });
}

Tensor axis_marginal(const Tensor& v, int nx, int ny, int nt, int axis) {
  require_rank(v, 2, "axis_marginal");
  const int rows = v.dim(0);
  require(v.dim(1) == nx * ny * nt, "axis_marginal", "volume size does not match grid counts");
  require(axis >= 0 && axis <= 2, "axis_marginal", "axis must be 0, 1 or 2");
  const int na = axis == 0 ? nx : axis == 1 ? ny : nt;
  const int n = nx * ny * nt;
  auto bin = [=](int m) {
    const int k = m % nt;
    const int j = (m / nt) % ny;
    const int i = m / (nt * ny);
    return axis == 0 ? i : axis == 1 ? j : k;
  };
  std::vector<double> out(static_cast<std::size_t>(rows) * na, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int m = 0; m < n; ++m) out[static_cast<std::size_t>(r) * na + bin(m)] += v.at(static_cast<std::size_t>(r) * n + m);
  Node* vn = v.node();
  return make_out({rows, na}, std::move(out), {v}, [vn, rows, n, na, bin](const Node& o) {
    double* gv = grad_of(vn);
    for (int r = 0; r < rows; ++r)
      for (int m = 0; m < n; ++m) gv[static_cast<std::size_t>(r) * n + m] += o.grad[static_cast<std::size_t>(r) * na + bin(m)];
  });
}

// ---------------------------------------------------------------- image ops

namespace {

// Row r of the column matrix starts at cols + r * pitch.
void im2col_strided(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, double* cols,
                    std::size_t pitch) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = cols + static_cast<std::size_t>((ci * k + ki) * k + kj) * pitch;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          double* dst = row + static_cast<std::size_t>(oh) * wo;
          if (ih < 0 || ih >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(ci) * h + ih) * w;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[ow] = (iw >= 0 && iw < w) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_strided(const double* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo, double* gx,
                    std::size_t pitch) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = cols + static_cast<std::size_t>((ci * k + ki) * k + kj) * pitch;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          double* dst = gx + (static_cast<std::size_t>(ci) * h + ih) * w;
          const double* src = row + static_cast<std::size_t>(oh) * wo;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Reused im2col buffers; every element is written before it is read.
double* scratch(int slot, std::size_t n) {
  thread_local std::vector<double> buf[2];
  if (buf[slot].size() < n) buf[slot].resize(n);
  return buf[slot].data();
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  require(w.dim(1) == c && w.dim(3) == k, "conv2d",
          "weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  require(!b.defined() || static_cast<int>(b.numel()) == o, "conv2d", "bias length mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d", "input smaller than kernel");
  const int ckk = c * k * k;
  const int plane = ho * wo;

  // Several images share one GEMM; small per-image products are slow.
  const int chunk = std::clamp(static_cast<int>((std::size_t{1} << 18) / (static_cast<std::size_t>(ckk) * plane)), 1, n);
  const std::size_t in_sz = static_cast<std::size_t>(c) * h * wd;
  const std::size_t out_sz = static_cast<std::size_t>(o) * plane;

  std::vector<double> out(static_cast<std::size_t>(n) * out_sz);
  double* cols = scratch(0, static_cast<std::size_t>(ckk) * plane * chunk);
  RowMat prod(o, static_cast<Eigen::Index>(plane) * chunk);
  CMapMat wm(w.data().data(), o, ckk);
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int m = std::min(chunk, n - n0);
    const Eigen::Index width = static_cast<Eigen::Index>(plane) * m;
    for (int i = 0; i < m; ++i)
      im2col_strided(x.data().data() + (n0 + i) * in_sz, c, h, wd, k, stride, pad, ho, wo, cols + i * plane,
                     width);
    Eigen::Map<RowMat, 0, Eigen::OuterStride<>> cm(cols, ckk, width, Eigen::OuterStride<>(width));
    prod.leftCols(width).noalias() = wm * cm;
    for (int i = 0; i < m; ++i) {
      MapMat om(out.data() + (n0 + i) * out_sz, o, plane);
      om = prod.block(0, static_cast<Eigen::Index>(i) * plane, o, plane);
      if (b.defined()) {
        for (int oi = 0; oi < o; ++oi) om.row(oi).array() += b.at(static_cast<std::size_t>(oi));
      }
    }
  }

  Node* xn = x.node();
  Node* wn = w.node();
  Node* bn = b.defined() ? b.node() : nullptr;
  return make_out({n, o, ho, wo}, std::move(out), {x, w, b},
                  [=](const Node& out_node) {
                    double* gx = grad_of(xn);
                    double* gw = grad_of(wn);
                    double* gb = grad_of(bn);
                    double* cols_b = gw ? scratch(1, static_cast<std::size_t>(ckk) * plane * chunk) : nullptr;
                    RowMat g(o, static_cast<Eigen::Index>(plane) * chunk);
                    RowMat gcols(gx ? ckk : 0, gx ? static_cast<Eigen::Index>(plane) * chunk : 0);
                    CMapMat wmat(wn->value.data(), o, ckk);
                    for (int n0 = 0; n0 < n; n0 += chunk) {
                      const int m = std::min(chunk, n - n0);
                      const Eigen::Index width = static_cast<Eigen::Index>(plane) * m;
                      for (int i = 0; i < m; ++i)
                        g.block(0, static_cast<Eigen::Index>(i) * plane, o, plane) =
                            CMapMat(out_node.grad.data() + (n0 + i) * out_sz, o, plane);
                      if (gb) {
                        for (int oi = 0; oi < o; ++oi) gb[oi] += g.row(oi).head(width).sum();
                      }
                      if (gw) {
                        for (int i = 0; i < m; ++i)
                          im2col_strided(xn->value.data() + (n0 + i) * in_sz, c, h, wd, k, stride, pad, ho, wo,
                                         cols_b + i * plane, width);
                        Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> cm(cols_b, ckk, width,
                                                                              Eigen::OuterStride<>(width));
                        MapMat(gw, o, ckk).noalias() += g.leftCols(width) * cm.transpose();
                      }
                      if (gx) {
                        gcols.leftCols(width).noalias() = wmat.transpose() * g.leftCols(width);
                        for (int i = 0; i < m; ++i)
                          col2im_strided(gcols.data() + static_cast<std::size_t>(i) * plane, c, h, wd, k, stride, pad,
                                         ho, wo, gx + (n0 + i) * in_sz, gcols.cols());
                      }
                    }
                  });
}

Tensor max_pool2x2(const Tensor& x) {
  require_rank(x, 4, "max_pool2x2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h / 2, wo = w / 2;
  require(ho > 0 && wo > 0, "max_pool2x2", "input too small");
  std::vector<double> out(static_cast<std::size_t>(n) * c * ho * wo);
  std::vector<std::size_t> arg(out.size());
  const auto xv = x.data();
  std::size_t oi = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * h * w;
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j, ++oi) {
        std::size_t best = base + static_cast<std::size_t>(2 * i) * w + 2 * j;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const std::size_t idx = base + static_cast<std::size_t>(2 * i + di) * w + 2 * j + dj;
            if (xv[idx] > xv[best]) best = idx;
          }
        out[oi] = xv[best];
        arg[oi] = best;
        if (g_kinks) record_branch(static_cast<std::int64_t>(best));
      }
    }
  }
  Node* xn = x.node();
  return make_out({n, c, ho, wo}, std::move(out), {x}, [xn, arg = std::move(arg)](const Node& o) {
    double* gx = grad_of(xn);
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = 2 * h, wo = 2 * w;
  std::vector<double> out(static_cast<std::size_t>(n) * c * ho * wo);
  const auto xv = x.data();
  for (int nc = 0; nc < n * c; ++nc)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j)
        out[(static_cast<std::size_t>(nc) * ho + i) * wo + j] = xv[(static_cast<std::size_t>(nc) * h + i / 2) * w + j / 2];
  Node* xn = x.node();
  return make_out({n, c, ho, wo}, std::move(out), {x}, [xn, n, c, h, w, ho, wo](const Node& o) {
    double* gx = grad_of(xn);
    for (int nc = 0; nc < n * c; ++nc)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j)
          gx[(static_cast<std::size_t>(nc) * h + i / 2) * w + j / 2] += o.grad[(static_cast<std::size_t>(nc) * ho + i) * wo + j];
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  require(b.dim(0) == n && b.dim(2) == h && b.dim(3) == w, "concat_channels",
          "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> out(static_cast<std::size_t>(n) * (ca + cb) * plane);
  for (int ni = 0; ni < n; ++ni) {
    std::copy_n(a.data().data() + ni * ca * plane, ca * plane, out.data() + ni * (ca + cb) * plane);
    std::copy_n(b.data().data() + ni * cb * plane, cb * plane, out.data() + (ni * (ca + cb) + ca) * plane);
  }
  Node* an = a.node();
  Node* bn = b.node();
  return make_out({n, ca + cb, h, w}, std::move(out), {a, b}, [an, bn, n, ca, cb, plane](const Node& o) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    for (int ni = 0; ni < n; ++ni) {
      const double* g = o.grad.data() + ni * (ca + cb) * plane;
      if (ga)
        for (std::size_t i = 0; i < ca * plane; ++i) ga[ni * ca * plane + i] += g[i];
      if (gb)
        for (std::size_t i = 0; i < cb * plane; ++i) gb[ni * cb * plane + i] += g[ca * plane + i];
    }
  });
}

Tensor instance_norm(const Tensor& x, double eps) {
  require_rank(x, 4, "instance_norm");
  const int nc = x.dim(0) * x.dim(1);
  const std::size_t m = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(static_cast<std::size_t>(nc));
  const auto xv = x.data();
  for (int g = 0; g < nc; ++g) {
    const double* in = xv.data() + g * m;
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += in[i];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(g)] = is;
    for (std::size_t i = 0; i < m; ++i) out[g * m + i] = (in[i] - mu) * is;
  }
  Node* xn = x.node();
  return make_out(x.shape(), std::move(out), {x}, [xn, nc, m, inv_std = std::move(inv_std)](const Node& o) {
    double* gx = grad_of(xn);
    for (int g = 0; g < nc; ++g) {
      const double* gy = o.grad.data() + g * m;
      const double* y = o.value.data() + g * m;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        mg += gy[i];
        mgy += gy[i] * y[i];
      }
      mg /= static_cast<double>(m);
      mgy /= static_cast<double>(m);
      const double is = inv_std[static_cast<std::size_t>(g)];
      for (std::size_t i = 0; i < m; ++i) gx[g * m + i] += is * (gy[i] - mg - y[i] * mgy);
    }
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats* stats, bool training,
                  double momentum, double eps) {
  require_rank(x, 4, "batch_norm");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  require(static_cast<int>(gamma.numel()) == c && static_cast<int>(beta.numel()) == c, "batch_norm",
          "affine parameter length mismatch");
  const std::size_t m = static_cast<std::size_t>(n) * plane;
  if (!training) require(stats && static_cast<int>(stats->mean.size()) == c, "batch_norm", "missing running stats");
  std::vector<double> mu(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  const auto xv = x.data();
  for (int ci = 0; ci < c; ++ci) {
    if (training) {
      double s = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* in = xv.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += in[i];
      }
      const double mean_c = s / static_cast<double>(m);
      double v = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* in = xv.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (in[i] - mean_c) * (in[i] - mean_c);
      }
      const double var_b = v / static_cast<double>(m);
      mu[ci] = mean_c;
      inv_std[ci] = 1.0 / std::sqrt(var_b + eps);
      if (stats) {
        const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var_b;
        stats->mean[ci] = (1.0 - momentum) * stats->mean[ci] + momentum * mean_c;
        stats->var[ci] = (1.0 - momentum) * stats->var[ci] + momentum * unbiased;
      }
    } else {
      mu[ci] = stats->mean[ci];
      inv_std[ci] = 1.0 / std::sqrt(stats->var[ci] + eps);
    }
  }
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[off + i] = (xv[off + i] - mu[ci]) * inv_std[ci];
        out[off + i] = gamma.at(ci) * xhat[off + i] + beta.at(ci);
      }
    }
  Node* xn = x.node();
  Node* gn = gamma.node();
  Node* bn = beta.node();
  return make_out(x.shape(), std::move(out), {x, gamma, beta},
                  [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Node& o) {
                    double* gx = grad_of(xn);
                    double* gg = grad_of(gn);
                    double* gbeta = grad_of(bn);
                    for (int ci = 0; ci < c; ++ci) {
                      double sg = 0.0, sgy = 0.0;
                      for (int ni = 0; ni < n; ++ni) {
                        const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                          sg += o.grad[off + i];
                          sgy += o.grad[off + i] * xhat[off + i];
                        }
                      }
                      if (gg) gg[ci] += sgy;
                      if (gbeta) gbeta[ci] += sg;
                      if (!gx) continue;
                      const double gam = gn->value[ci];
                      const double is = inv_std[ci];
                      const double mg = sg / static_cast<double>(m);
                      const double mgy = sgy / static_cast<double>(m);
                      for (int ni = 0; ni < n; ++ni) {
                        const std::size_t off = (static_cast<std::size_t>(ni) * c + ci) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                          gx[off + i] += training ? gam * is * (o.grad[off + i] - mg - xhat[off + i] * mgy)
                                                  : gam * is * o.grad[off + i];
                        }
                      }
                    }
                  });
}

Tensor sub_broadcast_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "sub_broadcast_channels");
  require_rank(b, 4, "sub_broadcast_channels");
  const int n = b.dim(0), c = b.dim(1);
  require(a.dim(0) == n && a.dim(1) == 1 && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), "sub_broadcast_channels",
          "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " are incompatible");
  const std::size_t plane = static_cast<std::size_t>(b.dim(2)) * b.dim(3);
  std::vector<double> out(b.numel());
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* av = a.data().data() + ni * plane;
      const double* bv = b.data().data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
      double* ov = out.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
      for (std::size_t i = 0; i < plane; ++i) ov[i] = av[i] - bv[i];
    }
  Node* an = a.node();
  Node* bn = b.node();
  return make_out(b.shape(), std::move(out), {a, b}, [an, bn, n, c, plane](const Node& o) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci) {
        const double* g = o.grad.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        if (ga)
          for (std::size_t i = 0; i < plane; ++i) ga[ni * plane + i] += g[i];
        if (gb)
          for (std::size_t i = 0; i < plane; ++i) gb[(static_cast<std::size_t>(ni) * c + ci) * plane + i] -= g[i];
      }
  });
}

Tensor patchify(const Tensor& x, int k) {
  require_rank(x, 4, "patchify");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(k > 0 && h % k == 0 && w % k == 0, "patchify",
          "image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible into " + std::to_string(k) + "x" +
              std::to_string(k) + " patches");
  const int ph = h / k, pw = w / k;
  std::vector<double> out(x.numel());
  // Map from output flat index to input flat index.
  std::vector<std::size_t> src(x.numel());
  std::size_t oi = 0;
  for (int ni = 0; ni < n; ++ni)
    for (int pr = 0; pr < k; ++pr)
      for (int pc = 0; pc < k; ++pc)
        for (int ci = 0; ci < c; ++ci)
          for (int i = 0; i < ph; ++i)
            for (int j = 0; j < pw; ++j, ++oi)
              src[oi] = ((static_cast<std::size_t>(ni) * c + ci) * h + pr * ph + i) * w + pc * pw + j;
  for (std::size_t i = 0; i < oi; ++i) out[i] = x.at(src[i]);
  Node* xn = x.node();
  return make_out({n * k * k, c, ph, pw}, std::move(out), {x}, [xn, src = std::move(src)](const Node& o) {
    double* gx = grad_of(xn);
    for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += o.grad[i];
  });
}

Tensor mean_spatial(const Tensor& x) {
  require_rank(x, 4, "mean_spatial");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<double> out(static_cast<std::size_t>(n) * c, 0.0);
  for (std::size_t g = 0; g < out.size(); ++g) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += x.at(g * plane + i);
    out[g] = s / static_cast<double>(plane);
  }
  Node* xn = x.node();
  return make_out({n, c}, std::move(out), {x}, [xn, plane](const Node& o) {
    double* gx = grad_of(xn);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t g = 0; g < o.grad.size(); ++g)
      for (std::size_t i = 0; i < plane; ++i) gx[g * plane + i] += o.grad[g] * inv;
  });
}

Tensor group_mean(const Tensor& x, int g) {
  require_rank(x, 2, "group_mean");
  require(g > 0 && x.dim(0) % g == 0, "group_mean", "rows not divisible by group size");
  const int b = x.dim(0) / g, c = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(b) * c, 0.0);
  for (int bi = 0; bi < b; ++bi)
    for (int gi = 0; gi < g; ++gi)
      for (int ci = 0; ci < c; ++ci)
        out[static_cast<std::size_t>(bi) * c + ci] += x.at((static_cast<std::size_t>(bi) * g + gi) * c + ci) / g;
  Node* xn = x.node();
  return make_out({b, c}, std::move(out), {x}, [xn, b, c, g](const Node& o) {
    double* gx = grad_of(xn);
    for (int bi = 0; bi < b; ++bi)
      for (int gi = 0; gi < g; ++gi)
        for (int ci = 0; ci < c; ++ci)
          gx[(static_cast<std::size_t>(bi) * g + gi) * c + ci] += o.grad[static_cast<std::size_t>(bi) * c + ci] / g;
  });
}

Tensor resample(const Tensor& x, std::shared_ptr<const ResamplePlan> plan_ptr) {
  const ResamplePlan& plan = *plan_ptr;
  require_rank(x, 4, "resample");
  const int n = x.dim(0);
  require(x.dim(1) == 1 && x.dim(2) == plan.height && x.dim(3) == plan.width, "resample",
          "input " + shape_str(x.shape()) + " does not match plan");
  const std::size_t plane = static_cast<std::size_t>(plan.height) * plan.width;
  const std::size_t per = static_cast<std::size_t>(plan.channels) * plane;
  std::vector<double> out(static_cast<std::size_t>(n) * per);
  for (int ni = 0; ni < n; ++ni) {
    const double* in = x.data().data() + ni * plane;
    double* dst = out.data() + ni * per;
    for (std::size_t p = 0; p < per; ++p) {
      double v = 0.0;
      for (int t = 0; t < 4; ++t) {
        const int s = plan.src[4 * p + t];
        if (s >= 0) v += plan.wts[4 * p + t] * in[s];
      }
      dst[p] = v;
    }
  }
  Node* xn = x.node();
  std::shared_ptr<const ResamplePlan> pl = std::move(plan_ptr);
  return make_out({n, plan.channels, plan.height, plan.width}, std::move(out), {x}, [xn, pl, n, plane, per](const Node& o) {
    double* gx = grad_of(xn);
    for (int ni = 0; ni < n; ++ni) {
      const double* g = o.grad.data() + ni * per;
      double* dst = gx + ni * plane;
      for (std::size_t p = 0; p < per; ++p) {
        for (int t = 0; t < 4; ++t) {
          const int s = pl->src[4 * p + t];
          if (s >= 0) dst[s] += pl->wts[4 * p + t] * g[p];
        }
      }
    }
  });
}

}  // namespace radloc::ad
