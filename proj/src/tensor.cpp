#include "modprune/tensor.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "modprune/errors.hpp"

namespace modprune {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

double* detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

void require_2d(const std::string& op, const Tensor& t) {
  if (t.ndim() != 2) shape_fail(op, "expected a 2-D tensor, got " + shape_str(t.shape()));
}

bool needs_graph(std::initializer_list<const Tensor*> ins) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// Creates the output node. If any input requires grad the node is wired into the graph.
NodePtr make_node(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> ins,
                  std::function<void(detail::Node&)> bw) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (needs_graph(ins)) {
    n->requires_grad = true;
    for (const Tensor* t : ins) n->parents.push_back(t->node());
    n->backward = std::move(bw);
  }
  return n;
}

NodePtr make_node_n(Shape shape, std::vector<double> value, std::span<const Tensor> ins,
                    std::function<void(detail::Node&)> bw) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool any = false;
  if (g_grad_enabled)
    for (const Tensor& t : ins) any = any || t.requires_grad();
  if (any) {
    n->requires_grad = true;
    for (const Tensor& t : ins) n->parents.push_back(t.node());
    n->backward = std::move(bw);
  }
  return n;
}

// Gradient buffer of parent i, or nullptr if it does not take gradients.
double* pgrad(detail::Node& n, std::size_t i) {
  auto& p = *n.parents[i];
  return p.requires_grad ? p.ensure_grad() : nullptr;
}

const std::vector<double>& pval(detail::Node& n, std::size_t i) { return n.parents[i]->value; }

// Splits a shape around `axis` into (outer, len, inner) for strided reductions.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};
AxisSplit split_axis(const std::string& op, const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor(make_node(x.shape(), std::move(out), {&x}, [df](detail::Node& n) {
    double* g = pgrad(n, 0);
    if (!g) return;
    const auto& xin = pval(n, 0);
    for (std::size_t i = 0; i < xin.size(); ++i) g[i] += n.grad[i] * df(xin[i], n.value[i]);
  }));
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape)
    if (d == 0) throw ShapeError("Tensor: zero-sized dimension in " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw ShapeError("Tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool rg) { return full(std::move(shape), 0.0, rg); }
Tensor Tensor::ones(Shape shape, bool rg) { return full(std::move(shape), 1.0, rg); }
Tensor Tensor::full(Shape shape, double v, bool rg) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v), rg);
}
Tensor Tensor::scalar(double v, bool rg) { return Tensor({1}, {v}, rg); }

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("Tensor: use of an undefined tensor");
  return node_->shape;
}
std::size_t Tensor::numel() const { return shape_numel(shape()); }
std::size_t Tensor::rows() const {
  require_2d("rows", *this);
  return node_->shape[0];
}
std::size_t Tensor::cols() const {
  require_2d("cols", *this);
  return node_->shape[1];
}
std::span<const double> Tensor::values() const {
  shape();
  return node_->value;
}
std::span<double> Tensor::mutable_values() {
  shape();
  return node_->value;
}
double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}
double Tensor::at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool on) {
  shape();
  node_->requires_grad = on;
}
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad: tensor has no gradient (run backward first)");
  return node_->grad;
}
std::span<double> Tensor::mutable_grad() {
  shape();
  return {node_->ensure_grad(), node_->value.size()};
}
void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}
Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }
Tensor Tensor::clone() const { return Tensor(shape(), node_->value, node_->requires_grad); }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- arithmetic -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    shape_fail("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const double* A = a.values().data();
  const double* B = b.values().data();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return Tensor(make_node({m, n}, std::move(c), {&a, &b}, [m, k, n](detail::Node& nd) {
    const double* G = nd.grad.data();
    const double* A = pval(nd, 0).data();
    const double* B = pval(nd, 1).data();
    if (double* ga = pgrad(nd, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* gi = G + i * n;
          const double* bp = B + p * n;
          for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
          ga[i * k + p] += s;
        }
    }
    if (double* gb = pgrad(nd, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          const double* gi = G + i * n;
          double* gbp = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) gbp[j] += aip * gi[j];
        }
    }
  }));
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    const auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return Tensor(make_node(a.shape(), std::move(out), {&a, &b}, [](detail::Node& n) {
      for (std::size_t p = 0; p < 2; ++p)
        if (double* g = pgrad(n, p))
          for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }));
  }
  // trailing-axis bias
  const std::size_t width = b.numel();
  const bool bias_ok = b.ndim() == 1 && a.ndim() >= 1 && a.shape().back() == width;
  if (!bias_ok)
    shape_fail("add", "cannot add " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                          " (only equal shapes or a trailing-axis bias)");
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % width];
  return Tensor(make_node(a.shape(), std::move(out), {&a, &b}, [width](detail::Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (double* g = pgrad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % width] += n.grad[i];
  }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("sub", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor(make_node(a.shape(), std::move(out), {&a, &b}, [](detail::Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (double* g = pgrad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
  }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor(make_node(a.shape(), std::move(out), {&a, &b}, [](detail::Node& n) {
    const auto& x = pval(n, 0);
    const auto& y = pval(n, 1);
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * y[i];
    if (double* g = pgrad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * x[i];
  }));
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) shape_fail("scale_by", "scale must have one element, got " + shape_str(s.shape()));
  const double c = s.values()[0];
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  return Tensor(make_node(a.shape(), std::move(out), {&a, &s}, [](detail::Node& n) {
    const auto& x = pval(n, 0);
    const double c = pval(n, 1)[0];
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * c;
    if (double* g = pgrad(n, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * x[i];
      g[0] += acc;
    }
  }));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis("softmax", x.shape(), axis);
  const auto xv = x.values();
  for (double v : xv)
    if (!std::isfinite(v)) throw DomainError("softmax: non-finite input");
  std::vector<double> y(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(xv[base + l * s.inner] - mx);
        y[base + l * s.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] /= z;
    }
  return Tensor(make_node(x.shape(), std::move(y), {&x}, [s](detail::Node& n) {
    double* g = pgrad(n, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t i = base + l * s.inner;
          dot += n.grad[i] * n.value[i];
        }
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t i = base + l * s.inner;
          g[i] += n.value[i] * (n.grad[i] - dot);
        }
      }
  }));
}

Tensor layer_norm(const Tensor& x, std::size_t axis, double eps) {
  const AxisSplit s = split_axis("layer_norm", x.shape(), axis);
  const auto xv = x.values();
  std::vector<double> y(xv.size());
  std::vector<double> inv_std(s.outer * s.inner);
  const double L = static_cast<double>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mu = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) mu += xv[base + l * s.inner];
      mu /= L;
      double var = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double d = xv[base + l * s.inner] - mu;
        var += d * d;
      }
      var /= L;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[o * s.inner + in] = is;
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] = (xv[base + l * s.inner] - mu) * is;
    }
  return Tensor(make_node(x.shape(), std::move(y), {&x}, [s, inv_std, L](detail::Node& n) {
    double* g = pgrad(n, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double mg = 0.0, mgy = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t i = base + l * s.inner;
          mg += n.grad[i];
          mgy += n.grad[i] * n.value[i];
        }
        mg /= L;
        mgy /= L;
        const double is = inv_std[o * s.inner + in];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t i = base + l * s.inner;
          g[i] += is * (n.grad[i] - mg - n.value[i] * mgy);
        }
      }
  }));
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values())
    if (!(v > 0.0)) throw DomainError("log: nonpositive argument " + std::to_string(v));
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis("mean", x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.ndim(); ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  const auto xv = x.values();
  std::vector<double> y(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t in = 0; in < s.inner; ++in)
        y[o * s.inner + in] += xv[(o * s.len + l) * s.inner + in];
  const double L = static_cast<double>(s.len);
  for (double& v : y) v /= L;
  return Tensor(make_node(std::move(out_shape), std::move(y), {&x}, [s, L](detail::Node& n) {
    double* g = pgrad(n, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t in = 0; in < s.inner; ++in)
          g[(o * s.len + l) * s.inner + in] += n.grad[o * s.inner + in] / L;
  }));
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return Tensor(make_node({1}, {acc}, {&x}, [](detail::Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.parents[0]->value.size(); ++i) g[i] += n.grad[0];
  }));
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  const Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const bool one = logits.ndim() == 1;
  if (!one) require_2d("cross_entropy", logits);
  const std::size_t B = one ? 1 : logits.rows();
  const std::size_t C = one ? logits.numel() : logits.cols();
  if (labels.size() != B)
    shape_fail("cross_entropy", std::to_string(labels.size()) + " labels for " + std::to_string(B) + " rows");
  const auto lv = logits.values();
  std::vector<double> probs(B * C);
  double loss = 0.0;
  for (std::size_t r = 0; r < B; ++r) {
    if (labels[r] >= C) throw InputError("cross_entropy: label " + std::to_string(labels[r]) + " out of range");
    const double* row = lv.data() + r * C;
    double mx = row[0];
    for (std::size_t c = 0; c < C; ++c) {
      if (!std::isfinite(row[c])) throw DomainError("cross_entropy: non-finite logit");
      mx = std::max(mx, row[c]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) probs[r * C + c] = std::exp(row[c] - mx) / z;
    const double p = probs[r * C + labels[r]];
    if (!(p > 0.0)) throw DomainError("cross_entropy: log of nonpositive probability");
    loss -= (row[labels[r]] - mx) - std::log(z);
  }
  loss /= static_cast<double>(B);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return Tensor(make_node({1}, {loss}, {&logits},
                          [probs = std::move(probs), lab = std::move(lab), B, C](detail::Node& n) {
                            double* g = pgrad(n, 0);
                            if (!g) return;
                            const double s = n.grad[0] / static_cast<double>(B);
                            for (std::size_t r = 0; r < B; ++r)
                              for (std::size_t c = 0; c < C; ++c)
                                g[r * C + c] += s * (probs[r * C + c] - (c == lab[r] ? 1.0 : 0.0));
                          }));
}

Tensor transpose(const Tensor& x) {
  require_2d("transpose", x);
  const std::size_t R = x.rows(), C = x.cols();
  const auto xv = x.values();
  std::vector<double> y(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) y[c * R + r] = xv[r * C + c];
  return Tensor(make_node({C, R}, std::move(y), {&x}, [R, C](detail::Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += n.grad[c * R + r];
  }));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    shape_fail("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> y(x.values().begin(), x.values().end());
  return Tensor(make_node(std::move(shape), std::move(y), {&x}, [](detail::Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  }));
}

// ---- structural ---------------------------------------------------------------

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d("slice_cols", x);
  const std::size_t R = x.rows(), C = x.cols();
  if (begin >= end || end > C)
    shape_fail("slice_cols", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                                 std::to_string(C) + " columns");
  const std::size_t W = end - begin;
  const auto xv = x.values();
  std::vector<double> y(R * W);
  for (std::size_t r = 0; r < R; ++r)
    std::copy_n(xv.data() + r * C + begin, W, y.data() + r * W);
  return Tensor(make_node({R, W}, std::move(y), {&x}, [R, C, W, begin](detail::Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < W; ++c) g[r * C + begin + c] += n.grad[r * W + c];
  }));
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) shape_fail("concat_cols", "no inputs");
  const std::size_t R = parts[0].rows();
  std::vector<std::size_t> offs;
  std::size_t C = 0;
  for (const Tensor& p : parts) {
    require_2d("concat_cols", p);
    if (p.rows() != R) shape_fail("concat_cols", "row counts differ");
    offs.push_back(C);
    C += p.cols();
  }
  std::vector<double> y(R * C);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t W = parts[k].cols();
    const auto pv = parts[k].values();
    for (std::size_t r = 0; r < R; ++r) std::copy_n(pv.data() + r * W, W, y.data() + r * C + offs[k]);
  }
  return Tensor(make_node_n({R, C}, std::move(y), parts, [R, C, offs](detail::Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      double* g = pgrad(n, k);
      if (!g) continue;
      const std::size_t W = n.parents[k]->shape[1];
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < W; ++c) g[r * W + c] += n.grad[r * C + offs[k] + c];
    }
  }));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) shape_fail("concat_rows", "no inputs");
  const std::size_t C = parts[0].cols();
  std::vector<std::size_t> offs;
  std::size_t R = 0;
  for (const Tensor& p : parts) {
    require_2d("concat_rows", p);
    if (p.cols() != C) shape_fail("concat_rows", "column counts differ");
    offs.push_back(R * C);
    R += p.rows();
  }
  std::vector<double> y;
  y.reserve(R * C);
  for (const Tensor& p : parts) y.insert(y.end(), p.values().begin(), p.values().end());
  return Tensor(make_node_n({R, C}, std::move(y), parts, [offs](detail::Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      double* g = pgrad(n, k);
      if (!g) continue;
      const std::size_t len = n.parents[k]->value.size();
      for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[offs[k] + i];
    }
  }));
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  require_2d("gather_rows", x);
  const std::size_t R = x.rows(), C = x.cols();
  if (idx.empty()) shape_fail("gather_rows", "empty index set");
  for (std::size_t i : idx)
    if (i >= R) shape_fail("gather_rows", "row " + std::to_string(i) + " out of " + std::to_string(R));
  const auto xv = x.values();
  std::vector<double> y(idx.size() * C);
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(xv.data() + idx[r] * C, C, y.data() + r * C);
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  return Tensor(make_node({idx.size(), C}, std::move(y), {&x}, [ix = std::move(ix), C](detail::Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t r = 0; r < ix.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) g[ix[r] * C + c] += n.grad[r * C + c];
  }));
}

Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> idx, std::size_t n_rows) {
  require_2d("scatter_rows", x);
  const std::size_t C = x.cols();
  if (idx.size() != x.rows()) shape_fail("scatter_rows", "index count differs from row count");
  for (std::size_t i : idx)
    if (i >= n_rows) shape_fail("scatter_rows", "target row out of range");
  const auto xv = x.values();
  std::vector<double> y(n_rows * C, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < C; ++c) y[idx[r] * C + c] += xv[r * C + c];
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  return Tensor(make_node({n_rows, C}, std::move(y), {&x}, [ix = std::move(ix), C](detail::Node& n) {
    if (double* g = pgrad(n, 0))
      for (std::size_t r = 0; r < ix.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += n.grad[ix[r] * C + c];
  }));
}

Tensor assemble_rows(const Tensor& a, std::span<const std::size_t> idx, const Tensor& fill,
                     std::size_t n_rows) {
  require_2d("assemble_rows", a);
  const std::size_t C = a.cols();
  if (idx.size() != a.rows()) shape_fail("assemble_rows", "index count differs from row count");
  if (fill.numel() != C) shape_fail("assemble_rows", "fill width differs from column count");
  std::vector<std::uint8_t> taken(n_rows, 0);
  for (std::size_t i : idx) {
    if (i >= n_rows) shape_fail("assemble_rows", "target row out of range");
    if (taken[i]) shape_fail("assemble_rows", "duplicate target row");
    taken[i] = 1;
  }
  const auto av = a.values(), fv = fill.values();
  std::vector<double> y(n_rows * C);
  for (std::size_t r = 0; r < n_rows; ++r)
    if (!taken[r]) std::copy_n(fv.data(), C, y.data() + r * C);
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(av.data() + r * C, C, y.data() + idx[r] * C);
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  return Tensor(make_node({n_rows, C}, std::move(y), {&a, &fill},
                          [ix = std::move(ix), taken = std::move(taken), C](detail::Node& n) {
                            if (double* g = pgrad(n, 0))
                              for (std::size_t r = 0; r < ix.size(); ++r)
                                for (std::size_t c = 0; c < C; ++c) g[r * C + c] += n.grad[ix[r] * C + c];
                            if (double* g = pgrad(n, 1))
                              for (std::size_t r = 0; r < taken.size(); ++r)
                                if (!taken[r])
                                  for (std::size_t c = 0; c < C; ++c) g[c] += n.grad[r * C + c];
                          }));
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_2d("scale_rows", x);
  const std::size_t R = x.rows(), C = x.cols();
  if (s.numel() != R) shape_fail("scale_rows", "need one scale per row");
  const auto xv = x.values(), sv = s.values();
  std::vector<double> y(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) y[r * C + c] = xv[r * C + c] * sv[r];
  return Tensor(make_node({R, C}, std::move(y), {&x, &s}, [R, C](detail::Node& n) {
    const auto& xin = pval(n, 0);
    const auto& sin = pval(n, 1);
    if (double* g = pgrad(n, 0))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += n.grad[r * C + c] * sin[r];
    if (double* g = pgrad(n, 1))
      for (std::size_t r = 0; r < R; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += n.grad[r * C + c] * xin[r * C + c];
        g[r] += acc;
      }
  }));
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  require_2d("masked_softmax", x);
  const std::size_t R = x.rows(), C = x.cols();
  if (keep.size() != R * C) shape_fail("masked_softmax", "mask size differs from tensor size");
  const auto xv = x.values();
  std::vector<double> y(R * C, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c)
      if (keep[r * C + c]) mx = std::max(mx, xv[r * C + c]);
    if (!std::isfinite(mx)) throw DomainError("masked_softmax: row with no finite kept entry");
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      if (keep[r * C + c]) z += (y[r * C + c] = std::exp(xv[r * C + c] - mx));
    for (std::size_t c = 0; c < C; ++c) y[r * C + c] /= z;
  }
  return Tensor(make_node({R, C}, std::move(y), {&x}, [R, C](detail::Node& n) {
    double* g = pgrad(n, 0);
    if (!g) return;
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += n.grad[r * C + c] * n.value[r * C + c];
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += n.value[r * C + c] * (n.grad[r * C + c] - dot);
    }
  }));
}

// ---- backward -----------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad() || !loss.node()->backward) {
    if (loss.requires_grad() && loss.node()->parents.empty() && !loss.node()->consumed) {
      loss.node()->ensure_grad()[0] += 1.0;
      return;
    }
    throw ContractError("backward: loss was not produced by a recorded graph");
  }

  // Iterative post-order DFS gives a topological order with deterministic tie-breaking.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
  // Consume the tape. Interior gradients stay readable (taps rely on this).
  for (detail::Node* n : order) {
    if (n->backward) n->consumed = true;
    n->parents.clear();
    n->backward = nullptr;
  }
}

}  // namespace modprune
