#include "rforge/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace rforge::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  shape_error(op, "incompatible shapes " + to_string(a) + " and " + to_string(b));
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Wraps forward results into a tensor; records inputs and the backward rule
// only when some input takes part in differentiation.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data), false);
  if (tracking(inputs)) {
    Node& n = *out.node();
    n.requires_grad = true;
    n.op = op;
    n.inputs.reserve(inputs.size());
    for (const auto* t : inputs) n.inputs.push_back(t->node());
    n.backward = std::move(backward_fn);
  }
  return out;
}

Tensor make_result_many(const char* op, Shape shape, std::vector<double> data,
                        std::span<const Tensor> inputs, std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data), false);
  bool track = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  if (track) {
    Node& n = *out.node();
    n.requires_grad = true;
    n.op = op;
    for (const auto& t : inputs) n.inputs.push_back(t.node());
    n.backward = std::move(backward_fn);
  }
  return out;
}

// Offsets into an input of shape `in` for every element of `out`, given that
// `in` broadcasts to `out`.
std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t total = numel(out);
  std::vector<std::size_t> offsets(total);
  if (numel(in) == 1) {
    std::fill(offsets.begin(), offsets.end(), 0);
    return offsets;
  }
  const std::size_t rank = out.size();
  const std::size_t pad = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    stride[k + pad] = in[k] == 1 ? 0 : s;
    s *= in[k];
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < total; ++i) {
    offsets[i] = off;
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      off += stride[k];
      if (idx[k] < out[k]) break;
      off -= stride[k] * idx[k];
      idx[k] = 0;
    }
  }
  return offsets;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    shape_error(op, "axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t k = 0; k < axis; ++k) s.outer *= shape[k];
  s.len = shape[axis];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) s.inner *= shape[k];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out.push_back(1);
  }
  return out;
}

template <class Fwd, class Dfa, class Dfb>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Dfa dfa, Dfb dfb) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  const std::size_t total = numel(out_shape);
  std::vector<double> out(total);
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> ia, ib;
  if (same) {
    for (std::size_t i = 0; i < total; ++i) out[i] = fwd(x[i], y[i]);
  } else {
    ia = broadcast_offsets(a.shape(), out_shape);
    ib = broadcast_offsets(b.shape(), out_shape);
    for (std::size_t i = 0; i < total; ++i) out[i] = fwd(x[ia[i]], y[ib[i]]);
  }
  return make_result(op, out_shape, std::move(out), {&a, &b},
                     [same, ia = std::move(ia), ib = std::move(ib), dfa, dfb](Node& n) {
                       Node& na = *n.inputs[0];
                       Node& nb = *n.inputs[1];
                       const auto& x = na.data;
                       const auto& y = nb.data;
                       const auto& g = n.grad;
                       const std::size_t total = g.size();
                       if (na.requires_grad) {
                         auto& ga = na.ensure_grad();
                         for (std::size_t i = 0; i < total; ++i) {
                           const std::size_t p = same ? i : ia[i];
                           const std::size_t q = same ? i : ib[i];
                           ga[p] += g[i] * dfa(x[p], y[q], n.data[i]);
                         }
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.ensure_grad();
                         for (std::size_t i = 0; i < total; ++i) {
                           const std::size_t p = same ? i : ia[i];
                           const std::size_t q = same ? i : ib[i];
                           gb[q] += g[i] * dfb(x[p], y[q], n.data[i]);
                         }
                       }
                     });
}

// Elementwise op whose derivative is expressed through (input, output).
template <class Fwd, class Df>
Tensor unary_op(const char* op, const Tensor& a, Fwd fwd, Df df) {
  const auto& x = a.node()->data;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return make_result(op, a.shape(), std::move(out), {&a}, [df](Node& n) {
    Node& na = *n.inputs[0];
    auto& ga = na.ensure_grad();
    const auto& g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(na.data[i], n.data[i]);
  });
}

void check_positive_weights(const char* op, const std::vector<double>& w) {
  bool any_positive = false;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::domain_error(std::string(op) + ": weights must be finite and non-negative");
    }
    any_positive = any_positive || v > 0.0;
  }
  if (!any_positive) throw std::domain_error(std::string(op) + ": all weights are zero");
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t ea = k + a.size() >= rank ? a[k + a.size() - rank] : 1;
    const std::size_t eb = k + b.size() >= rank ? b[k + b.size() - rank] : 1;
    if (ea != eb && ea != 1 && eb != 1) shape_error(op, a, b);
    out[k] = std::max(ea, eb);
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.node()->data.data(), m, k) * ConstMap(b.node()->data.data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& node) {
    Node& na = *node.inputs[0];
    Node& nb = *node.inputs[1];
    ConstMap g(node.grad.data(), m, n);
    if (na.requires_grad) {
      MutMap(na.ensure_grad().data(), m, k).noalias() += g * ConstMap(nb.data.data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      MutMap(nb.ensure_grad().data(), k, n).noalias() += ConstMap(na.data.data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_error("transpose", "expected 2-D tensor, got " + to_string(a.shape()));
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto& x = a.node()->data;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {&a}, [r, c](Node& n) {
    auto& ga = n.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += n.grad[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw std::domain_error("div: division by zero (divisor shape " + to_string(b.shape()) + ")");
  }
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& a) {
  return unary_op("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op("mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor div_scalar(const Tensor& a, double s) {
  if (s == 0.0) throw std::domain_error("div: division by zero scalar");
  return unary_op("div_scalar", a, [s](double x) { return x / s; }, [s](double, double) { return 1.0 / s; });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw std::domain_error("log: non-positive input " + std::to_string(v));
  }
  return unary_op("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor pow(const Tensor& a, double p) {
  const bool integral = std::floor(p) == p;
  for (double v : a.data()) {
    if (v < 0.0 && !integral) throw std::domain_error("pow: negative base with non-integer exponent");
    if (v == 0.0 && p < 1.0 && p != 0.0) throw std::domain_error("pow: zero base with exponent below 1");
  }
  return unary_op(
      "pow", a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw std::domain_error("sqrt: non-positive input " + std::to_string(v));
  }
  return unary_op("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor sin(const Tensor& a) {
  return unary_op("sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary_op("cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lower bound above upper bound");
  return unary_op(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  const auto& x = a.node()->data;
  const double s = std::accumulate(x.begin(), x.end(), 0.0);
  return make_result("sum", {1}, {s}, {&a}, [](Node& n) {
    auto& ga = n.inputs[0]->ensure_grad();
    for (auto& v : ga) v += n.grad[0];
  });
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  const auto s = split_axis(a.shape(), axis, "sum");
  const auto& x = a.node()->data;
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.len + k) * s.inner + i];
  return make_result("sum_axis", reduced_shape(a.shape(), axis, keepdim), std::move(out), {&a}, [s](Node& n) {
    auto& ga = n.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.len + k) * s.inner + i] += n.grad[o * s.inner + i];
  });
}

Tensor mean(const Tensor& a) { return div_scalar(sum(a), static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  const auto s = split_axis(a.shape(), axis, "mean");
  return div_scalar(sum(a, axis, keepdim), static_cast<double>(s.len));
}

namespace {

Tensor extreme(const char* op, const Tensor& a, std::size_t axis, bool keepdim, bool take_max) {
  const auto s = split_axis(a.shape(), axis, op);
  const auto& x = a.node()->data;
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      double bv = x[o * s.len * s.inner + i];
      for (std::size_t k = 1; k < s.len; ++k) {
        const double v = x[(o * s.len + k) * s.inner + i];
        if (take_max ? v > bv : v < bv) {
          bv = v;
          best = k;
        }
      }
      out[o * s.inner + i] = bv;
      arg[o * s.inner + i] = (o * s.len + best) * s.inner + i;
    }
  }
  return make_result(op, reduced_shape(a.shape(), axis, keepdim), std::move(out), {&a},
                     [arg = std::move(arg)](Node& n) {
                       auto& ga = n.inputs[0]->ensure_grad();
                       for (std::size_t j = 0; j < arg.size(); ++j) ga[arg[j]] += n.grad[j];
                     });
}

}  // namespace

Tensor max(const Tensor& a, std::size_t axis, bool keepdim) { return extreme("max", a, axis, keepdim, true); }
Tensor min(const Tensor& a, std::size_t axis, bool keepdim) { return extreme("min", a, axis, keepdim, false); }

Tensor logsumexp(const Tensor& a, std::size_t axis, bool keepdim) {
  const auto s = split_axis(a.shape(), axis, "logsumexp");
  const auto& x = a.node()->data;
  std::vector<double> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) m = std::max(m, x[(o * s.len + k) * s.inner + i]);
      double acc = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) acc += std::exp(x[(o * s.len + k) * s.inner + i] - m);
      out[o * s.inner + i] = m + std::log(acc);
    }
  }
  return make_result("logsumexp", reduced_shape(a.shape(), axis, keepdim), std::move(out), {&a}, [s](Node& n) {
    Node& na = *n.inputs[0];
    auto& ga = na.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t p = (o * s.len + k) * s.inner + i;
          ga[p] += n.grad[o * s.inner + i] * std::exp(na.data[p] - n.data[o * s.inner + i]);
        }
  });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "softmax");
  const auto& x = a.node()->data;
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) m = std::max(m, x[(o * s.len + k) * s.inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const std::size_t p = (o * s.len + k) * s.inner + i;
        out[p] = std::exp(x[p] - m);
        z += out[p];
      }
      for (std::size_t k = 0; k < s.len; ++k) out[(o * s.len + k) * s.inner + i] /= z;
    }
  }
  return make_result("softmax", a.shape(), std::move(out), {&a}, [s](Node& n) {
    auto& ga = n.inputs[0]->ensure_grad();
    const auto& y = n.data;
    const auto& g = n.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t p = (o * s.len + k) * s.inner + i;
          dot += g[p] * y[p];
        }
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t p = (o * s.len + k) * s.inner + i;
          ga[p] += y[p] * (g[p] - dot);
        }
      }
  });
}

Tensor weighted_softmax(const Tensor& scores, const Tensor& weights) {
  if (weights.rank() != 1 || scores.shape().back() != weights.dim(0)) {
    shape_error("weighted_softmax", scores.shape(), weights.shape());
  }
  const auto& w = weights.node()->data;
  check_positive_weights("weighted_softmax", w);
  const std::size_t m = w.size();
  const std::size_t rows = scores.numel() / m;
  const auto& x = scores.node()->data;
  std::vector<double> out(x.size());
  // e[r, j] / z[r] is the unweighted term each weight multiplies; kept for backward.
  std::vector<double> ratio(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (w[j] > 0.0) mx = std::max(mx, xr[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double e = std::exp(xr[j] - mx);
      ratio[r * m + j] = e;
      if (w[j] > 0.0) z += w[j] * e;
    }
    for (std::size_t j = 0; j < m; ++j) {
      ratio[r * m + j] /= z;
      out[r * m + j] = w[j] > 0.0 ? w[j] * ratio[r * m + j] : 0.0;
    }
  }
  return make_result("weighted_softmax", scores.shape(), std::move(out), {&scores, &weights},
                     [m, rows, ratio = std::move(ratio)](Node& n) {
                       Node& ns = *n.inputs[0];
                       Node& nw = *n.inputs[1];
                       const auto& y = n.data;
                       const auto& g = n.grad;
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * y[r * m + j];
                         if (ns.requires_grad) {
                           auto& gs = ns.ensure_grad();
                           for (std::size_t j = 0; j < m; ++j) gs[r * m + j] += y[r * m + j] * (g[r * m + j] - dot);
                         }
                         if (nw.requires_grad) {
                           auto& gw = nw.ensure_grad();
                           for (std::size_t j = 0; j < m; ++j) gw[j] += ratio[r * m + j] * (g[r * m + j] - dot);
                         }
                       }
                     });
}

Tensor weighted_logsumexp(const Tensor& a, const Tensor& weights) {
  if (weights.rank() != 1 || a.shape().back() != weights.dim(0)) {
    shape_error("weighted_logsumexp", a.shape(), weights.shape());
  }
  const auto& w = weights.node()->data;
  check_positive_weights("weighted_logsumexp", w);
  const std::size_t m = w.size();
  const std::size_t rows = a.numel() / m;
  const auto& x = a.node()->data;
  std::vector<double> out(rows);
  std::vector<double> ratio(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (w[j] > 0.0) mx = std::max(mx, xr[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double e = std::exp(xr[j] - mx);
      ratio[r * m + j] = e;
      if (w[j] > 0.0) z += w[j] * e;
    }
    for (std::size_t j = 0; j < m; ++j) ratio[r * m + j] /= z;
    out[r] = mx + std::log(z);
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  return make_result("weighted_logsumexp", shape, std::move(out), {&a, &weights},
                     [m, rows, ratio = std::move(ratio)](Node& n) {
                       Node& na = *n.inputs[0];
                       Node& nw = *n.inputs[1];
                       const auto& w = nw.data;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double g = n.grad[r];
                         if (na.requires_grad) {
                           auto& ga = na.ensure_grad();
                           for (std::size_t j = 0; j < m; ++j) if (w[j] > 0.0) ga[r * m + j] += g * w[j] * ratio[r * m + j];
                         }
                         if (nw.requires_grad) {
                           auto& gw = nw.ensure_grad();
                           for (std::size_t j = 0; j < m; ++j) gw[j] += g * ratio[r * m + j];
                         }
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  return make_result("reshape", std::move(shape), a.node()->data, {&a}, [](Node& n) {
    auto& ga = n.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shapes(a.shape(), shape, "broadcast_to") != shape) shape_error("broadcast_to", a.shape(), shape);
  auto offsets = broadcast_offsets(a.shape(), shape);
  const auto& x = a.node()->data;
  std::vector<double> out(offsets.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[offsets[i]];
  return make_result("broadcast_to", shape, std::move(out), {&a}, [offsets = std::move(offsets)](Node& n) {
    auto& ga = n.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < offsets.size(); ++i) ga[offsets[i]] += n.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) shape_error("concat", "axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t k = 0; ok && k < s.size(); ++k) ok = k == axis || s[k] == first[k];
    if (!ok) shape_error("concat", first, s);
    out_shape[axis] += s[axis];
  }
  const auto sp = split_axis(out_shape, axis, "concat");
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> lens;
  std::size_t start = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    const auto& x = p.node()->data;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner));
    lens.push_back(len);
    start += len;
  }
  return make_result_many("concat", out_shape, std::move(out), parts, [sp, lens = std::move(lens)](Node& n) {
    std::size_t start = 0;
    for (std::size_t part = 0; part < n.inputs.size(); ++part) {
      Node& ni = *n.inputs[part];
      const std::size_t len = lens[part];
      if (ni.requires_grad) {
        auto& gi = ni.ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t t = 0; t < len * sp.inner; ++t)
            gi[o * len * sp.inner + t] += n.grad[(o * sp.len + start) * sp.inner + t];
      }
      start += len;
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_axis(a.shape(), axis, "slice");
  if (length == 0 || start + length > sp.len) {
    shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") out of bounds for shape " + to_string(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const auto& x = a.node()->data;
  std::vector<double> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner), length * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  return make_result("slice", out_shape, std::move(out), {&a}, [sp, start, length](Node& n) {
    auto& ga = n.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t t = 0; t < length * sp.inner; ++t)
        ga[(o * sp.len + start) * sp.inner + t] += n.grad[o * length * sp.inner + t];
  });
}

std::vector<Tensor> split(const Tensor& a, std::span<const std::size_t> sizes, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis, "split");
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != sp.len) shape_error("split", "sizes do not add up to extent of " + to_string(a.shape()));
  std::vector<Tensor> out;
  std::size_t start = 0;
  for (auto len : sizes) {
    out.push_back(slice(a, axis, start, len));
    start += len;
  }
  return out;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  if (a.rank() == 0 || indices.empty()) shape_error("gather_rows", "empty input or index list");
  const std::size_t rows = a.dim(0);
  const std::size_t width = a.numel() / rows;
  Shape out_shape = a.shape();
  out_shape[0] = indices.size();
  const auto& x = a.node()->data;
  std::vector<double> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      shape_error("gather_rows", "index " + std::to_string(indices[r]) + " out of range for " + to_string(a.shape()));
    }
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(indices[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result("gather_rows", out_shape, std::move(out), {&a}, [width, idx = std::move(idx)](Node& n) {
    auto& ga = n.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < width; ++c) ga[idx[r] * width + c] += n.grad[r * width + c];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t len = x.shape().back();
  if (gain.defined() && (gain.rank() != 1 || gain.dim(0) != len)) shape_error("layer_norm", x.shape(), gain.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != len)) shape_error("layer_norm", x.shape(), bias.shape());
  const std::size_t rows = x.numel() / len;
  const auto& xd = x.node()->data;
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(rows);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * len;
    double mu = 0.0;
    for (std::size_t j = 0; j < len; ++j) mu += xr[j];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(len);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < len; ++j) {
      const double h = (xr[j] - mu) * inv_std[r];
      xhat[r * len + j] = h;
      const double gj = gain.defined() ? gain.node()->data[j] : 1.0;
      const double bj = bias.defined() ? bias.node()->data[j] : 0.0;
      out[r * len + j] = gj * h + bj;
    }
  }
  const Tensor& g_in = gain.defined() ? gain : x;
  const Tensor& b_in = bias.defined() ? bias : x;
  const bool has_gain = gain.defined();
  const bool has_bias = bias.defined();
  return make_result("layer_norm", x.shape(), std::move(out), {&x, &g_in, &b_in},
                     [len, rows, has_gain, has_bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       Node& nx = *n.inputs[0];
                       Node& ng = *n.inputs[1];
                       Node& nb = *n.inputs[2];
                       const auto& g = n.grad;
                       std::vector<double> dh(len);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < len; ++j) {
                           dh[j] = g[r * len + j] * (has_gain ? ng.data[j] : 1.0);
                         }
                         if (has_gain && ng.requires_grad) {
                           auto& gg = ng.ensure_grad();
                           for (std::size_t j = 0; j < len; ++j) gg[j] += g[r * len + j] * xhat[r * len + j];
                         }
                         if (has_bias && nb.requires_grad) {
                           auto& gb = nb.ensure_grad();
                           for (std::size_t j = 0; j < len; ++j) gb[j] += g[r * len + j];
                         }
                         if (nx.requires_grad) {
                           double mean_dh = 0.0, mean_dhx = 0.0;
                           for (std::size_t j = 0; j < len; ++j) {
                             mean_dh += dh[j];
                             mean_dhx += dh[j] * xhat[r * len + j];
                           }
                           mean_dh /= static_cast<double>(len);
                           mean_dhx /= static_cast<double>(len);
                           auto& gx = nx.ensure_grad();
                           for (std::size_t j = 0; j < len; ++j) {
                             gx[r * len + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * len + j] * mean_dhx);
                           }
                         }
                       }
                     });
}

}  // namespace rforge::ad
