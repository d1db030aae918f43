#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rforge/autodiff/tensor.hpp"

// Differentiable operations. Elementwise binary ops broadcast with numpy rules;
// axis arguments index from the front. Shape errors throw std::invalid_argument
// naming the op and shapes, domain errors (log of non-positive, division by
// zero) throw std::domain_error.
namespace rforge::ad {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor div_scalar(const Tensor& a, double s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor max(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor min(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor logsumexp(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor softmax(const Tensor& a, std::size_t axis);

// Along the last axis: out[..., j] = w[j] exp(s[..., j]) / sum_k w[k] exp(s[..., k]).
// Weights must be non-negative with at least one positive entry.
Tensor weighted_softmax(const Tensor& scores, const Tensor& weights);
// Along the last axis: log sum_j w[j] exp(a[..., j]); the last axis is dropped.
Tensor weighted_logsumexp(const Tensor& a, const Tensor& weights);

Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
std::vector<Tensor> split(const Tensor& a, std::span<const std::size_t> sizes, std::size_t axis);
// Selects entries along axis 0; repeated indices accumulate their gradients.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);

// Normalizes over the last axis with variance epsilon `eps`; `gain` and `bias`
// (shape [last extent]) may be left undefined to skip the affine terms.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return div_scalar(a, s); }

}  // namespace rforge::ad
