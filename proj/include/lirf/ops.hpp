// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "lirf/tensor.hpp"

// Differentiable operators. Every function returns a fresh tensor and records a
// backward closure when any input requires gradients. Closures never capture
// their own output node; they receive it as `self`.

namespace lirf {

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const std::string& msg) {
    throw ShapeError(std::string(op) + ": " + msg);
}

inline double* parent_grad(Node& self, std::size_t i) {
    return self.parents[i]->requires_grad ? self.parents[i]->grad_buffer() : nullptr;
}

// C[M x N] += A[M x K] * B[K x N]. Rows of C are updated four at a time.
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
        double* c0 = C + i * N;
        double* c1 = c0 + N;
        double* c2 = c1 + N;
        double* c3 = c2 + N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a0 = A[i * K + k], a1 = A[(i + 1) * K + k], a2 = A[(i + 2) * K + k],
                         a3 = A[(i + 3) * K + k];
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) {
                const double bj = b[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
    }
    for (; i < M; ++i) {
        double* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = A[i * K + k];
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[M x N] += A[M x K] * B[N x K]^T
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        std::size_t j = 0;
        for (; j + 4 <= N; j += 4) {
            const double* b0 = B + j * K;
            const double* b1 = b0 + K;
            const double* b2 = b1 + K;
            const double* b3 = b2 + K;
            double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            for (std::size_t k = 0; k < K; ++k) {
                const double ak = a[k];
                s0 += ak * b0[k];
                s1 += ak * b1[k];
                s2 += ak * b2[k];
                s3 += ak * b3[k];
            }
            C[i * N + j] += s0;
            C[i * N + j + 1] += s1;
            C[i * N + j + 2] += s2;
            C[i * N + j + 3] += s3;
        }
        for (; j < N; ++j) {
            const double* b = B + j * K;
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
            C[i * N + j] += acc;
        }
    }
}

// C[M x N] += A[K x M]^T * B[K x N]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
        double* c0 = C + i * N;
        double* c1 = c0 + N;
        double* c2 = c1 + N;
        double* c3 = c2 + N;
        for (std::size_t k = 0; k < K; ++k) {
            const double* a = A + k * M + i;
            const double a0 = a[0], a1 = a[1], a2 = a[2], a3 = a[3];
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) {
                const double bj = b[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
    }
    for (; i < M; ++i) {
        double* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = A[k * M + i];
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

struct Broadcast {
    Shape out;
    std::vector<std::size_t> stride_a, stride_b; // 0 on broadcast dims
    bool same = false;
};

inline Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
    Broadcast bc;
    if (a == b) {
        bc.out = a;
        bc.same = true;
        return bc;
    }
    Shape sa = a, sb = b;
    if (sa.empty()) sa.assign(sb.size(), 1);
    if (sb.empty()) sb.assign(sa.size(), 1);
    if (sa.size() != sb.size()) {
        shape_fail(op, "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    const std::size_t r = sa.size();
    bc.out.resize(r);
    bc.stride_a.assign(r, 0);
    bc.stride_b.assign(r, 0);
    std::size_t st_a = 1, st_b = 1;
    for (std::size_t d = r; d-- > 0;) {
        if (sa[d] != sb[d] && sa[d] != 1 && sb[d] != 1) {
            shape_fail(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                               " at dim " + std::to_string(d));
        }
        bc.out[d] = std::max(sa[d], sb[d]);
        bc.stride_a[d] = sa[d] == 1 ? 0 : st_a;
        bc.stride_b[d] = sb[d] == 1 ? 0 : st_b;
        st_a *= sa[d];
        st_b *= sb[d];
    }
    return bc;
}

// Calls fn(out_index, a_index, b_index) over the broadcast iteration space.
template <class Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
    const std::size_t n = numel(bc.out);
    if (bc.same) {
        for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
        return;
    }
    const std::size_t r = bc.out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        fn(i, ia, ib);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ia += bc.stride_a[d];
            ib += bc.stride_b[d];
            if (idx[d] < bc.out[d]) break;
            ia -= bc.stride_a[d] * idx[d];
            ib -= bc.stride_b[d] * idx[d];
            idx[d] = 0;
        }
    }
}

// f(x, y) -> value; da(x, y, out) and db(x, y, out) -> partials.
template <class F, class DA, class DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
    Broadcast bc = broadcast_shapes(op, a.shape(), b.shape());
    std::vector<double> out(numel(bc.out));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = f(pa[ia], pb[ib]);
    });
    Shape shape = bc.out;
    return Tensor::from_op(op, std::move(shape), std::move(out), {a, b},
                           [bc, da, db](Node& self) {
                               const auto& xa = self.parents[0]->data;
                               const auto& xb = self.parents[1]->data;
                               double* ga = parent_grad(self, 0);
                               double* gb = parent_grad(self, 1);
                               const double* g = self.grad.data();
                               const double* y = self.data.data();
                               for_each_broadcast(bc, [&](std::size_t i, std::size_t ia,
                                                          std::size_t ib) {
                                   if (ga) ga[ia] += g[i] * da(xa[ia], xb[ib], y[i]);
                                   if (gb) gb[ib] += g[i] * db(xa[ia], xb[ib], y[i]);
                               });
                           });
}

// f(x) -> value; df(x, out) -> derivative.
template <class F, class DF>
Tensor unary_op(const char* op, const Tensor& a, F f, DF df) {
    std::vector<double> out(a.size());
    const auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return Tensor::from_op(op, a.shape(), std::move(out), {a}, [df](Node& self) {
        double* ga = parent_grad(self, 0);
        if (!ga) return;
        const auto& x = self.parents[0]->data;
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * df(x[i], self.data[i]);
    });
}

} // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

inline Tensor scale(const Tensor& a, double s) {
    return detail::unary_op(
        "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    return detail::unary_op(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

/// Zeroes entries strictly below `threshold`; the mask is treated as constant.
inline Tensor mask_below(const Tensor& a, double threshold) {
    return detail::unary_op(
        "mask_below", a, [threshold](double x) { return x < threshold ? 0.0 : x; },
        [threshold](double x, double) { return x < threshold ? 0.0 : 1.0; });
}

// ---- reductions and shape ---------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return Tensor::from_op("sum", Shape{}, {s}, {a}, [](detail::Node& self) {
        double* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        const std::size_t n = self.parents[0]->data.size();
        for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) detail::shape_fail("mean", "empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Sums over one axis, keeping it with extent 1.
inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) {
        detail::shape_fail("sum_axis", "axis " + std::to_string(axis) + " out of range for " +
                                           shape_str(a.shape()));
    }
    const Shape& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t len = s[axis];
    Shape os = s;
    os[axis] = 1;
    std::vector<double> out(outer * inner, 0.0);
    const auto x = a.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + k) * inner + i];
    return Tensor::from_op("sum_axis", std::move(os), std::move(out), {a},
                           [outer, inner, len](detail::Node& self) {
                               double* ga = detail::parent_grad(self, 0);
                               if (!ga) return;
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t k = 0; k < len; ++k)
                                       for (std::size_t i = 0; i < inner; ++i)
                                           ga[(o * len + k) * inner + i] += self.grad[o * inner + i];
                           });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        detail::shape_fail("reshape", "cannot view " + shape_str(a.shape()) + " as " +
                                          shape_str(shape));
    }
    return Tensor::from_op("reshape", std::move(shape), a.values(), {a}, [](detail::Node& self) {
        double* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    });
}

/// [B, ...] -> [B, prod(...)]
inline Tensor flatten(const Tensor& a) {
    if (a.rank() < 1) detail::shape_fail("flatten", "needs rank >= 1");
    if (a.rank() == 2) return a;
    return reshape(a, Shape{a.dim(0), a.size() / std::max<std::size_t>(a.dim(0), 1)});
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) detail::shape_fail("concat", "no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) detail::shape_fail("concat", "axis out of range for " + shape_str(s0));
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
        if (!ok) {
            detail::shape_fail("concat", "incompatible shapes " + shape_str(s0) + " and " +
                                             shape_str(s) + " along axis " + std::to_string(axis));
        }
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    Shape os = s0;
    os[axis] = total;
    std::vector<double> out(numel(os));
    std::vector<std::size_t> lens;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.dim(axis);
        lens.push_back(len);
        const auto x = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(x.begin() + o * len * inner, len * inner,
                        out.begin() + (o * total + offset) * inner);
        offset += len;
    }
    return Tensor::from_op("concat", std::move(os), std::move(out), parts,
                           [outer, inner, total, lens](detail::Node& self) {
                               std::size_t off = 0;
                               for (std::size_t p = 0; p < lens.size(); ++p) {
                                   double* gp = detail::parent_grad(self, p);
                                   if (gp) {
                                       for (std::size_t o = 0; o < outer; ++o)
                                           for (std::size_t k = 0; k < lens[p] * inner; ++k)
                                               gp[o * lens[p] * inner + k] +=
                                                   self.grad[(o * total + off) * inner + k];
                                   }
                                   off += lens[p];
                               }
                           });
}

inline Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& idx) {
    const Shape& s = a.shape();
    if (axis >= s.size()) {
        detail::shape_fail("index_select", "axis out of range for " + shape_str(s));
    }
    for (std::size_t i : idx) {
        if (i >= s[axis]) {
            detail::shape_fail("index_select", "index " + std::to_string(i) + " out of range for dim " +
                                                   std::to_string(s[axis]));
        }
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t len = s[axis];
    Shape os = s;
    os[axis] = idx.size();
    std::vector<double> out(numel(os));
    const auto x = a.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < idx.size(); ++k)
            std::copy_n(x.begin() + (o * len + idx[k]) * inner, inner,
                        out.begin() + (o * idx.size() + k) * inner);
    return Tensor::from_op("index_select", std::move(os), std::move(out), {a},
                           [outer, inner, len, idx](detail::Node& self) {
                               double* ga = detail::parent_grad(self, 0);
                               if (!ga) return;
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t k = 0; k < idx.size(); ++k)
                                       for (std::size_t i = 0; i < inner; ++i)
                                           ga[(o * len + idx[k]) * inner + i] +=
                                               self.grad[(o * idx.size() + k) * inner + i];
                           });
}

/// out[b] = a[b, labels[b]] for a rank-2 input.
inline Tensor pick(const Tensor& a, const std::vector<int>& labels) {
    if (a.rank() != 2 || a.dim(0) != labels.size()) {
        detail::shape_fail("pick", "expected [" + std::to_string(labels.size()) + " x K], got " +
                                       shape_str(a.shape()));
    }
    const std::size_t B = a.dim(0), K = a.dim(1);
    std::vector<double> out(B);
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K) {
            detail::shape_fail("pick", "label " + std::to_string(labels[b]) + " outside [0, " +
                                           std::to_string(K) + ")");
        }
        out[b] = a.data()[b * K + static_cast<std::size_t>(labels[b])];
    }
    return Tensor::from_op("pick", Shape{B}, std::move(out), {a}, [K, labels](detail::Node& self) {
        double* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t b = 0; b < labels.size(); ++b)
            ga[b * K + static_cast<std::size_t>(labels[b])] += self.grad[b];
    });
}

/// Row-wise log-softmax of a rank-2 tensor.
inline Tensor log_softmax(const Tensor& a) {
    if (a.rank() != 2) detail::shape_fail("log_softmax", "expected rank 2, got " + shape_str(a.shape()));
    const std::size_t B = a.dim(0), K = a.dim(1);
    std::vector<double> out(a.size());
    const auto x = a.data();
    for (std::size_t b = 0; b < B; ++b) {
        const double* row = x.data() + b * K;
        const double mx = *std::max_element(row, row + K);
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t k = 0; k < K; ++k) out[b * K + k] = row[k] - lse;
    }
    return Tensor::from_op("log_softmax", a.shape(), std::move(out), {a}, [B, K](detail::Node& self) {
        double* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t b = 0; b < B; ++b) {
            const double* g = self.grad.data() + b * K;
            const double* y = self.data.data() + b * K;
            double gs = 0.0;
            for (std::size_t k = 0; k < K; ++k) gs += g[k];
            for (std::size_t k = 0; k < K; ++k) ga[b * K + k] += g[k] - std::exp(y[k]) * gs;
        }
    });
}

/// Divides each row of a rank-2 tensor by its L2 norm. All-zero rows stay zero.
inline Tensor l2_normalize_rows(const Tensor& a) {
    if (a.rank() != 2) {
        detail::shape_fail("l2_normalize_rows", "expected rank 2, got " + shape_str(a.shape()));
    }
    const std::size_t B = a.dim(0), K = a.dim(1);
    std::vector<double> out(a.size(), 0.0);
    std::vector<double> norms(B, 0.0);
    const auto x = a.data();
    for (std::size_t b = 0; b < B; ++b) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += x[b * K + k] * x[b * K + k];
        norms[b] = std::sqrt(s);
        if (norms[b] > 0.0)
            for (std::size_t k = 0; k < K; ++k) out[b * K + k] = x[b * K + k] / norms[b];
    }
    return Tensor::from_op("l2_normalize_rows", a.shape(), std::move(out), {a},
                           [B, K, norms](detail::Node& self) {
                               double* ga = detail::parent_grad(self, 0);
                               if (!ga) return;
                               for (std::size_t b = 0; b < B; ++b) {
                                   if (norms[b] == 0.0) continue;
                                   const double* g = self.grad.data() + b * K;
                                   const double* y = self.data.data() + b * K;
                                   double dot = 0.0;
                                   for (std::size_t k = 0; k < K; ++k) dot += g[k] * y[k];
                                   for (std::size_t k = 0; k < K; ++k)
                                       ga[b * K + k] += (g[k] - y[k] * dot) / norms[b];
                               }
                           });
}

/// Column-wise select between two [B x K] tensors: take_b[k] picks b's column.
inline Tensor where_columns(const Tensor& a, const Tensor& b, const std::vector<bool>& take_b) {
    if (a.rank() != 2 || a.shape() != b.shape() || take_b.size() != a.dim(1)) {
        detail::shape_fail("where_columns", "operands " + shape_str(a.shape()) + " and " +
                                                shape_str(b.shape()) + " with mask of " +
                                                std::to_string(take_b.size()));
    }
    const std::size_t B = a.dim(0), K = a.dim(1);
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t k = 0; k < K; ++k)
            out[r * K + k] = take_b[k] ? b.data()[r * K + k] : a.data()[r * K + k];
    return Tensor::from_op("where_columns", a.shape(), std::move(out), {a, b},
                           [B, K, take_b](detail::Node& self) {
                               double* ga = detail::parent_grad(self, 0);
                               double* gb = detail::parent_grad(self, 1);
                               for (std::size_t r = 0; r < B; ++r)
                                   for (std::size_t k = 0; k < K; ++k) {
                                       double* dst = take_b[k] ? gb : ga;
                                       if (dst) dst[r * K + k] += self.grad[r * K + k];
                                   }
                           });
}

// ---- layers ------------------------------------------------------------------

/// y = x W^T + b with x [B x I], W [O x I], b [O].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || b.size() != w.dim(0)) {
        detail::shape_fail("linear", "input " + shape_str(x.shape()) + ", weight " +
                                         shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
    }
    const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
    std::vector<double> out(B * O);
    for (std::size_t r = 0; r < B; ++r) std::copy_n(b.data().begin(), O, out.begin() + r * O);
    detail::gemm_nt(B, O, I, x.data().data(), w.data().data(), out.data());
    return Tensor::from_op("linear", Shape{B, O}, std::move(out), {x, w, b},
                           [B, I, O](detail::Node& self) {
                               const double* g = self.grad.data();
                               if (double* gx = detail::parent_grad(self, 0))
                                   detail::gemm_nn(B, I, O, g, self.parents[1]->data.data(), gx);
                               if (double* gw = detail::parent_grad(self, 1))
                                   detail::gemm_tn(O, I, B, g, self.parents[0]->data.data(), gw);
                               if (double* gb = detail::parent_grad(self, 2))
                                   for (std::size_t r = 0; r < B; ++r)
                                       for (std::size_t o = 0; o < O; ++o) gb[o] += g[r * O + o];
                           });
}

struct Conv2dGeometry {
    std::size_t batch, in_ch, in_h, in_w, out_ch, kernel, stride, pad, out_h, out_w;
    std::size_t col_rows() const { return in_ch * kernel * kernel; }
    std::size_t col_cols() const { return out_h * out_w; }
};

namespace detail {

// Writes sample `n` into columns [n*P, (n+1)*P) of an R x (B*P) matrix.
inline void im2col(const Conv2dGeometry& g, const double* img, double* cols, std::size_t n) {
    const std::size_t P = g.col_cols(), ld = g.batch * P;
    for (std::size_t c = 0; c < g.in_ch; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ld + n * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    double* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
                        std::fill_n(dst, g.out_w, 0.0);
                        continue;
                    }
                    const double* src = img + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        dst[ox] = (ix >= 0 && ix < static_cast<long>(g.in_w)) ? src[ix] : 0.0;
                    }
                }
            }
}

inline void col2im(const Conv2dGeometry& g, const double* cols, double* img, std::size_t n) {
    const std::size_t P = g.col_cols(), ld = g.batch * P;
    for (std::size_t c = 0; c < g.in_ch; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ld + n * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
                    double* dst = img + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
                        dst[ix] += row[oy * g.out_w + ox];
                    }
                }
            }
}

} // namespace detail

/// 2-D convolution (cross-correlation) with zero padding.
/// x [B x I x H x W], w [O x I x K x K], b [O].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1,
                     std::size_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4 || w.dim(2) != w.dim(3) || x.dim(1) != w.dim(1) ||
        b.size() != w.dim(0) || stride == 0) {
        detail::shape_fail("conv2d", "input " + shape_str(x.shape()) + ", kernel " +
                                         shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
    }
    Conv2dGeometry g{};
    g.batch = x.dim(0);
    g.in_ch = x.dim(1);
    g.in_h = x.dim(2);
    g.in_w = x.dim(3);
    g.out_ch = w.dim(0);
    g.kernel = w.dim(2);
    g.stride = stride;
    g.pad = pad;
    if (g.in_h + 2 * pad < g.kernel || g.in_w + 2 * pad < g.kernel) {
        detail::shape_fail("conv2d", "kernel " + std::to_string(g.kernel) + " larger than padded input " +
                                         shape_str(x.shape()));
    }
    g.out_h = (g.in_h + 2 * pad - g.kernel) / stride + 1;
    g.out_w = (g.in_w + 2 * pad - g.kernel) / stride + 1;

    // One GEMM over the whole batch: [O x R] * [R x B*P].
    const std::size_t R = g.col_rows(), P = g.col_cols(), BP = g.batch * P;
    const std::size_t img = g.in_ch * g.in_h * g.in_w;
    std::vector<double> cols(R * BP);
    const double* px = x.data().data();
    for (std::size_t n = 0; n < g.batch; ++n) detail::im2col(g, px + n * img, cols.data(), n);
    std::vector<double> wide(g.out_ch * BP, 0.0);
    detail::gemm_nn(g.out_ch, BP, R, w.data().data(), cols.data(), wide.data());
    std::vector<double> out(g.batch * g.out_ch * P);
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
            const double bias = b.data()[oc];
            const double* src = wide.data() + oc * BP + n * P;
            double* dst = out.data() + (n * g.out_ch + oc) * P;
            for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + bias;
        }
    const bool keep_cols = grad_enabled() && w.requires_grad();
    if (!keep_cols) cols.clear();
    return Tensor::from_op(
        "conv2d", Shape{g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), {x, w, b},
        [g, cols = std::move(cols)](detail::Node& self) {
            const std::size_t R = g.col_rows(), P = g.col_cols(), BP = g.batch * P;
            const std::size_t img = g.in_ch * g.in_h * g.in_w;
            double* gx = detail::parent_grad(self, 0);
            double* gw = detail::parent_grad(self, 1);
            double* gb = detail::parent_grad(self, 2);
            // Upstream gradient regrouped as [O x B*P].
            std::vector<double> go(g.out_ch * BP);
            for (std::size_t n = 0; n < g.batch; ++n)
                for (std::size_t oc = 0; oc < g.out_ch; ++oc)
                    std::copy_n(self.grad.data() + (n * g.out_ch + oc) * P, P, go.data() + oc * BP + n * P);
            if (gb)
                for (std::size_t oc = 0; oc < g.out_ch; ++oc)
                    for (std::size_t k = 0; k < BP; ++k) gb[oc] += go[oc * BP + k];
            if (gw) detail::gemm_nt(g.out_ch, R, BP, go.data(), cols.data(), gw);
            if (gx) {
                std::vector<double> gcols(R * BP, 0.0);
                detail::gemm_tn(R, BP, g.out_ch, self.parents[1]->data.data(), go.data(), gcols.data());
                for (std::size_t n = 0; n < g.batch; ++n) detail::col2im(g, gcols.data(), gx + n * img, n);
            }
        });
}

/// Non-overlapping 2x2 average pooling; odd trailing rows/columns are dropped.
inline Tensor avg_pool2x2(const Tensor& x) {
    if (x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2) {
        detail::shape_fail("avg_pool2x2", "expected [B x C x H x W] with H, W >= 2, got " +
                                              shape_str(x.shape()));
    }
    const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OH = H / 2, OW = W / 2;
    std::vector<double> out(BC * OH * OW);
    const auto in = x.data();
    for (std::size_t c = 0; c < BC; ++c)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
                const double* p = in.data() + (c * H + 2 * oy) * W + 2 * ox;
                out[(c * OH + oy) * OW + ox] = 0.25 * (p[0] + p[1] + p[W] + p[W + 1]);
            }
    return Tensor::from_op("avg_pool2x2", Shape{x.dim(0), x.dim(1), OH, OW}, std::move(out), {x},
                           [BC, H, W, OH, OW](detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t c = 0; c < BC; ++c)
                                   for (std::size_t oy = 0; oy < OH; ++oy)
                                       for (std::size_t ox = 0; ox < OW; ++ox) {
                                           const double g = 0.25 * self.grad[(c * OH + oy) * OW + ox];
                                           double* p = gx + (c * H + 2 * oy) * W + 2 * ox;
                                           p[0] += g;
                                           p[1] += g;
                                           p[W] += g;
                                           p[W + 1] += g;
                                       }
                           });
}

} // namespace lirf
