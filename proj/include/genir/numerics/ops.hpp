#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>

#include "genir/numerics/tensor.hpp"

namespace genir {

/// Denominator guard for RMS normalization.
inline constexpr double kRmsEpsilon = 1e-6;

namespace detail {
inline std::string shape_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}
}  // namespace detail

/// C = A * B.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner dimension mismatch: " +
                         detail::shape_str(a.rows(), a.cols()) + " * " +
                         detail::shape_str(b.rows(), b.cols()));
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor<T> c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        T* ci = c.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a(i, p);
            const T* bp = b.row(p).data();
#pragma omp simd
            for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
        }
    }
    return c;
}

/// C = A * B^T. The projection kernel: activations (n x in) times weights (out x in).
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt inner dimension mismatch: " +
                         detail::shape_str(a.rows(), a.cols()) + " * (" +
                         detail::shape_str(b.rows(), b.cols()) + ")^T");
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    Tensor<T> c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        const T* ai = a.row(i).data();
        for (std::size_t j = 0; j < m; ++j) {
            const T* bj = b.row(j).data();
            T acc{0};
#pragma omp simd reduction(+ : acc)
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            c(i, j) = acc;
        }
    }
    return c;
}

/// C += A^T * B. Used for weight gradients; accumulates into `c`.
template <class T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) {
        throw ShapeError("matmul_tn shape mismatch: (" + detail::shape_str(a.rows(), a.cols()) +
                         ")^T * " + detail::shape_str(b.rows(), b.cols()) + " -> " +
                         detail::shape_str(c.rows(), c.cols()));
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        const T* bi = b.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a(i, p);
            if (aip == T{0}) continue;
            T* cp = c.row(p).data();
#pragma omp simd
            for (std::size_t j = 0; j < m; ++j) cp[j] += aip * bi[j];
        }
    }
}

/// softmax(scale * s) over a single vector, max-subtracted.
template <class T>
void scaled_softmax_inplace(std::span<T> s, T scale) {
    if (s.empty()) return;
    T mx = s[0] * scale;
    for (T v : s) mx = std::max(mx, v * scale);
    T total{0};
    for (T& v : s) {
        v = std::exp(v * scale - mx);
        total += v;
    }
    for (T& v : s) v /= total;
}

template <class T>
Tensor<T> scaled_softmax(const Tensor<T>& s, T scale) {
    Tensor<T> out = s;
    for (std::size_t r = 0; r < out.rows(); ++r) scaled_softmax_inplace(out.row(r), scale);
    return out;
}

template <class T>
Tensor<T> relu(Tensor<T> x) {
    for (T& v : x.flat()) v = v > T{0} ? v : T{0};
    return x;
}

template <class T>
T relu(T x) {
    return x > T{0} ? x : T{0};
}

/// 1 / sqrt(mean(x^2) + eps) for one row.
template <class T>
T inverse_rms(std::span<const T> x) {
    T ss{0};
    const std::size_t n = x.size();
#pragma omp simd reduction(+ : ss)
    for (std::size_t i = 0; i < n; ++i) ss += x[i] * x[i];
    return T{1} / std::sqrt(ss / static_cast<T>(n) + static_cast<T>(kRmsEpsilon));
}

/// Row-wise RMS normalization followed by an elementwise gain.
/// Throws on an all-zero row: the normalized direction is undefined there.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain) {
    if (gain.size() != x.cols()) throw ShapeError("rms_norm gain length mismatch");
    Tensor<T> out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto xr = x.row(r);
        if (std::all_of(xr.begin(), xr.end(), [](T v) { return v == T{0}; })) {
            throw std::domain_error("rms_norm of an all-zero vector");
        }
        const T inv = inverse_rms(xr);
        auto o = out.row(r);
        for (std::size_t c = 0; c < x.cols(); ++c) o[c] = xr[c] * inv * gain[c];
    }
    return out;
}

/// Backward of y = g * x * inv_rms(x) for one row.
/// dx = inv * (g*dy) - x * inv^3 * mean(x * g * dy); dgain += dy * x * inv.
template <class T>
void rms_norm_row_backward(std::span<const T> x, std::span<const T> gain, T inv,
                           std::span<const T> dy, std::span<T> dx, std::span<T> dgain) {
    const std::size_t n = x.size();
    T m{0};
    for (std::size_t i = 0; i < n; ++i) m += x[i] * gain[i] * dy[i];
    m /= static_cast<T>(n);
    const T inv3 = inv * inv * inv;
    for (std::size_t i = 0; i < n; ++i) {
        dx[i] += inv * gain[i] * dy[i] - x[i] * inv3 * m;
        dgain[i] += dy[i] * x[i] * inv;
    }
}

/// Sinusoidal position table (positions x dim).
template <class T>
Tensor<T> sinusoidal_positions(std::size_t positions, std::size_t dim, T amplitude) {
    Tensor<T> pe(positions, dim);
    for (std::size_t p = 0; p < positions; ++p) {
        for (std::size_t i = 0; i + 1 < dim + 1; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
            pe(p, i) = static_cast<T>(amplitude * std::sin(static_cast<double>(p) * freq));
            if (i + 1 < dim) pe(p, i + 1) = static_cast<T>(amplitude * std::cos(static_cast<double>(p) * freq));
        }
    }
    return pe;
}

}  // namespace genir
