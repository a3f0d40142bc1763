#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace genir {

/// Thrown for any shape disagreement between operands.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major rank-2 tensor. Vectors are 1 x n tensors.
///
/// Activations are laid out one token per row; weight matrices are stored
/// (out x in) so a projection of activations X is X * W^T.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }
    Tensor(std::initializer_list<std::initializer_list<T>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Tensor vector(std::size_t n, T fill = T{0}) { return Tensor(1, n, fill); }
    static Tensor vector(std::vector<T> values) {
        const auto n = values.size();
        return Tensor(1, n, std::move(values));
    }
    static Tensor identity(std::size_t n) {
        Tensor out(n, n);
        for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
        return out;
    }

    template <class U>
    static Tensor cast(const Tensor<U>& other) {
        std::vector<T> data(other.data().begin(), other.data().end());
        return Tensor(other.rows(), other.cols(), std::move(data));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<T> flat() noexcept { return data_; }
    std::span<const T> flat() const noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }
    std::vector<T>& data() noexcept { return data_; }

    Tensor row_copy(std::size_t r) const {
        return Tensor(1, cols_, std::vector<T>(row(r).begin(), row(r).end()));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    Tensor& operator+=(const Tensor& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Tensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }
    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, T s) { return a *= s; }
    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    void require_same(const Tensor& o, const char* op) const {
        if (!same_shape(o)) {
            throw ShapeError(std::string("shape mismatch in ") + op + ": " +
                             std::to_string(rows_) + "x" + std::to_string(cols_) + " vs " +
                             std::to_string(o.rows_) + "x" + std::to_string(o.cols_));
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <class T>
using Tensor2 = Tensor<T>;

/// Largest absolute elementwise difference; shapes must agree.
template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw ShapeError("dot length mismatch");
    T acc{0};
    const std::size_t n = a.size();
#pragma omp simd reduction(+ : acc)
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <class T>
T l2_norm(std::span<const T> a) {
    return std::sqrt(dot(a, a));
}

/// Cosine similarity; returns nullopt-like NaN when either vector is zero.
template <class T>
T cosine(std::span<const T> a, std::span<const T> b) {
    const T na = l2_norm(a), nb = l2_norm(b);
    if (na == T{0} || nb == T{0}) return std::numeric_limits<T>::quiet_NaN();
    return dot(a, b) / (na * nb);
}

}  // namespace genir
