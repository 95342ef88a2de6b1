#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "radiopipe/error.hpp"

namespace radiopipe {

// Dense row-major tensor. The model only ever needs rank 1..3; rank-2 access
// goes through at(r, c).
template <typename S = float>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        int64_t n = 1;
        for (int e : shape) n *= e;
        t.shape = std::move(shape);
        t.data.assign(static_cast<size_t>(n), S(0));
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    S& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    const S& at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    Tensor like_zeros() const { return zeros(shape); }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.reserve(data.size());
        for (S x : data) out.data.push_back(static_cast<T>(x));
        return out;
    }
};

namespace detail {

inline std::string shape_string(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

}  // namespace detail

// C = A (m,k) x B (k,n). ikj order keeps the inner loop contiguous.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.cols() != b.rows()) {
        fail("ShapeMismatch", "matmul " + detail::shape_string(a.shape) + " x " +
                                  detail::shape_string(b.shape));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<S> c = Tensor<S>::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const S av = a.at(i, p);
            if (av == S(0)) continue;
            const S* brow = &b.data[static_cast<size_t>(p) * n];
            S* crow = &c.data[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A (m,k) x B^T where B is (n,k).
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.cols() != b.cols()) {
        fail("ShapeMismatch", "matmul_nt " + detail::shape_string(a.shape) + " x " +
                                  detail::shape_string(b.shape) + "^T");
    }
    const int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<S> c = Tensor<S>::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            S acc = S(0);
            const S* arow = &a.data[static_cast<size_t>(i) * k];
            const S* brow = &b.data[static_cast<size_t>(j) * k];
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c.at(i, j) = acc;
        }
    }
    return c;
}

// C = A^T x B where A is (k,m), B is (k,n).
template <typename S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rows() != b.rows()) {
        fail("ShapeMismatch", "matmul_tn " + detail::shape_string(a.shape) + "^T x " +
                                  detail::shape_string(b.shape));
    }
    const int k = a.rows(), m = a.cols(), n = b.cols();
    Tensor<S> c = Tensor<S>::zeros({m, n});
    for (int p = 0; p < k; ++p) {
        for (int i = 0; i < m; ++i) {
            const S av = a.at(p, i);
            if (av == S(0)) continue;
            const S* brow = &b.data[static_cast<size_t>(p) * n];
            S* crow = &c.data[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// y = x + bias broadcast over rows.
template <typename S>
void add_bias_rows(Tensor<S>& x, const Tensor<S>& bias) {
    if (bias.numel() != x.cols()) {
        fail("ShapeMismatch", "bias " + detail::shape_string(bias.shape) + " for " +
                                  detail::shape_string(x.shape));
    }
    for (int i = 0; i < x.rows(); ++i) {
        for (int j = 0; j < x.cols(); ++j) x.at(i, j) += bias.data[static_cast<size_t>(j)];
    }
}

// Column sums, the bias gradient of a rowwise affine map.
template <typename S>
Tensor<S> column_sums(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros({x.cols()});
    for (int i = 0; i < x.rows(); ++i) {
        for (int j = 0; j < x.cols(); ++j) out.data[static_cast<size_t>(j)] += x.at(i, j);
    }
    return out;
}

}  // namespace radiopipe
