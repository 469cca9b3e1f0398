#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "ew/common.hpp"

namespace ew {

// Dense row-major matrix. Templated on the scalar so the same kernels can run
// in float (model storage) and double (oracle / gradient-check paths).
template <class R>
struct Mat {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<R> data;

    Mat() = default;
    Mat(size_t r, size_t c) : rows(r), cols(c), data(r * c, R(0)) {}
    Mat(size_t r, size_t c, std::vector<R> d) : rows(r), cols(c), data(std::move(d)) {
        require(data.size() == rows * cols, ErrorKind::shape, "matrix data size mismatch");
    }

    R* row(size_t i) { return data.data() + i * cols; }
    const R* row(size_t i) const { return data.data() + i * cols; }

    R& at(size_t i, size_t j) { return data[i * cols + j]; }
    R at(size_t i, size_t j) const { return data[i * cols + j]; }

    size_t size() const { return data.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    static Mat identity(size_t n) {
        Mat m(n, n);
        for (size_t i = 0; i < n; ++i) m.at(i, i) = R(1);
        return m;
    }
};

using Matrix = Mat<float>;

template <class R>
Mat<double> widen(const Mat<R>& m) {
    Mat<double> out(m.rows, m.cols);
    for (size_t i = 0; i < m.size(); ++i) out.data[i] = double(m.data[i]);
    return out;
}

inline Matrix narrow(const Mat<double>& m) {
    Matrix out(m.rows, m.cols);
    for (size_t i = 0; i < m.size(); ++i) out.data[i] = float(m.data[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Kernels. All pure; summation order in matmul is fixed (left to right over
// the inner dimension) so repeated runs are bit-identical.
// ---------------------------------------------------------------------------

template <class R>
Mat<R> matmul(const Mat<R>& a, const Mat<R>& b) {
    require(a.cols == b.rows, ErrorKind::shape,
            "matmul: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                std::to_string(b.rows) + ")");
    Mat<R> c(a.rows, b.cols);
    // i-k-j loop: row of c accumulated in k order, contiguous access on b.
    parallel_for(a.rows, a.cols * b.cols, [&](size_t i) {
        const R* arow = a.row(i);
        R* crow = c.row(i);
        for (size_t k = 0; k < a.cols; ++k) {
            R aik = arow[k];
            const R* brow = b.row(k);
            for (size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    });
    return c;
}

// c += a^T * b, with a (n x p), b (n x q), c (p x q). Used by backward passes.
template <class R>
void add_at_b(const Mat<R>& a, const Mat<R>& b, Mat<R>& c) {
    require(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols, ErrorKind::shape,
            "add_at_b: shape mismatch");
    parallel_for(a.cols, a.rows * b.cols, [&](size_t i) {
        R* crow = c.row(i);
        for (size_t k = 0; k < a.rows; ++k) {
            R aki = a.at(k, i);
            const R* brow = b.row(k);
            for (size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    });
}

template <class R>
Mat<R> transpose(const Mat<R>& m) {
    Mat<R> t(m.cols, m.rows);
    for (size_t i = 0; i < m.rows; ++i)
        for (size_t j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
    return t;
}

// c = a * b^T, with a (n x p), b (m x p), c (n x m). Goes through a transposed
// copy so the accumulation runs in the vectorizable i-k-j order; the summation
// order over k is the same as the direct dot product.
template <class R>
Mat<R> matmul_bt(const Mat<R>& a, const Mat<R>& b) {
    require(a.cols == b.cols, ErrorKind::shape, "matmul_bt: inner dimensions differ");
    return matmul(a, transpose(b));
}

template <class R>
R sigmoid(R x) {
    if (x >= R(0)) {
        return R(1) / (R(1) + std::exp(-x));
    }
    R e = std::exp(x);
    return e / (R(1) + e);
}

template <class R>
R swish_scalar(R x) {
    return x * sigmoid(x);
}

// d/dx [x * sigmoid(x)] = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
template <class R>
R swish_grad_scalar(R x) {
    R s = sigmoid(x);
    return s * (R(1) + x * (R(1) - s));
}

template <class R>
Mat<R> swish(const Mat<R>& x) {
    Mat<R> y(x.rows, x.cols);
    for (size_t i = 0; i < x.size(); ++i) y.data[i] = swish_scalar(x.data[i]);
    return y;
}

template <class R>
Mat<R> hadamard(const Mat<R>& a, const Mat<R>& b) {
    require(a.same_shape(b), ErrorKind::shape, "hadamard: shape mismatch");
    Mat<R> c(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) c.data[i] = a.data[i] * b.data[i];
    return c;
}

// In-place stabilized softmax over one row.
template <class R>
void softmax_row_inplace(R* v, size_t n) {
    R mx = v[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        v[i] = R(std::exp(double(v[i] - mx)));
        sum += double(v[i]);
    }
    R inv = R(1.0 / sum);
    for (size_t i = 0; i < n; ++i) v[i] *= inv;
}

template <class R>
std::vector<R> softmax_row(std::span<const R> x) {
    std::vector<R> y(x.begin(), x.end());
    softmax_row_inplace(y.data(), y.size());
    return y;
}

template <class R>
std::vector<R> softmax_row(const std::vector<R>& x) {
    return softmax_row(std::span<const R>(x));
}

// Indices of the k largest values, descending by value, ties to lowest index.
template <class R>
std::vector<size_t> topk_indices(std::span<const R> v, size_t k) {
    require(k >= 1 && k <= v.size(), ErrorKind::param,
            "topk_indices: k out of range (k=" + std::to_string(k) + ", n=" +
                std::to_string(v.size()) + ")");
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](size_t a, size_t b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

template <class R>
std::vector<size_t> topk_indices(const std::vector<R>& v, size_t k) {
    return topk_indices(std::span<const R>(v), k);
}

// Keep the k largest-magnitude entries (ties to lowest index), zero the rest.
// Surviving entries are copied bit-exactly.
template <class R>
std::vector<R> abs_topk_mask(std::span<const R> v, size_t k) {
    require(k >= 1 && k <= v.size(), ErrorKind::param,
            "abs_topk_mask: k out of range (k=" + std::to_string(k) + ", n=" +
                std::to_string(v.size()) + ")");
    std::vector<R> mag(v.size());
    for (size_t i = 0; i < v.size(); ++i) mag[i] = std::abs(v[i]);
    std::vector<size_t> keep = topk_indices(std::span<const R>(mag), k);
    std::vector<R> out(v.size(), R(0));
    for (size_t i : keep) out[i] = v[i];
    return out;
}

template <class R>
std::vector<R> abs_topk_mask(const std::vector<R>& v, size_t k) {
    return abs_topk_mask(std::span<const R>(v), k);
}

}  // namespace ew
