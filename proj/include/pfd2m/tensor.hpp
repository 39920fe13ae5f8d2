#pragma once

#include <cblas.h>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "pfd2m/rng.hpp"

namespace pfd2m {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

// Data shape/duration mismatches (distinct from bad configuration).
struct ShapeError : Error {
    using Error::Error;
};

// Malformed input content (parseable file, invalid contents).
struct FormatError : Error {
    using Error::Error;
};

// Dense row-major 2-D double matrix. Vectors are 1xN or Nx1.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    static Tensor zeros(int r, int c) { return Tensor(r, c); }

    static Tensor full(int r, int c, double x) {
        Tensor t(r, c);
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }

    static Tensor randn(int r, int c, Rng& rng, double stddev = 1.0) {
        Tensor t(r, c);
        for (auto& x : t.v) x = stddev * rng.gaussian();
        return t;
    }

    int size() const { return rows * cols; }
    bool empty() const { return rows == 0 || cols == 0; }

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    }

    double frob_norm() const {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    }
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    double m = 0.0;
    for (int i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

// C += or = A * op(B); all row-major
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    assert(a.cols == b.rows);
    Tensor c(a.rows, b.cols);
    if (a.rows == 0 || b.cols == 0 || a.cols == 0) return c;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, a.rows, b.cols, a.cols,
                1.0, a.v.data(), a.cols, b.v.data(), b.cols, 0.0, c.v.data(), c.cols);
    return c;
}

// A [m x k] * B^T with B [n x k] -> [m x n]; the y = x W^T convention
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    assert(a.cols == b.cols);
    Tensor c(a.rows, b.rows);
    if (a.rows == 0 || b.rows == 0 || a.cols == 0) return c;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, a.rows, b.rows, a.cols,
                1.0, a.v.data(), a.cols, b.v.data(), b.cols, 0.0, c.v.data(), c.cols);
    return c;
}

// A^T [k x m]^T * B [k x n] -> [m x n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    assert(a.rows == b.rows);
    Tensor c(a.cols, b.cols);
    if (a.cols == 0 || b.cols == 0 || a.rows == 0) return c;
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, a.cols, b.cols, a.rows,
                1.0, a.v.data(), a.cols, b.v.data(), b.cols, 0.0, c.v.data(), c.cols);
    return c;
}

inline Tensor transpose(const Tensor& a) {
    Tensor t(a.cols, a.rows);
    for (int r = 0; r < a.rows; ++r)
        for (int c = 0; c < a.cols; ++c) t.at(c, r) = a.at(r, c);
    return t;
}

inline void axpy(double alpha, const Tensor& x, Tensor& y) {
    assert(x.same_shape(y));
    cblas_daxpy(x.size(), alpha, x.v.data(), 1, y.v.data(), 1);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    Tensor c = a;
    axpy(1.0, b, c);
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    Tensor c = a;
    axpy(-1.0, b, c);
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    cblas_dscal(c.size(), s, c.v.data(), 1);
    return c;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    Tensor c(a.rows, a.cols);
    for (int i = 0; i < c.size(); ++i) c.v[i] = a.v[i] * b.v[i];
    return c;
}

// nearest-neighbor row index map, center-aligned: floor((i + 0.5) * F / L)
inline int upsample_index(int i, int in_rows, int out_rows) {
    const long long num = (2LL * i + 1) * in_rows;
    int idx = static_cast<int>(num / (2LL * out_rows));
    return std::min(idx, in_rows - 1);
}

inline Tensor upsample_rows_nearest(const Tensor& in, int out_rows) {
    assert(in.rows >= 1 && out_rows >= 1);
    Tensor out(out_rows, in.cols);
    for (int i = 0; i < out_rows; ++i) {
        const double* src = in.row(upsample_index(i, in.rows, out_rows));
        std::copy(src, src + in.cols, out.row(i));
    }
    return out;
}

// length-preserving 1-D convolution over rows (time), zero padded.
// w is [c_out x (k * c_in)], tap j of input channel ci at column j*c_in+ci,
// taps centered with left offset (k-1)/2.
inline Tensor conv1d_same(const Tensor& x, const Tensor& w, const Tensor& bias, int k) {
    const int c_in = x.cols;
    const int c_out = w.rows;
    assert(w.cols == k * c_in);
    assert(bias.rows == 1 && bias.cols == c_out);
    const int off = (k - 1) / 2;
    Tensor out(x.rows, c_out);
    for (int t = 0; t < x.rows; ++t) {
        for (int co = 0; co < c_out; ++co) {
            double acc = bias.at(0, co);
            for (int j = 0; j < k; ++j) {
                const int src = t + j - off;
                if (src < 0 || src >= x.rows) continue;
                const double* xr = x.row(src);
                const double* wr = w.row(co) + j * c_in;
                for (int ci = 0; ci < c_in; ++ci) acc += wr[ci] * xr[ci];
            }
            out.at(t, co) = acc;
        }
    }
    return out;
}

// rows of gaussian noise orthonormalized by modified Gram-Schmidt.
// Deterministic in (rows, cols, seed); requires rows <= cols.
inline Tensor orthonormal_rows(int rows, int cols, std::uint64_t seed) {
    if (rows > cols) throw ConfigError("orthonormal_rows: rows must be <= cols");
    Rng rng(seed);
    Tensor q(rows, cols);
    for (int r = 0; r < rows; ++r) {
        while (true) {
            for (int c = 0; c < cols; ++c) q.at(r, c) = rng.gaussian();
            for (int p = 0; p < r; ++p) {
                double dot = cblas_ddot(cols, q.row(r), 1, q.row(p), 1);
                cblas_daxpy(cols, -dot, q.row(p), 1, q.row(r), 1);
            }
            double nrm = cblas_dnrm2(cols, q.row(r), 1);
            if (nrm > 1e-8) {
                cblas_dscal(cols, 1.0 / nrm, q.row(r), 1);
                break;
            }
        }
    }
    return q;
}

}  // namespace pfd2m
