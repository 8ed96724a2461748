#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace retmask {

// Row-major 2-D buffer. Small enough that value semantics are fine everywhere.
template <typename T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, T(0)) {}

    T* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
    const T* row(int r) const { return v.data() + static_cast<std::size_t>(r) * cols; }
    T& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    T at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t size() const { return v.size(); }
    void zero() { std::fill(v.begin(), v.end(), T(0)); }

    friend bool operator==(const Mat&, const Mat&) = default;
};

// Dot product with eight independent accumulators. The reduction order is
// fixed by this code, not by compiler flags, so results are reproducible
// for a given build while still vectorizing without -ffast-math.
template <typename T>
inline T dot(const T* a, const T* b, int n) {
    T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        acc[0] += a[i + 0] * b[i + 0];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        acc[4] += a[i + 4] * b[i + 4];
        acc[5] += a[i + 5] * b[i + 5];
        acc[6] += a[i + 6] * b[i + 6];
        acc[7] += a[i + 7] * b[i + 7];
    }
    T tail = T(0);
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
           ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y[m,n] = x[m,k] * w[n,k]^T   (w stored [out,in]; contiguous dots)
template <typename T>
inline void matmul_nt(const T* x, int m, int k, const T* w, int n, T* y) {
    for (int i = 0; i < m; ++i) {
        const T* xi = x + static_cast<std::size_t>(i) * k;
        T* yi = y + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            yi[j] = dot(xi, w + static_cast<std::size_t>(j) * k, k);
        }
    }
}

// y[m,k] += d[m,n] * w[n,k]    (input-gradient path)
template <typename T>
inline void matmul_nn_acc(const T* d, int m, int n, const T* w, int k, T* y) {
    for (int i = 0; i < m; ++i) {
        const T* di = d + static_cast<std::size_t>(i) * n;
        T* yi = y + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < n; ++p) {
            axpy(di[p], w + static_cast<std::size_t>(p) * k, yi, k);
        }
    }
}

// dw[n,k] += d[m,n]^T * x[m,k]  (weight-gradient path)
template <typename T>
inline void matmul_tn_acc(const T* d, const T* x, int m, int n, int k, T* dw) {
    for (int i = 0; i < m; ++i) {
        const T* di = d + static_cast<std::size_t>(i) * n;
        const T* xi = x + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < n; ++p) {
            axpy(di[p], xi, dw + static_cast<std::size_t>(p) * k, k);
        }
    }
}

}  // namespace retmask
