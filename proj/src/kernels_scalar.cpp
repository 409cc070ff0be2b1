// Reference kernels. Plain loops, no intrinsics: these define the semantics
// that the SIMD variants are tested against.

#include "kernels_tables.hpp"

#include <cmath>
#include <cstring>

namespace madan::kern::detail {
namespace {

template <typename T>
void s_gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc) {
    for (int i = 0; i < M; ++i) {
        T* c = C + static_cast<std::size_t>(i) * ldc;
        if (!acc) std::memset(c, 0, sizeof(T) * N);
        const T* a = A + static_cast<std::size_t>(i) * lda;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + static_cast<std::size_t>(k) * ldb;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <typename T>
void s_gemm_nt(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<std::size_t>(i) * lda;
        T* c = C + static_cast<std::size_t>(i) * ldc;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<std::size_t>(j) * ldb;
            T s = 0;
            for (int k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] = acc ? c[j] + s : s;
        }
    }
}

template <typename T>
void s_gemm_tn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc) {
    if (!acc) {
        for (int i = 0; i < M; ++i) std::memset(C + static_cast<std::size_t>(i) * ldc, 0, sizeof(T) * N);
    }
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<std::size_t>(k) * lda;
        const T* b = B + static_cast<std::size_t>(k) * ldb;
        for (int i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + static_cast<std::size_t>(i) * ldc;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <typename T>
void s_axpy(std::size_t n, T a, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void s_scale(std::size_t n, T a, T* x) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

template <typename T>
void s_vadd(std::size_t n, const T* a, const T* b, T* out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void s_vsub(std::size_t n, const T* a, const T* b, T* out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
T s_reduce_sum(std::size_t n, const T* x) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    return s;
}

template <typename T>
T s_reduce_sumsq(std::size_t n, const T* x) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
    return s;
}

template <typename T>
T s_reduce_abs_diff(std::size_t n, const T* a, const T* b) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(a[i] - b[i]);
    return s;
}

template <typename T>
void s_leaky_relu_fwd(std::size_t n, T slope, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
}

template <typename T>
void s_leaky_relu_bwd(std::size_t n, T slope, const T* x, const T* gy, T* gx) {
    for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * (x[i] > T(0) ? T(1) : slope);
}

template <typename T>
void s_adam_step(std::size_t n, T* p, const T* g, T* m, T* v, T lr, T b1, T b2, T eps, T bc1, T bc2) {
    const T om1 = T(1) - b1, om2 = T(1) - b2;
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + om1 * g[i];
        v[i] = b2 * v[i] + om2 * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
}

} // namespace

template <typename T>
Ops<T> scalar_table() {
    Ops<T> t;
    t.gemm_nn = &s_gemm_nn<T>;
    t.gemm_nt = &s_gemm_nt<T>;
    t.gemm_tn = &s_gemm_tn<T>;
    t.axpy = &s_axpy<T>;
    t.scale = &s_scale<T>;
    t.vadd = &s_vadd<T>;
    t.vsub = &s_vsub<T>;
    t.reduce_sum = &s_reduce_sum<T>;
    t.reduce_sumsq = &s_reduce_sumsq<T>;
    t.reduce_abs_diff = &s_reduce_abs_diff<T>;
    t.leaky_relu_fwd = &s_leaky_relu_fwd<T>;
    t.leaky_relu_bwd = &s_leaky_relu_bwd<T>;
    t.adam_step = &s_adam_step<T>;
    return t;
}

template Ops<float> scalar_table<float>();
template Ops<double> scalar_table<double>();

} // namespace madan::kern::detail
