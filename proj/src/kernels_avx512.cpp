// AVX-512F kernel variants. Same contracts as kernels_scalar.cpp; rounding
// differs (FMA, lane-wise reduction order), covered by the equivalence tests.

#include "kernels_tables.hpp"

#include <immintrin.h>

#include <cmath>
#include <cstring>

namespace madan::kern::detail {
namespace {

template <typename T>
struct V;

template <>
struct V<float> {
    using reg = __m512;
    static constexpr int W = 16;
    static reg load(const float* p) { return _mm512_loadu_ps(p); }
    static void store(float* p, reg v) { _mm512_storeu_ps(p, v); }
    static reg set1(float v) { return _mm512_set1_ps(v); }
    static reg zero() { return _mm512_setzero_ps(); }
    static reg add(reg a, reg b) { return _mm512_add_ps(a, b); }
    static reg sub(reg a, reg b) { return _mm512_sub_ps(a, b); }
    static reg mul(reg a, reg b) { return _mm512_mul_ps(a, b); }
    static reg fma(reg a, reg b, reg c) { return _mm512_fmadd_ps(a, b, c); }
    static reg sqrt(reg a) { return _mm512_sqrt_ps(a); }
    static reg div(reg a, reg b) { return _mm512_div_ps(a, b); }
    static reg abs(reg a) { return _mm512_abs_ps(a); }
    static reg gt_zero_blend(reg x, reg if_pos, reg if_neg) {
        __mmask16 m = _mm512_cmp_ps_mask(x, _mm512_setzero_ps(), _CMP_GT_OQ);
        return _mm512_mask_blend_ps(m, if_neg, if_pos);
    }
    static float hsum(reg v) { return _mm512_reduce_add_ps(v); }
};

template <>
struct V<double> {
    using reg = __m512d;
    static constexpr int W = 8;
    static reg load(const double* p) { return _mm512_loadu_pd(p); }
    static void store(double* p, reg v) { _mm512_storeu_pd(p, v); }
    static reg set1(double v) { return _mm512_set1_pd(v); }
    static reg zero() { return _mm512_setzero_pd(); }
    static reg add(reg a, reg b) { return _mm512_add_pd(a, b); }
    static reg sub(reg a, reg b) { return _mm512_sub_pd(a, b); }
    static reg mul(reg a, reg b) { return _mm512_mul_pd(a, b); }
    static reg fma(reg a, reg b, reg c) { return _mm512_fmadd_pd(a, b, c); }
    static reg sqrt(reg a) { return _mm512_sqrt_pd(a); }
    static reg div(reg a, reg b) { return _mm512_div_pd(a, b); }
    static reg abs(reg a) { return _mm512_abs_pd(a); }
    static reg gt_zero_blend(reg x, reg if_pos, reg if_neg) {
        __mmask8 m = _mm512_cmp_pd_mask(x, _mm512_setzero_pd(), _CMP_GT_OQ);
        return _mm512_mask_blend_pd(m, if_neg, if_pos);
    }
    static double hsum(reg v) { return _mm512_reduce_add_pd(v); }
};

// ---------------------------------------------------------------- gemm_nn
// 6-row x 2-vector microkernel (12 accumulators out of 32 zmm regs).

template <typename T>
void mk_nn_6x2(int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc) {
    using v = V<T>;
    typename v::reg acc[6][2];
    for (int i = 0; i < 6; ++i) {
        acc[i][0] = v::zero();
        acc[i][1] = v::zero();
    }
    for (int k = 0; k < K; ++k) {
        const T* b = B + static_cast<std::size_t>(k) * ldb;
        typename v::reg b0 = v::load(b);
        typename v::reg b1 = v::load(b + v::W);
        for (int i = 0; i < 6; ++i) {
            typename v::reg a = v::set1(A[static_cast<std::size_t>(i) * lda + k]);
            acc[i][0] = v::fma(a, b0, acc[i][0]);
            acc[i][1] = v::fma(a, b1, acc[i][1]);
        }
    }
    for (int i = 0; i < 6; ++i) {
        T* c = C + static_cast<std::size_t>(i) * ldc;
        v::store(c, v::add(v::load(c), acc[i][0]));
        v::store(c + v::W, v::add(v::load(c + v::W), acc[i][1]));
    }
}

template <typename T>
void mk_nn_1x2(int K, const T* a, const T* B, int ldb, T* c) {
    using v = V<T>;
    typename v::reg a0 = v::zero(), a1 = v::zero();
    for (int k = 0; k < K; ++k) {
        const T* b = B + static_cast<std::size_t>(k) * ldb;
        typename v::reg av = v::set1(a[k]);
        a0 = v::fma(av, v::load(b), a0);
        a1 = v::fma(av, v::load(b + v::W), a1);
    }
    v::store(c, v::add(v::load(c), a0));
    v::store(c + v::W, v::add(v::load(c + v::W), a1));
}

template <typename T>
void x_gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc) {
    constexpr int NR = 2 * V<T>::W;
    if (!acc) {
        for (int i = 0; i < M; ++i) std::memset(C + static_cast<std::size_t>(i) * ldc, 0, sizeof(T) * N);
    }
    const int nfull = N - N % NR;
    int i = 0;
    for (; i + 6 <= M; i += 6) {
        for (int j = 0; j < nfull; j += NR) {
            mk_nn_6x2(K, A + static_cast<std::size_t>(i) * lda, lda, B + j, ldb,
                      C + static_cast<std::size_t>(i) * ldc + j, ldc);
        }
    }
    for (; i < M; ++i) {
        for (int j = 0; j < nfull; j += NR) {
            mk_nn_1x2(K, A + static_cast<std::size_t>(i) * lda, B + j, ldb,
                      C + static_cast<std::size_t>(i) * ldc + j);
        }
    }
    if (nfull < N) {
        for (i = 0; i < M; ++i) {
            const T* a = A + static_cast<std::size_t>(i) * lda;
            T* c = C + static_cast<std::size_t>(i) * ldc;
            for (int k = 0; k < K; ++k) {
                const T av = a[k];
                const T* b = B + static_cast<std::size_t>(k) * ldb;
                for (int j = nfull; j < N; ++j) c[j] += av * b[j];
            }
        }
    }
}

// ---------------------------------------------------------------- gemm_nt

template <typename T>
void x_gemm_nt(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc) {
    using v = V<T>;
    constexpr int W = V<T>::W;
    const int kfull = K - K % W;
    int i = 0;
    for (; i + 2 <= M; i += 2) {
        const T* a0 = A + static_cast<std::size_t>(i) * lda;
        const T* a1 = a0 + lda;
        int j = 0;
        for (; j + 4 <= N; j += 4) {
            typename v::reg s[2][4];
            for (int r = 0; r < 2; ++r)
                for (int q = 0; q < 4; ++q) s[r][q] = v::zero();
            const T* b0 = B + static_cast<std::size_t>(j) * ldb;
            const T* b1 = b0 + ldb;
            const T* b2 = b1 + ldb;
            const T* b3 = b2 + ldb;
            for (int k = 0; k < kfull; k += W) {
                typename v::reg va0 = v::load(a0 + k);
                typename v::reg va1 = v::load(a1 + k);
                typename v::reg vb0 = v::load(b0 + k);
                typename v::reg vb1 = v::load(b1 + k);
                typename v::reg vb2 = v::load(b2 + k);
                typename v::reg vb3 = v::load(b3 + k);
                s[0][0] = v::fma(va0, vb0, s[0][0]);
                s[0][1] = v::fma(va0, vb1, s[0][1]);
                s[0][2] = v::fma(va0, vb2, s[0][2]);
                s[0][3] = v::fma(va0, vb3, s[0][3]);
                s[1][0] = v::fma(va1, vb0, s[1][0]);
                s[1][1] = v::fma(va1, vb1, s[1][1]);
                s[1][2] = v::fma(va1, vb2, s[1][2]);
                s[1][3] = v::fma(va1, vb3, s[1][3]);
            }
            const T* bs[4] = {b0, b1, b2, b3};
            for (int r = 0; r < 2; ++r) {
                const T* a = r ? a1 : a0;
                T* c = C + static_cast<std::size_t>(i + r) * ldc + j;
                for (int q = 0; q < 4; ++q) {
                    T dot = v::hsum(s[r][q]);
                    for (int k = kfull; k < K; ++k) dot += a[k] * bs[q][k];
                    c[q] = acc ? c[q] + dot : dot;
                }
            }
        }
        for (; j < N; ++j) {
            const T* b = B + static_cast<std::size_t>(j) * ldb;
            for (int r = 0; r < 2; ++r) {
                const T* a = r ? a1 : a0;
                typename v::reg sv = v::zero();
                for (int k = 0; k < kfull; k += W) sv = v::fma(v::load(a + k), v::load(b + k), sv);
                T dot = v::hsum(sv);
                for (int k = kfull; k < K; ++k) dot += a[k] * b[k];
                T* c = C + static_cast<std::size_t>(i + r) * ldc + j;
                *c = acc ? *c + dot : dot;
            }
        }
    }
    for (; i < M; ++i) {
        const T* a = A + static_cast<std::size_t>(i) * lda;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<std::size_t>(j) * ldb;
            typename v::reg sv = v::zero();
            for (int k = 0; k < kfull; k += W) sv = v::fma(v::load(a + k), v::load(b + k), sv);
            T dot = v::hsum(sv);
            for (int k = kfull; k < K; ++k) dot += a[k] * b[k];
            T* c = C + static_cast<std::size_t>(i) * ldc + j;
            *c = acc ? *c + dot : dot;
        }
    }
}

// ---------------------------------------------------------------- gemm_tn

template <typename T>
void x_gemm_tn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc) {
    using v = V<T>;
    constexpr int NR = 2 * V<T>::W;
    if (!acc) {
        for (int i = 0; i < M; ++i) std::memset(C + static_cast<std::size_t>(i) * ldc, 0, sizeof(T) * N);
    }
    const int nfull = N - N % NR;
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<std::size_t>(k) * lda;
        const T* b = B + static_cast<std::size_t>(k) * ldb;
        for (int i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + static_cast<std::size_t>(i) * ldc;
            typename v::reg va = v::set1(av);
            int j = 0;
            for (; j < nfull; j += NR) {
                v::store(c + j, v::fma(va, v::load(b + j), v::load(c + j)));
                v::store(c + j + v::W, v::fma(va, v::load(b + j + v::W), v::load(c + j + v::W)));
            }
            for (; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// ------------------------------------------------------------ elementwise

template <typename T>
void x_axpy(std::size_t n, T a, const T* x, T* y) {
    using v = V<T>;
    typename v::reg va = v::set1(a);
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) v::store(y + i, v::fma(va, v::load(x + i), v::load(y + i)));
    for (; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void x_scale(std::size_t n, T a, T* x) {
    using v = V<T>;
    typename v::reg va = v::set1(a);
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) v::store(x + i, v::mul(va, v::load(x + i)));
    for (; i < n; ++i) x[i] *= a;
}

template <typename T>
void x_vadd(std::size_t n, const T* a, const T* b, T* out) {
    using v = V<T>;
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) v::store(out + i, v::add(v::load(a + i), v::load(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void x_vsub(std::size_t n, const T* a, const T* b, T* out) {
    using v = V<T>;
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) v::store(out + i, v::sub(v::load(a + i), v::load(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
T x_reduce_sum(std::size_t n, const T* x) {
    using v = V<T>;
    typename v::reg s = v::zero();
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) s = v::add(s, v::load(x + i));
    T r = v::hsum(s);
    for (; i < n; ++i) r += x[i];
    return r;
}

template <typename T>
T x_reduce_sumsq(std::size_t n, const T* x) {
    using v = V<T>;
    typename v::reg s = v::zero();
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) {
        typename v::reg xv = v::load(x + i);
        s = v::fma(xv, xv, s);
    }
    T r = v::hsum(s);
    for (; i < n; ++i) r += x[i] * x[i];
    return r;
}

template <typename T>
T x_reduce_abs_diff(std::size_t n, const T* a, const T* b) {
    using v = V<T>;
    typename v::reg s = v::zero();
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) s = v::add(s, v::abs(v::sub(v::load(a + i), v::load(b + i))));
    T r = v::hsum(s);
    for (; i < n; ++i) r += std::abs(a[i] - b[i]);
    return r;
}

template <typename T>
void x_leaky_relu_fwd(std::size_t n, T slope, const T* x, T* y) {
    using v = V<T>;
    typename v::reg vs = v::set1(slope);
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) {
        typename v::reg xv = v::load(x + i);
        v::store(y + i, v::gt_zero_blend(xv, xv, v::mul(vs, xv)));
    }
    for (; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
}

template <typename T>
void x_leaky_relu_bwd(std::size_t n, T slope, const T* x, const T* gy, T* gx) {
    using v = V<T>;
    typename v::reg vs = v::set1(slope);
    typename v::reg one = v::set1(T(1));
    std::size_t i = 0;
    for (; i + v::W <= n; i += v::W) {
        typename v::reg m = v::gt_zero_blend(v::load(x + i), one, vs);
        v::store(gx + i, v::fma(v::load(gy + i), m, v::load(gx + i)));
    }
    for (; i < n; ++i) gx[i] += gy[i] * (x[i] > T(0) ? T(1) : slope);
}

template <typename T>
void x_adam_step(std::size_t n, T* p, const T* g, T* m, T* v, T lr, T b1, T b2, T eps, T bc1, T bc2) {
    using vv = V<T>;
    typename vv::reg vb1 = vv::set1(b1), vb2 = vv::set1(b2);
    typename vv::reg vo1 = vv::set1(T(1) - b1), vo2 = vv::set1(T(1) - b2);
    typename vv::reg vlr = vv::set1(lr), veps = vv::set1(eps);
    typename vv::reg vib1 = vv::set1(T(1) / bc1), vib2 = vv::set1(T(1) / bc2);
    std::size_t i = 0;
    for (; i + vv::W <= n; i += vv::W) {
        typename vv::reg gv = vv::load(g + i);
        typename vv::reg mv = vv::fma(vo1, gv, vv::mul(vb1, vv::load(m + i)));
        typename vv::reg vvv = vv::fma(vo2, vv::mul(gv, gv), vv::mul(vb2, vv::load(v + i)));
        vv::store(m + i, mv);
        vv::store(v + i, vvv);
        typename vv::reg denom = vv::add(vv::sqrt(vv::mul(vvv, vib2)), veps);
        typename vv::reg upd = vv::div(vv::mul(vlr, vv::mul(mv, vib1)), denom);
        vv::store(p + i, vv::sub(vv::load(p + i), upd));
    }
    const T om1 = T(1) - b1, om2 = T(1) - b2;
    for (; i < n; ++i) {
        m[i] = b1 * m[i] + om1 * g[i];
        v[i] = b2 * v[i] + om2 * g[i] * g[i];
        p[i] -= lr * (m[i] * (T(1) / bc1)) / (std::sqrt(v[i] * (T(1) / bc2)) + eps);
    }
}

} // namespace

template <typename T>
Ops<T> avx512_table() {
    Ops<T> t;
    t.gemm_nn = &x_gemm_nn<T>;
    t.gemm_nt = &x_gemm_nt<T>;
    t.gemm_tn = &x_gemm_tn<T>;
    t.axpy = &x_axpy<T>;
    t.scale = &x_scale<T>;
    t.vadd = &x_vadd<T>;
    t.vsub = &x_vsub<T>;
    t.reduce_sum = &x_reduce_sum<T>;
    t.reduce_sumsq = &x_reduce_sumsq<T>;
    t.reduce_abs_diff = &x_reduce_abs_diff<T>;
    t.leaky_relu_fwd = &x_leaky_relu_fwd<T>;
    t.leaky_relu_bwd = &x_leaky_relu_bwd<T>;
    t.adam_step = &x_adam_step<T>;
    return t;
}

template Ops<float> avx512_table<float>();
template Ops<double> avx512_table<double>();

} // namespace madan::kern::detail
