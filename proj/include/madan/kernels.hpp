#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace madan::kern {

// Arithmetic inner loops used by the tensor ops. Every entry has a scalar
// reference implementation plus AVX2 and AVX-512 variants; the active table
// is picked once at startup from CPUID (override with set_backend or the
// MADAN_BACKEND env var: scalar|avx2|avx512). The scalar table is the
// semantic reference; SIMD tables must match it within rounding (FMA blends
// the multiply-add rounding, so equality is tolerance-based, not bitwise).
//
// GEMM layout: row-major, explicit leading dimensions.
//   gemm_nn: C[MxN] (+)= A[MxK] * B[KxN]
//   gemm_nt: C[MxN] (+)= A[MxK] * B[NxK]^T
//   gemm_tn: C[MxN] (+)= A[KxM]^T * B[KxN]
template <typename T>
struct Ops {
    void (*gemm_nn)(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc);
    void (*gemm_nt)(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc);
    void (*gemm_tn)(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool acc);

    void (*axpy)(std::size_t n, T a, const T* x, T* y);           // y += a*x
    void (*scale)(std::size_t n, T a, T* x);                      // x *= a
    void (*vadd)(std::size_t n, const T* a, const T* b, T* out);  // out = a + b
    void (*vsub)(std::size_t n, const T* a, const T* b, T* out);  // out = a - b

    T (*reduce_sum)(std::size_t n, const T* x);
    T (*reduce_sumsq)(std::size_t n, const T* x);
    T (*reduce_abs_diff)(std::size_t n, const T* a, const T* b);  // sum |a-b|

    void (*leaky_relu_fwd)(std::size_t n, T slope, const T* x, T* y);
    // gx += gy * (x > 0 ? 1 : slope)
    void (*leaky_relu_bwd)(std::size_t n, T slope, const T* x, const T* gy, T* gx);

    // Adam with precomputed bias corrections bc1 = 1-b1^t, bc2 = 1-b2^t:
    //   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
    //   p -= lr * (m/bc1) / (sqrt(v/bc2) + eps)
    void (*adam_step)(std::size_t n, T* p, const T* g, T* m, T* v,
                      T lr, T b1, T b2, T eps, T bc1, T bc2);
};

enum class Backend { scalar = 0, avx2 = 1, avx512 = 2 };

const char* backend_name(Backend b);
bool backend_available(Backend b);            // compiled in and supported by this CPU
std::vector<Backend> available_backends();
Backend active_backend();
void set_backend(Backend b);                  // throws if unavailable

// Active dispatch table for T in {float, double}.
template <typename T>
const Ops<T>& ops();

// Specific backend's table (for equivalence tests). Null if unavailable.
template <typename T>
const Ops<T>* backend_ops(Backend b);

// Scalar-only transcendental loops (libm-bound; shared by all backends).
template <typename T>
void tanh_fwd(std::size_t n, const T* x, T* y);
template <typename T>
void tanh_bwd(std::size_t n, const T* y, const T* gy, T* gx);  // gx += gy*(1-y^2)

} // namespace madan::kern
