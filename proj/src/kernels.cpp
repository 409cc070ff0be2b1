#include "madan/kernels.hpp"

#include "kernels_tables.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace madan::kern {

namespace detail {

bool cpu_has_avx2() {
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

bool cpu_has_avx512() {
    return __builtin_cpu_supports("avx512f");
}

} // namespace detail

namespace {

struct Tables {
    Ops<float> f[3];
    Ops<double> d[3];
    bool avail[3];

    Tables() {
        f[0] = detail::scalar_table<float>();
        d[0] = detail::scalar_table<double>();
        f[1] = detail::avx2_table<float>();
        d[1] = detail::avx2_table<double>();
        f[2] = detail::avx512_table<float>();
        d[2] = detail::avx512_table<double>();
        avail[0] = true;
        avail[1] = detail::cpu_has_avx2();
        avail[2] = detail::cpu_has_avx512();
    }
};

const Tables& tables() {
    static const Tables t;
    return t;
}

Backend pick_default() {
    if (const char* env = std::getenv("MADAN_BACKEND")) {
        const std::string s(env);
        Backend want;
        if (s == "scalar") want = Backend::scalar;
        else if (s == "avx2") want = Backend::avx2;
        else if (s == "avx512") want = Backend::avx512;
        else throw std::runtime_error("MADAN_BACKEND: unknown backend '" + s + "' (expected scalar|avx2|avx512)");
        if (!backend_available(want))
            throw std::runtime_error("MADAN_BACKEND: backend '" + s + "' not supported on this CPU");
        return want;
    }
    if (backend_available(Backend::avx512)) return Backend::avx512;
    if (backend_available(Backend::avx2)) return Backend::avx2;
    return Backend::scalar;
}

Backend& active_slot() {
    static Backend b = pick_default();
    return b;
}

} // namespace

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::scalar: return "scalar";
        case Backend::avx2: return "avx2";
        case Backend::avx512: return "avx512";
    }
    return "?";
}

bool backend_available(Backend b) {
    return tables().avail[static_cast<int>(b)];
}

std::vector<Backend> available_backends() {
    std::vector<Backend> out;
    for (Backend b : {Backend::scalar, Backend::avx2, Backend::avx512})
        if (backend_available(b)) out.push_back(b);
    return out;
}

Backend active_backend() { return active_slot(); }

void set_backend(Backend b) {
    if (!backend_available(b))
        throw std::runtime_error(std::string("backend '") + backend_name(b) + "' not supported on this CPU");
    active_slot() = b;
}

template <>
const Ops<float>& ops<float>() {
    return tables().f[static_cast<int>(active_slot())];
}

template <>
const Ops<double>& ops<double>() {
    return tables().d[static_cast<int>(active_slot())];
}

template <>
const Ops<float>* backend_ops<float>(Backend b) {
    return backend_available(b) ? &tables().f[static_cast<int>(b)] : nullptr;
}

template <>
const Ops<double>* backend_ops<double>(Backend b) {
    return backend_available(b) ? &tables().d[static_cast<int>(b)] : nullptr;
}

template <typename T>
void tanh_fwd(std::size_t n, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

template <typename T>
void tanh_bwd(std::size_t n, const T* y, const T* gy, T* gx) {
    for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * (T(1) - y[i] * y[i]);
}

template void tanh_fwd<float>(std::size_t, const float*, float*);
template void tanh_fwd<double>(std::size_t, const double*, double*);
template void tanh_bwd<float>(std::size_t, const float*, const float*, float*);
template void tanh_bwd<double>(std::size_t, const double*, const double*, double*);

} // namespace madan::kern
