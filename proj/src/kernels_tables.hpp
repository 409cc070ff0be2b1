#pragma once

#include "madan/kernels.hpp"

namespace madan::kern::detail {

template <typename T>
Ops<T> scalar_table();
template <typename T>
Ops<T> avx2_table();
template <typename T>
Ops<T> avx512_table();

bool cpu_has_avx2();
bool cpu_has_avx512();

} // namespace madan::kern::detail
