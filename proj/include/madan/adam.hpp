#pragma once

#include "madan/kernels.hpp"
#include "madan/nn.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace madan::nn {

// Adam over one parameter group. step() consumes the accumulated gradients
// and zeroes them; parameters whose gradient was never allocated in the
// current step are skipped (their moments do not advance), which keeps the
// update pattern deterministic. Moments and the step counter serialize into
// checkpoints so a restored run continues bit-identically.
template <typename T>
class Adam {
public:
    struct Slot {
        std::string name;
        ad::Var<T> param;
        Tensor<T> m, v;
    };

    Adam() = default;
    Adam(ParamList<T> params, T lr, T beta1, T beta2, T eps = T(1e-8))
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        slots_.reserve(params.size());
        for (auto& p : params) {
            Slot s;
            s.name = p.name;
            s.param = p.var;
            s.m = Tensor<T>(p.var.value().shape());
            s.v = Tensor<T>(p.var.value().shape());
            slots_.push_back(std::move(s));
        }
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(b1_), static_cast<double>(t_)));
        const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(b2_), static_cast<double>(t_)));
        const auto& ops = kern::ops<T>();
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            Tensor<T>& g = s.param.grad();
            ops.adam_step(g.numel(), s.param.value().data(), g.data(), s.m.data(), s.v.data(),
                          lr_, b1_, b2_, eps_, bc1, bc2);
            g.zero();
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    std::vector<Slot>& slots() { return slots_; }
    std::int64_t steps() const { return t_; }
    void set_steps(std::int64_t t) { t_ = t; }
    T lr() const { return lr_; }
    void set_lr(T lr) { lr_ = lr; }

private:
    std::vector<Slot> slots_;
    T lr_ = T(1e-4), b1_ = T(0.9), b2_ = T(0.999), eps_ = T(1e-8);
    std::int64_t t_ = 0;
};

} // namespace madan::nn
