#include "madan/autodiff.hpp"

#include "madan/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace madan::ad {

namespace {

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> inputs) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    return Var<T>(n);
}

template <typename T>
void check_finite_scalar(const char* what, T v) {
    if (!std::isfinite(static_cast<double>(v)))
        throw std::runtime_error(std::string(what) + ": non-finite value");
}

int out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// col is [Cin*k*k] x [Ho*Wo], row-major.
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                T* dst = col + (static_cast<std::size_t>(c) * k * k + static_cast<std::size_t>(ki) * k + kj) * plane;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < Wo; ++ox) dst[static_cast<std::size_t>(oy) * Wo + ox] = T(0);
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        dst[static_cast<std::size_t>(oy) * Wo + ox] =
                            (ix >= 0 && ix < W) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* gx) {
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const T* src = col + (static_cast<std::size_t>(c) * k * k + static_cast<std::size_t>(ki) * k + kj) * plane;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) continue;
                    T* dst = gx + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < W) dst[ix] += src[static_cast<std::size_t>(oy) * Wo + ox];
                    }
                }
            }
        }
    }
}

// Per-pixel channel softmax of logits [B x L x H x W] into probs (same
// layout), with max subtraction. Channel stride within a sample is H*W.
template <typename T>
void softmax_channels(const Tensor<T>& logits, Tensor<T>& probs) {
    const int B = logits.dim(0), L = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const T* src = logits.data();
    T* dst = probs.data();
    for (int b = 0; b < B; ++b) {
        const T* s = src + static_cast<std::size_t>(b) * L * plane;
        T* d = dst + static_cast<std::size_t>(b) * L * plane;
        for (std::size_t px = 0; px < plane; ++px) {
            T mx = s[px];
            for (int c = 1; c < L; ++c) mx = std::max(mx, s[static_cast<std::size_t>(c) * plane + px]);
            T denom = T(0);
            for (int c = 0; c < L; ++c) {
                T e = std::exp(s[static_cast<std::size_t>(c) * plane + px] - mx);
                d[static_cast<std::size_t>(c) * plane + px] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (int c = 0; c < L; ++c) d[static_cast<std::size_t>(c) * plane + px] *= inv;
        }
    }
}

} // namespace

template <typename T>
T Var<T>::item() const {
    if (!n_ || n_->value.numel() != 1)
        throw std::runtime_error("Var::item: not a scalar");
    return n_->value[0];
}

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var<T>(n);
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return leaf(std::move(value), false);
}

template <typename T>
Var<T> detach(const Var<T>& x) {
    return leaf(x.value(), false);  // shares storage, drops the graph
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (xv.ndim() != 4 || wv.ndim() != 4)
        throw std::runtime_error("conv2d: expected 4-d input and weight");
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Cout = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != C)
        throw std::runtime_error("conv2d: channel mismatch: input " + Tensor<T>::shape_str(xv.shape()) +
                                 " vs weight " + Tensor<T>::shape_str(wv.shape()));
    const int Ho = out_extent(H, k, stride, pad);
    const int Wo = out_extent(W, k, stride, pad);
    if (Ho <= 0 || Wo <= 0)
        throw std::runtime_error("conv2d: input " + Tensor<T>::shape_str(xv.shape()) +
                                 " too small for kernel " + std::to_string(k) + " stride " + std::to_string(stride));

    const int K = C * k * k;
    const std::size_t oplane = static_cast<std::size_t>(Ho) * Wo;
    Tensor<T> y({B, Cout, Ho, Wo});
    const auto& ops = kern::ops<T>();
    {
        std::vector<T> col(static_cast<std::size_t>(K) * oplane);
        for (int n = 0; n < B; ++n) {
            const T* xn = xv.data() + static_cast<std::size_t>(n) * C * H * W;
            T* yn = y.data() + static_cast<std::size_t>(n) * Cout * oplane;
            im2col(xn, C, H, W, k, stride, pad, Ho, Wo, col.data());
            ops.gemm_nn(Cout, static_cast<int>(oplane), K, wv.data(), K, col.data(),
                        static_cast<int>(oplane), yn, static_cast<int>(oplane), false);
            const T* bias = b.value().data();
            for (int c = 0; c < Cout; ++c) {
                T* row = yn + static_cast<std::size_t>(c) * oplane;
                const T bc = bias[c];
                for (std::size_t i = 0; i < oplane; ++i) row[i] += bc;
            }
        }
    }

    Var<T> out = make_node(std::move(y), {x.node(), w.node(), b.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    self->backward_fn = [self, xn, wn, bn, stride, pad, B, C, H, W, Cout, k, K, Ho, Wo]() {
        const std::size_t oplane = static_cast<std::size_t>(Ho) * Wo;
        const Tensor<T>& gy = self->grad;
        const auto& ops = kern::ops<T>();
        std::vector<T> col(static_cast<std::size_t>(K) * oplane);
        const bool need_w = wn->requires_grad;
        const bool need_x = xn->requires_grad;
        if (need_w) {
            wn->ensure_grad();
            bn->ensure_grad();
        }
        if (need_x) xn->ensure_grad();
        std::vector<T> colgrad(need_x ? static_cast<std::size_t>(K) * oplane : 0);
        for (int n = 0; n < B; ++n) {
            const T* gyn = gy.data() + static_cast<std::size_t>(n) * Cout * oplane;
            if (need_w) {
                const T* xv = xn->value.data() + static_cast<std::size_t>(n) * C * H * W;
                im2col(xv, C, H, W, k, stride, pad, Ho, Wo, col.data());
                ops.gemm_nt(Cout, K, static_cast<int>(oplane), gyn, static_cast<int>(oplane),
                            col.data(), static_cast<int>(oplane), wn->grad.data(), K, true);
                T* gb = bn->grad.data();
                for (int c = 0; c < Cout; ++c) {
                    const T* row = gyn + static_cast<std::size_t>(c) * oplane;
                    gb[c] += ops.reduce_sum(oplane, row);
                }
            }
            if (need_x) {
                ops.gemm_tn(K, static_cast<int>(oplane), Cout, wn->value.data(), K, gyn,
                            static_cast<int>(oplane), colgrad.data(), static_cast<int>(oplane), false);
                T* gxn = xn->grad.data() + static_cast<std::size_t>(n) * C * H * W;
                col2im_acc(colgrad.data(), C, H, W, k, stride, pad, Ho, Wo, gxn);
            }
        }
    };
    return out;
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    const Tensor<T>& xv = x.value();
    if (xv.ndim() != 4) throw std::runtime_error("instance_norm: expected 4-d input");
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const T invm = T(1) / static_cast<T>(plane);

    Tensor<T> xhat({B, C, H, W});
    Tensor<T> invstd({B, C});
    Tensor<T> y({B, C, H, W});
    const T* g = gamma.value().data();
    const T* be = beta.value().data();
    for (int n = 0; n < B; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* src = xv.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            T* xh = xhat.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            T* dst = y.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            T mu = kern::ops<T>().reduce_sum(plane, src) * invm;
            T var = T(0);
            for (std::size_t i = 0; i < plane; ++i) {
                const T d = src[i] - mu;
                var += d * d;
            }
            var *= invm;
            const T is = T(1) / std::sqrt(var + eps);
            invstd[static_cast<std::size_t>(n) * C + c] = is;
            const T gc = g[c], bc = be[c];
            for (std::size_t i = 0; i < plane; ++i) {
                const T h = (src[i] - mu) * is;
                xh[i] = h;
                dst[i] = gc * h + bc;
            }
        }
    }

    Var<T> out = make_node(std::move(y), {x.node(), gamma.node(), beta.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    self->backward_fn = [self, xn, gn, bn, xhat, invstd, B, C, plane, invm]() {
        const Tensor<T>& gy = self->grad;
        const bool need_affine = gn->requires_grad;
        const bool need_x = xn->requires_grad;
        if (need_affine) {
            gn->ensure_grad();
            bn->ensure_grad();
        }
        if (need_x) xn->ensure_grad();
        const T* g = gn->value.data();
        for (int n = 0; n < B; ++n) {
            for (int c = 0; c < C; ++c) {
                const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
                const T* dy = gy.data() + off;
                const T* xh = xhat.data() + off;
                if (need_affine) {
                    T sg = T(0), sb = T(0);
                    for (std::size_t i = 0; i < plane; ++i) {
                        sg += dy[i] * xh[i];
                        sb += dy[i];
                    }
                    gn->grad[c] += sg;
                    bn->grad[c] += sb;
                }
                if (need_x) {
                    const T gc = g[c];
                    const T is = invstd[static_cast<std::size_t>(n) * C + c];
                    T m1 = T(0), m2 = T(0);  // mean(dxhat), mean(dxhat * xhat)
                    for (std::size_t i = 0; i < plane; ++i) {
                        const T dxh = dy[i] * gc;
                        m1 += dxh;
                        m2 += dxh * xh[i];
                    }
                    m1 *= invm;
                    m2 *= invm;
                    T* gx = xn->grad.data() + off;
                    for (std::size_t i = 0; i < plane; ++i) {
                        const T dxh = dy[i] * gc;
                        gx[i] += is * (dxh - m1 - xh[i] * m2);
                    }
                }
            }
        }
    };
    return out;
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    const Tensor<T>& xv = x.value();
    Tensor<T> y(xv.shape());
    kern::ops<T>().leaky_relu_fwd(xv.numel(), slope, xv.data(), y.data());
    Var<T> out = make_node(std::move(y), {x.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto xn = x.node();
    self->backward_fn = [self, xn, slope]() {
        xn->ensure_grad();
        kern::ops<T>().leaky_relu_bwd(self->grad.numel(), slope, xn->value.data(),
                                      self->grad.data(), xn->grad.data());
    };
    return out;
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return leaky_relu(x, T(0));
}

template <typename T>
Var<T> tanh_op(const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    Tensor<T> y(xv.shape());
    kern::tanh_fwd(xv.numel(), xv.data(), y.data());
    Var<T> out = make_node(std::move(y), {x.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto xn = x.node();
    self->backward_fn = [self, xn]() {
        xn->ensure_grad();
        kern::tanh_bwd(self->grad.numel(), self->value.data(), self->grad.data(), xn->grad.data());
    };
    return out;
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    if (xv.ndim() != 4) throw std::runtime_error("upsample_nearest2: expected 4-d input");
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor<T> y({B, C, 2 * H, 2 * W});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const T* src = xv.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
            T* dst = y.data() + (static_cast<std::size_t>(n) * C + c) * 4 * H * W;
            for (int i = 0; i < H; ++i) {
                T* r0 = dst + static_cast<std::size_t>(2 * i) * 2 * W;
                T* r1 = r0 + 2 * W;
                for (int j = 0; j < W; ++j) {
                    const T v = src[static_cast<std::size_t>(i) * W + j];
                    r0[2 * j] = r0[2 * j + 1] = r1[2 * j] = r1[2 * j + 1] = v;
                }
            }
        }
    Var<T> out = make_node(std::move(y), {x.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto xn = x.node();
    self->backward_fn = [self, xn, B, C, H, W]() {
        xn->ensure_grad();
        for (int n = 0; n < B; ++n)
            for (int c = 0; c < C; ++c) {
                T* gx = xn->grad.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
                const T* gy = self->grad.data() + (static_cast<std::size_t>(n) * C + c) * 4 * H * W;
                for (int i = 0; i < H; ++i) {
                    const T* r0 = gy + static_cast<std::size_t>(2 * i) * 2 * W;
                    const T* r1 = r0 + 2 * W;
                    for (int j = 0; j < W; ++j)
                        gx[static_cast<std::size_t>(i) * W + j] += r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1];
                }
            }
    };
    return out;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value()))
        throw std::runtime_error("add: shape mismatch " + Tensor<T>::shape_str(a.value().shape()) +
                                 " vs " + Tensor<T>::shape_str(b.value().shape()));
    Tensor<T> y(a.value().shape());
    kern::ops<T>().vadd(y.numel(), a.value().data(), b.value().data(), y.data());
    Var<T> out = make_node(std::move(y), {a.node(), b.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto an = a.node();
    auto bn = b.node();
    self->backward_fn = [self, an, bn]() {
        if (an->requires_grad) {
            an->ensure_grad();
            kern::ops<T>().axpy(self->grad.numel(), T(1), self->grad.data(), an->grad.data());
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            kern::ops<T>().axpy(self->grad.numel(), T(1), self->grad.data(), bn->grad.data());
        }
    };
    return out;
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> y = x.value().clone();
    kern::ops<T>().scale(y.numel(), s, y.data());
    Var<T> out = make_node(std::move(y), {x.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto xn = x.node();
    self->backward_fn = [self, xn, s]() {
        xn->ensure_grad();
        kern::ops<T>().axpy(self->grad.numel(), s, self->grad.data(), xn->grad.data());
    };
    return out;
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
        av.dim(3) != bv.dim(3))
        throw std::runtime_error("concat_channels: incompatible shapes " +
                                 Tensor<T>::shape_str(av.shape()) + " vs " + Tensor<T>::shape_str(bv.shape()));
    const int B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor<T> y({B, Ca + Cb, H, W});
    for (int n = 0; n < B; ++n) {
        std::copy_n(av.data() + static_cast<std::size_t>(n) * Ca * plane, Ca * plane,
                    y.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane);
        std::copy_n(bv.data() + static_cast<std::size_t>(n) * Cb * plane, Cb * plane,
                    y.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane + Ca * plane);
    }
    Var<T> out = make_node(std::move(y), {a.node(), b.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto an = a.node();
    auto bn = b.node();
    self->backward_fn = [self, an, bn, B, Ca, Cb, plane]() {
        for (int n = 0; n < B; ++n) {
            const T* gy = self->grad.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane;
            if (an->requires_grad) {
                an->ensure_grad();
                kern::ops<T>().axpy(Ca * plane, T(1), gy,
                                    an->grad.data() + static_cast<std::size_t>(n) * Ca * plane);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                kern::ops<T>().axpy(Cb * plane, T(1), gy + Ca * plane,
                                    bn->grad.data() + static_cast<std::size_t>(n) * Cb * plane);
            }
        }
    };
    return out;
}

template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value()))
        throw std::runtime_error("mean_abs_diff: shape mismatch " +
                                 Tensor<T>::shape_str(a.value().shape()) + " vs " +
                                 Tensor<T>::shape_str(b.value().shape()));
    const std::size_t n = a.value().numel();
    const T invn = T(1) / static_cast<T>(n);
    T v = kern::ops<T>().reduce_abs_diff(n, a.value().data(), b.value().data()) * invn;
    check_finite_scalar("mean_abs_diff", v);
    Var<T> out = make_node(Tensor<T>::scalar(v), {a.node(), b.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto an = a.node();
    auto bn = b.node();
    self->backward_fn = [self, an, bn, n, invn]() {
        const T g = self->grad[0] * invn;
        const T* av = an->value.data();
        const T* bv = bn->value.data();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const T d = av[i] - bv[i];
            const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
            if (an->requires_grad) an->grad[i] += s;
            if (bn->requires_grad) bn->grad[i] -= s;
        }
    };
    return out;
}

template <typename T>
Var<T> bce_with_logits_mean(const Var<T>& logits, T target) {
    const Tensor<T>& zv = logits.value();
    const std::size_t n = zv.numel();
    if (n == 0) throw std::runtime_error("bce_with_logits_mean: empty input");
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = static_cast<double>(zv[i]);
        if (!std::isfinite(z)) throw std::runtime_error("bce_with_logits_mean: non-finite logit");
        // softplus(z) - target*z, stable form
        acc += std::max(z, 0.0) - static_cast<double>(target) * z + std::log1p(std::exp(-std::abs(z)));
    }
    const T v = static_cast<T>(acc / static_cast<double>(n));
    Var<T> out = make_node(Tensor<T>::scalar(v), {logits.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto zn = logits.node();
    self->backward_fn = [self, zn, n, target]() {
        zn->ensure_grad();
        const T g = self->grad[0] / static_cast<T>(n);
        const T* z = zn->value.data();
        T* gz = zn->grad.data();
        for (std::size_t i = 0; i < n; ++i) {
            const T sig = T(1) / (T(1) + std::exp(-z[i]));
            gz[i] += g * (sig - target);
        }
    };
    return out;
}

template <typename T>
Var<T> softmax_ce_mean(const Var<T>& logits, const std::vector<LabelMap>& labels) {
    const Tensor<T>& zv = logits.value();
    if (zv.ndim() != 4) throw std::runtime_error("softmax_ce_mean: expected B x L x H x W logits");
    const int B = zv.dim(0), L = zv.dim(1), H = zv.dim(2), W = zv.dim(3);
    if (static_cast<int>(labels.size()) != B)
        throw std::runtime_error("softmax_ce_mean: batch size mismatch");
    for (const auto& m : labels)
        if (m.height() != H || m.width() != W)
            throw std::runtime_error("softmax_ce_mean: label map shape mismatch");
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    auto probs = std::make_shared<Tensor<T>>(zv.shape());
    softmax_channels(zv, *probs);
    double acc = 0;
    for (int b = 0; b < B; ++b) {
        const T* p = probs->data() + static_cast<std::size_t>(b) * L * plane;
        const std::uint8_t* y = labels[static_cast<std::size_t>(b)].data();
        for (std::size_t px = 0; px < plane; ++px) {
            const int cls = y[px];
            if (cls >= L)
                throw std::runtime_error("softmax_ce_mean: label " + std::to_string(cls) +
                                         " out of range [0," + std::to_string(L) + ")");
            const double q = std::max(static_cast<double>(p[static_cast<std::size_t>(cls) * plane + px]), 1e-12);
            acc -= std::log(q);
        }
    }
    const std::size_t total = static_cast<std::size_t>(B) * plane;
    const T v = static_cast<T>(acc / static_cast<double>(total));
    Var<T> out = make_node(Tensor<T>::scalar(v), {logits.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto zn = logits.node();
    auto labs = labels;  // copy: small uint8 maps
    self->backward_fn = [self, zn, probs, labs, B, L, plane, total]() {
        zn->ensure_grad();
        const T g = self->grad[0] / static_cast<T>(total);
        T* gz = zn->grad.data();
        for (int b = 0; b < B; ++b) {
            const T* p = probs->data() + static_cast<std::size_t>(b) * L * plane;
            T* gzb = gz + static_cast<std::size_t>(b) * L * plane;
            const std::uint8_t* y = labs[static_cast<std::size_t>(b)].data();
            for (std::size_t px = 0; px < plane; ++px) {
                const int cls = y[px];
                for (int c = 0; c < L; ++c)
                    gzb[static_cast<std::size_t>(c) * plane + px] +=
                        g * (p[static_cast<std::size_t>(c) * plane + px] - (c == cls ? T(1) : T(0)));
            }
        }
    };
    return out;
}

template <typename T>
Var<T> kl_softmax_mean(const Var<T>& logits, const Tensor<T>& ref_logits) {
    const Tensor<T>& zv = logits.value();
    if (zv.ndim() != 4) throw std::runtime_error("kl_softmax_mean: expected B x L x H x W logits");
    if (!(zv.shape() == ref_logits.shape()))
        throw std::runtime_error("kl_softmax_mean: shape mismatch " + Tensor<T>::shape_str(zv.shape()) +
                                 " vs " + Tensor<T>::shape_str(ref_logits.shape()));
    const int B = zv.dim(0), L = zv.dim(1), H = zv.dim(2), W = zv.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t npix = static_cast<std::size_t>(B) * plane;

    auto p = std::make_shared<Tensor<T>>(zv.shape());
    softmax_channels(zv, *p);
    Tensor<T> q(zv.shape());
    softmax_channels(ref_logits, q);

    // Per-pixel KL; keep s = log p - log q and f = sum_c p_c s_c for backward.
    auto s = std::make_shared<Tensor<T>>(zv.shape());
    auto f = std::make_shared<Tensor<T>>(std::vector<int>{B, 1, H, W});
    constexpr double floor = 1e-12;
    double acc = 0;
    for (int b = 0; b < B; ++b) {
        const T* pb = p->data() + static_cast<std::size_t>(b) * L * plane;
        const T* qb = q.data() + static_cast<std::size_t>(b) * L * plane;
        T* sb = s->data() + static_cast<std::size_t>(b) * L * plane;
        T* fb = f->data() + static_cast<std::size_t>(b) * plane;
        for (std::size_t px = 0; px < plane; ++px) {
            double kl = 0;
            for (int c = 0; c < L; ++c) {
                const std::size_t at = static_cast<std::size_t>(c) * plane + px;
                const double pc = std::max(static_cast<double>(pb[at]), floor);
                const double qc = std::max(static_cast<double>(qb[at]), floor);
                const double sc = std::log(pc) - std::log(qc);
                sb[at] = static_cast<T>(sc);
                kl += static_cast<double>(pb[at]) * sc;
            }
            fb[px] = static_cast<T>(kl);
            acc += kl;
        }
    }
    const T v = static_cast<T>(acc / static_cast<double>(npix));
    Var<T> out = make_node(Tensor<T>::scalar(v), {logits.node()});
    if (!out.requires_grad()) return out;
    Node<T>* self = out.node().get();
    auto zn = logits.node();
    self->backward_fn = [self, zn, p, s, f, B, L, plane, npix]() {
        zn->ensure_grad();
        const T g = self->grad[0] / static_cast<T>(npix);
        T* gz = zn->grad.data();
        for (int b = 0; b < B; ++b) {
            const T* pb = p->data() + static_cast<std::size_t>(b) * L * plane;
            const T* sb = s->data() + static_cast<std::size_t>(b) * L * plane;
            const T* fb = f->data() + static_cast<std::size_t>(b) * plane;
            T* gzb = gz + static_cast<std::size_t>(b) * L * plane;
            for (std::size_t px = 0; px < plane; ++px) {
                const T fpx = fb[px];
                for (int c = 0; c < L; ++c) {
                    const std::size_t at = static_cast<std::size_t>(c) * plane + px;
                    gzb[at] += g * pb[at] * (sb[at] - fpx);
                }
            }
        }
    };
    return out;
}

template <typename T>
void backward(const Var<T>& root) {
    if (!root.defined() || root.value().numel() != 1)
        throw std::runtime_error("backward: root must be a defined scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS over grad-requiring nodes.
    std::vector<std::shared_ptr<Node<T>>> topo;
    std::unordered_set<const Node<T>*> seen;
    struct Frame {
        std::shared_ptr<Node<T>> node;
        std::size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node(), 0});
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Frame& fr = stack.back();
        if (fr.next_input < fr.node->inputs.size()) {
            auto& in = fr.node->inputs[fr.next_input++];
            if (in->requires_grad && !seen.count(in.get())) {
                seen.insert(in.get());
                stack.push_back({in, 0});
            }
        } else {
            topo.push_back(fr.node);
            stack.pop_back();
        }
    }

    Node<T>* rn = root.node().get();
    rn->ensure_grad();
    rn->grad.fill(T(1));

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<T>* n = it->get();
        if (n->backward_fn) {
            if (n->grad.numel()) n->backward_fn();
            // Interior node: grad and closure are spent; release them so the
            // graph's memory unwinds as backward progresses.
            n->backward_fn = nullptr;
            n->grad = Tensor<T>();
        }
    }
}

#define MADAN_AD_INSTANTIATE(T)                                                                \
    template class Var<T>;                                                                     \
    template Var<T> leaf<T>(Tensor<T>, bool);                                                  \
    template Var<T> constant<T>(Tensor<T>);                                                    \
    template Var<T> detach<T>(const Var<T>&);                                                  \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);          \
    template Var<T> instance_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);          \
    template Var<T> relu<T>(const Var<T>&);                                                    \
    template Var<T> leaky_relu<T>(const Var<T>&, T);                                           \
    template Var<T> tanh_op<T>(const Var<T>&);                                                 \
    template Var<T> upsample_nearest2<T>(const Var<T>&);                                       \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                      \
    template Var<T> scale<T>(const Var<T>&, T);                                                \
    template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                          \
    template Var<T> mean_abs_diff<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> bce_with_logits_mean<T>(const Var<T>&, T);                                 \
    template Var<T> softmax_ce_mean<T>(const Var<T>&, const std::vector<LabelMap>&);           \
    template Var<T> kl_softmax_mean<T>(const Var<T>&, const Tensor<T>&);                       \
    template void backward<T>(const Var<T>&);

MADAN_AD_INSTANTIATE(float)
MADAN_AD_INSTANTIATE(double)

#undef MADAN_AD_INSTANTIATE

} // namespace madan::ad
