#pragma once

#include "madan/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace madan::ad {

// Reverse-mode autodiff over a dynamically built DAG. Var is a shared handle
// to a graph node; ops allocate a fresh output node wired to its inputs with
// a backward closure. backward(root) topologically sorts from a scalar root
// and accumulates gradients into every node with requires_grad, releasing
// interior grads/closures as soon as they are consumed.
//
// Templated on the element type: training runs float, gradient checks run
// double (finite differences need the head-room).

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily, zero-initialized
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void()> backward_fn;  // captures this + inputs

    bool is_leaf() const { return !backward_fn; }
    void ensure_grad() {
        if (grad.numel() == 0) {
            grad = Tensor<T>(value.shape());
            grad.zero();
        }
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor<T>& value() const { return n_->value; }
    Tensor<T>& value() { return n_->value; }
    Tensor<T>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool has_grad() const { return n_->grad.numel() != 0; }
    bool requires_grad() const { return n_->requires_grad; }
    void zero_grad() {
        if (n_ && n_->grad.numel()) n_->grad.zero();
    }
    T item() const;  // value of a 1-element tensor
    const std::shared_ptr<Node<T>>& node() const { return n_; }

private:
    std::shared_ptr<Node<T>> n_;
};

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad);
template <typename T>
Var<T> constant(Tensor<T> value);
// New non-differentiable leaf sharing x's value storage.
template <typename T>
Var<T> detach(const Var<T>& x);

// x: NCHW. w: [Cout, Cin, k, k], b: [Cout]. Zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
// Per-(sample, channel) normalization over H*W with affine (gamma, beta: [C]).
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope);
template <typename T>
Var<T> tanh_op(const Var<T>& x);
template <typename T>
Var<T> upsample_nearest2(const Var<T>& x);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T s);
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// Scalar-valued heads (shape {1}).
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b);
// Mean over all elements of BCE(sigmoid(logit), target), target constant 0/1.
template <typename T>
Var<T> bce_with_logits_mean(const Var<T>& logits, T target);
// logits: B x L x H x W, labels: B maps of H x W with values in [0, L).
template <typename T>
Var<T> softmax_ce_mean(const Var<T>& logits, const std::vector<LabelMap>& labels);
// Mean over pixels of KL(softmax(logits) || softmax(ref_logits)); ref carries
// no gradient. Probabilities floored at 1e-12 inside the logs.
template <typename T>
Var<T> kl_softmax_mean(const Var<T>& logits, const Tensor<T>& ref_logits);

template <typename T>
void backward(const Var<T>& root);

} // namespace madan::ad
