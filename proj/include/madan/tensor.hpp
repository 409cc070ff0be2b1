#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace madan {

// Dense row-major tensor over float or double. Storage is shared between
// copies (shallow copy semantics); clone() makes a deep copy. Ops always
// allocate fresh outputs, so sharing only matters where it is the point:
// parameter aliasing (F_A = F) and checkpoint views.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(count(shape_), T(0))) {}

    Tensor(std::vector<int> shape, T fill)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(count(shape_), fill)) {}

    static Tensor scalar(T v) {
        Tensor t(std::vector<int>{1});
        (*t.data_)[0] = v;
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }

    std::size_t numel() const { return data_ ? data_->size() : 0; }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }

    T& operator[](std::size_t i) { return (*data_)[i]; }
    const T& operator[](std::size_t i) const { return (*data_)[i]; }

    // NCHW accessors for 4-d tensors.
    T& at4(int n, int c, int h, int w) {
        return (*data_)[idx4(n, c, h, w)];
    }
    const T& at4(int n, int c, int h, int w) const {
        return (*data_)[idx4(n, c, h, w)];
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    void fill(T v) { std::fill(data_->begin(), data_->end(), v); }
    void zero() { fill(T(0)); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool shares_storage(const Tensor& o) const { return data_ == o.data_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(shape_);
        const T* s = data();
        U* d = t.data();
        for (std::size_t i = 0; i < numel(); ++i) d[i] = static_cast<U>(s[i]);
        return t;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::string r = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) r += "x";
            r += std::to_string(s[i]);
        }
        return r + "]";
    }

private:
    std::size_t idx4(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= static_cast<std::size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<T>> data_;

    template <typename U>
    friend class Tensor;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// H×W integer class map, values in [0, L).
class LabelMap {
public:
    LabelMap() = default;
    LabelMap(int h, int w) : h_(h), w_(w), v_(static_cast<std::size_t>(h) * w, 0) {}

    int height() const { return h_; }
    int width() const { return w_; }
    std::size_t numel() const { return v_.size(); }

    std::uint8_t& at(int y, int x) { return v_[static_cast<std::size_t>(y) * w_ + x]; }
    std::uint8_t at(int y, int x) const { return v_[static_cast<std::size_t>(y) * w_ + x]; }

    std::uint8_t* data() { return v_.data(); }
    const std::uint8_t* data() const { return v_.data(); }

    bool operator==(const LabelMap& o) const { return h_ == o.h_ && w_ == o.w_ && v_ == o.v_; }

private:
    int h_ = 0, w_ = 0;
    std::vector<std::uint8_t> v_;
};

} // namespace madan
