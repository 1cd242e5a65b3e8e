#pragma once

#include "ta/common.hpp"

#include <cstring>
#include <iosfwd>
#include <memory>
#include <numeric>
#include <vector>

namespace ta::ad {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense n-d array with shared storage. Copies are shallow; use clone() for a
// deep copy. grad is populated by Tape::backward for requires_grad leaves.
template <typename T>
struct TensorT {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    bool requires_grad = false;
    std::shared_ptr<std::vector<T>> grad;

    TensorT() = default;

    std::int64_t size() const { return data ? (std::int64_t)data->size() : 0; }
    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    T& operator[](std::int64_t i) { return (*data)[i]; }
    const T& operator[](std::int64_t i) const { return (*data)[i]; }

    static TensorT zeros(Shape s) {
        TensorT t;
        t.data = std::make_shared<std::vector<T>>(numel(s), T(0));
        t.shape = std::move(s);
        return t;
    }
    static TensorT full(Shape s, T v) {
        TensorT t = zeros(std::move(s));
        std::fill(t.data->begin(), t.data->end(), v);
        return t;
    }
    static TensorT scalar(T v) { return full({1}, v); }
    static TensorT from(Shape s, std::vector<T> values) {
        check((std::int64_t)values.size() == numel(s),
              "tensor data length " + std::to_string(values.size()) +
                  " does not match shape " + shape_str(s));
        TensorT t;
        t.data = std::make_shared<std::vector<T>>(std::move(values));
        t.shape = std::move(s);
        return t;
    }
    // Gaussian init, used for network weights and test fixtures.
    static TensorT randn(Shape s, Rng& rng, T stddev = T(1)) {
        TensorT t = zeros(std::move(s));
        std::normal_distribution<double> nd(0.0, 1.0);
        for (auto& v : *t.data) v = T(nd(rng)) * stddev;
        return t;
    }
    static TensorT rand_uniform(Shape s, Rng& rng, T lo, T hi) {
        TensorT t = zeros(std::move(s));
        std::uniform_real_distribution<double> ud{double(lo), double(hi)};
        for (auto& v : *t.data) v = T(ud(rng));
        return t;
    }

    TensorT clone() const {
        TensorT t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<T>>(*data);
        t.requires_grad = requires_grad;
        if (grad) t.grad = std::make_shared<std::vector<T>>(*grad);
        return t;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<U>>(data->size());
        for (size_t i = 0; i < data->size(); ++i) (*t.data)[i] = U((*data)[i]);
        t.requires_grad = requires_grad;
        return t;
    }

    void ensure_grad() {
        if (!grad) grad = std::make_shared<std::vector<T>>(data->size(), T(0));
    }
};

using Tensor = TensorT<float>;

// Raw little-endian tensor payload with a shape header ("TNS1"). Used by
// checkpoints and texture dumps.
void save_tensor(std::ostream& os, const Tensor& t);
Tensor load_tensor(std::istream& is);

}  // namespace ta::ad
