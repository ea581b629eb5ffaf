#ifndef NBNET_TENSOR_HPP
#define NBNET_TENSOR_HPP

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "nbnet/errors.hpp"

namespace nbnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "(";
    for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + ")";
}

/**
 * Dense row-major tensor. Rank 4 is interpreted as NCHW throughout the
 * library; rank 2 as (rows, cols).
 */
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(shape_numel(shape), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), v(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != shape_numel(shape))
            throw ShapeError("tensor data size " + std::to_string(v.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t numel() const { return v.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](std::size_t i) { return v[i]; }
    const T& operator[](std::size_t i) const { return v[i]; }

    // NCHW accessor.
    T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return v[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return v[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    T& at2(std::size_t r, std::size_t c) { return v[r * shape[1] + c]; }
    const T& at2(std::size_t r, std::size_t c) const { return v[r * shape[1] + c]; }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }
    void zero() { fill(T(0)); }

    // Reinterprets the buffer with a new shape of equal element count.
    Tensor<T>& reshape(Shape s) {
        if (shape_numel(s) != v.size())
            throw ShapeError("reshape " + shape_str(shape) + " -> " + shape_str(s) +
                             " changes element count");
        shape = std::move(s);
        return *this;
    }

    Tensor<T> reshaped(Shape s) const {
        Tensor<T> t = *this;
        t.reshape(std::move(s));
        return t;
    }

    bool same_shape(const Tensor<T>& o) const { return shape == o.shape; }
};

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const std::string& who) {
    if (!a.same_shape(b))
        throw ShapeError(who + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

}

#endif
