#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace magic {

// Dense row-major tensor. The scalar type doubles as the dtype: float for
// training, double for gradient checking and reference oracles.
template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape)) {
            throw std::invalid_argument("tensor data length does not match shape");
        }
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) {
        std::size_t n = count(s);
        return Tensor(std::move(s), std::vector<T>(n, T(0)));
    }

    static Tensor full(std::vector<std::size_t> s, T value) {
        std::size_t n = count(s);
        return Tensor(std::move(s), std::vector<T>(n, value));
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    std::size_t numel() const { return data.size(); }
    bool empty() const { return data.empty(); }

    // 2-d accessors; most of the stack works on (rows x cols) matrices.
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const {
        if (shape.size() < 2) return shape.size() == 1 ? 1 : 0;
        std::size_t c = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    T& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    T at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace magic
