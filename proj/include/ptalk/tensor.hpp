#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptalk {

using Scalar = double;

inline int64_t numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape);

// Validates before any allocation can act on a bogus element count.
inline size_t checked_numel(const std::vector<int>& shape) {
    for (int d : shape)
        if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim in " + shape_str(shape));
    return static_cast<size_t>(numel(shape));
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor. Compute runs in double; the PTLK1 container
// narrows to float32 on disk.
struct Tensor {
    std::vector<int> shape;
    std::vector<Scalar> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, Scalar fill = 0.0)
        : shape(std::move(s)), data(checked_numel(shape), fill) {}

    static Tensor vec(std::vector<Scalar> v) {
        Tensor t;
        t.shape = {static_cast<int>(v.size())};
        t.data = std::move(v);
        return t;
    }
    static Tensor of(std::vector<int> s, std::vector<Scalar> v) {
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(v);
        if (static_cast<int64_t>(t.data.size()) != numel(t.shape))
            throw std::invalid_argument("Tensor: data size does not match shape " + shape_str(t.shape));
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    Scalar& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    Scalar operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 2-D access (matrices)
    Scalar& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    Scalar at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }
    // 3-D access (C,H,W maps)
    Scalar& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    Scalar at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (Scalar v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(Scalar v) { std::fill(data.begin(), data.end(), v); }

    Tensor reshaped(std::vector<int> s) const {
        if (numel(s) != size())
            throw std::invalid_argument("Tensor::reshaped: size mismatch " + shape_str(shape) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace ptalk
