#pragma once

#include <cmath>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "fave/common.hpp"

namespace fave {

// Dense row-major array. Rank 1..3 is all the backbone needs.
struct Tensor {
    std::vector<i64> shape;
    std::vector<real> v;

    Tensor() = default;

    explicit Tensor(std::vector<i64> s) : shape(std::move(s)), v(numel(shape), real(0)) {}

    Tensor(std::vector<i64> s, std::vector<real> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<i64>(v.size()) != numel(shape))
            throw ShapeError("data length does not match shape");
    }

    static i64 numel(const std::vector<i64>& s) {
        i64 n = 1;
        for (i64 d : s) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<i64> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<i64> s, real x) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }

    static Tensor scalar(real x) { return Tensor({1}, {x}); }

    static Tensor row(std::vector<real> data) {
        i64 n = static_cast<i64>(data.size());
        return Tensor({n}, std::move(data));
    }

    i64 size() const { return static_cast<i64>(v.size()); }
    i64 rank() const { return static_cast<i64>(shape.size()); }
    i64 dim(i64 i) const { return shape[static_cast<size_t>(i)]; }

    // Rows/cols for the common 2D view: leading dims collapse into rows.
    i64 cols() const { return shape.empty() ? 1 : shape.back(); }
    i64 rows() const { return cols() == 0 ? 0 : size() / cols(); }

    real* data() { return v.data(); }
    const real* data() const { return v.data(); }

    real& at(i64 i, i64 j) { return v[static_cast<size_t>(i * cols() + j)]; }
    real at(i64 i, i64 j) const { return v[static_cast<size_t>(i * cols() + j)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (real x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    void check_finite(const std::string& what) const {
        if (!all_finite()) throw NumericError("non-finite value in " + what);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }
};

inline real dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
    real s = 0;
    for (i64 i = 0; i < a.size(); ++i) s += a.v[static_cast<size_t>(i)] * b.v[static_cast<size_t>(i)];
    return s;
}

inline real sum_sq(const Tensor& a) {
    real s = 0;
    for (real x : a.v) s += x * x;
    return s;
}

inline real norm2(const Tensor& a) { return std::sqrt(sum_sq(a)); }

}  // namespace fave
