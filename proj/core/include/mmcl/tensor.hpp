#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mmcl/errors.hpp"
#include "mmcl/rng.hpp"

namespace mmcl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor. `grad` is empty until a backward pass touches it.
template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    TensorT() = default;
    TensorT(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {
        for (auto d : shape)
            if (d == 0) throw InvalidShape("zero dimension in shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() { grad.assign(data.size(), T(0)); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;

// Named trainable unit. Freezing flips `trainable` only; the optimizer and
// the tape both consult it.
template <typename T>
struct ParameterT {
    std::string name;
    TensorT<T> tensor;
    bool trainable = true;

    ParameterT() = default;
    ParameterT(std::string n, TensorT<T> t) : name(std::move(n)), tensor(std::move(t)) {}
};

using Parameter = ParameterT<float>;

// Deterministic Gaussian init: same seed and shape give bit-identical tensors.
template <typename T>
TensorT<T> seeded_normal_init(const Shape& shape, double mean, double stddev,
                              std::uint64_t rng_seed) {
    if (shape.empty()) throw InvalidShape("seeded_normal_init: empty shape");
    for (auto d : shape)
        if (d == 0) throw InvalidShape("seeded_normal_init: zero dimension");
    if (!(stddev > 0.0)) throw InvalidShape("seeded_normal_init: stddev must be > 0");
    TensorT<T> t(shape);
    Rng rng(rng_seed);
    for (auto& v : t.data) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
}

}  // namespace mmcl
