#pragma once

// Central finite-difference gradient checking against the reverse-mode tape,
// run in double precision so truncation error stays well below the tolerance.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mmcl/rng.hpp"
#include "mmcl/tensor.hpp"

namespace fdcheck {

struct Result {
    std::size_t checked = 0;
    double max_rel = 0.0;
    bool ok = true;
};

// `eval(do_backward)` must build a fresh tape from the current parameter
// values, return the scalar loss, and when asked run backward so that the
// analytic gradients land in the parameters' grad buffers.
inline Result check(const std::vector<mmcl::ParameterT<double>*>& params,
                    const std::function<double(bool)>& eval,
                    std::size_t coords_per_param = 20, double h = 1e-3,
                    double tol = 1e-3, std::uint64_t seed = 99) {
    for (auto* p : params) p->tensor.zero_grad();
    eval(true);
    mmcl::Rng rng(seed);
    Result res;
    for (auto* p : params) {
        const std::size_t n = p->tensor.size();
        const std::size_t k = std::min(coords_per_param, n);
        auto idx = rng.sample_without_replacement(n, k);
        for (auto i : idx) {
            const double orig = p->tensor.data[i];
            p->tensor.data[i] = orig + h;
            const double lp = eval(false);
            p->tensor.data[i] = orig - h;
            const double lm = eval(false);
            p->tensor.data[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = p->tensor.grad.empty() ? 0.0 : p->tensor.grad[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
            const double rel = std::abs(fd - an) / denom;
            res.max_rel = std::max(res.max_rel, rel);
            if (rel > tol) res.ok = false;
            ++res.checked;
        }
    }
    return res;
}

inline mmcl::ParameterT<double> make_param(const std::string& name,
                                           const mmcl::Shape& shape, mmcl::Rng& rng,
                                           double scale = 1.0) {
    mmcl::TensorT<double> t(shape);
    for (auto& v : t.data) v = scale * rng.normal();
    return mmcl::ParameterT<double>(name, std::move(t));
}

}  // namespace fdcheck
