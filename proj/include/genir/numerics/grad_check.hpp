#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "genir/numerics/tensor.hpp"

namespace genir {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t coordinates_checked = 0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Compares analytic gradients with central differences.
///
/// `loss` evaluates the scalar objective at the current contents of `params`;
/// the checker perturbs each coordinate in place and restores it afterwards.
/// The error per coordinate is |a - n| / max(|a| + |n|, floor). The floor keeps
/// coordinates whose gradient lies below the finite-difference resolution from
/// reporting pure roundoff as relative error. `stride` > 1 samples every
/// stride-th coordinate of each tensor.
template <class T>
GradCheckResult grad_check(const std::function<T()>& loss, std::span<Tensor<T>* const> params,
                           std::span<const Tensor<T>* const> analytic, T eps,
                           std::size_t stride = 1, double floor = 1e-12) {
    if (params.size() != analytic.size()) throw ShapeError("grad_check: params/grads count mismatch");
    GradCheckResult res;
    for (std::size_t t = 0; t < params.size(); ++t) {
        Tensor<T>& p = *params[t];
        const Tensor<T>& g = *analytic[t];
        if (!p.same_shape(g)) throw ShapeError("grad_check: gradient shape differs from parameter");
        for (std::size_t i = 0; i < p.size(); i += std::max<std::size_t>(stride, 1)) {
            const T saved = p[i];
            p[i] = saved + eps;
            const T up = loss();
            p[i] = saved - eps;
            const T down = loss();
            p[i] = saved;
            const double numeric = (static_cast<double>(up) - static_cast<double>(down)) /
                                   (2.0 * static_cast<double>(eps));
            const double a = static_cast<double>(g[i]);
            const double err = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), floor);
            ++res.coordinates_checked;
            if (err > res.max_relative_error) {
                res.max_relative_error = err;
                res.worst_tensor = t;
                res.worst_index = i;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace genir
