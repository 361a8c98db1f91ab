#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "groundling/tensor.hpp"

namespace groundling::ad {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;    // "name[i]" of the worst element
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central finite differences vs the backward pass over every element of every
// listed parameter. f must rebuild its graph on each call and close over the
// same Tensor handles passed here, so in-place perturbations are visible.
// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport gradcheck(const std::function<Tensor()>& f,
                                 const std::vector<std::pair<std::string, Tensor>>& params,
                                 double eps) {
    if (!(eps > 0.0 && eps <= 1e-2))
        throw PreconditionError("gradcheck: eps must lie in (0, 1e-2], got " +
                                std::to_string(eps));

    // f must be deterministic: two forward passes have to agree bitwise
    double f0, f1;
    {
        NoGradGuard ng;
        f0 = f().item();
        f1 = f().item();
    }
    if (std::memcmp(&f0, &f1, sizeof(double)) != 0)
        throw DeterminismError("gradcheck: two forward passes differ (" + std::to_string(f0) +
                               " vs " + std::to_string(f1) + ")");

    for (auto& [name, p] : params) p.node()->grad.assign(p.node()->value.size(), 0.0);
    Tensor out = f();
    if (out.numel() != 1) throw ShapeError("gradcheck: f must return a scalar");
    backward(out);

    GradCheckReport rep;
    NoGradGuard ng;
    for (auto& [name, p] : params) {
        auto node = p.node();
        std::vector<double> analytic = node->grad;
        if (analytic.empty()) analytic.assign(node->value.size(), 0.0);
        for (size_t i = 0; i < node->value.size(); ++i) {
            const double orig = node->value[i];
            node->value[i] = orig + eps;
            const double fp = f().item();
            node->value[i] = orig - eps;
            const double fm = f().item();
            node->value[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = name + "[" + std::to_string(i) + "]";
                rep.worst_analytic = analytic[i];
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

inline double gradcheck_max_err(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                double eps = 1e-4) {
    std::vector<std::pair<std::string, Tensor>> named;
    for (size_t i = 0; i < params.size(); ++i) named.emplace_back("p" + std::to_string(i), params[i]);
    return gradcheck(f, named, eps).max_rel_err;
}

}  // namespace groundling::ad
