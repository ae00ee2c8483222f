#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stcast/tensor.hpp"

namespace stcast {

struct GradCheckReport {
    double max_rel_err = 0;
    int coords_checked = 0;
    bool passed = false;
    std::string worst;  // "param[i]: analytic=.. fd=.." for diagnostics
};

// Compares reverse-mode gradients against central finite differences
// (f(x+h) - f(x-h)) / 2h on sampled coordinates of each parameter. `f` must
// be a pure scalar function of the parameters' current data.
// `max_coords_per_tensor` < 0 checks every coordinate.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h,
                                  double tol, int max_coords_per_tensor = -1, Rng* rng = nullptr) {
    if (!(h > 0)) throw ConfigError("grad_check: step must be positive");

    for (Tensor& p : params) p.zero_grad();
    Tensor loss = f();
    Real f0 = loss.value();
    if (!std::isfinite(f0)) throw Error("grad_check: function value is not finite");
    loss.backward();

    std::vector<std::vector<Real>> analytic;
    analytic.reserve(params.size());
    for (Tensor& p : params) analytic.push_back(p.grad());

    GradCheckReport report;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        std::vector<std::size_t> coords;
        std::size_t n = p.numel();
        if (max_coords_per_tensor < 0 || static_cast<std::size_t>(max_coords_per_tensor) >= n) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            if (rng == nullptr) throw ConfigError("grad_check: sampling coordinates requires an rng");
            for (int i = 0; i < max_coords_per_tensor; ++i) coords.push_back(rng->uniform_index(n));
        }
        for (std::size_t ci : coords) {
            Real saved = p[ci];
            p[ci] = saved + static_cast<Real>(h);
            Real fp = f().value();
            p[ci] = saved - static_cast<Real>(h);
            Real fm = f().value();
            p[ci] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("grad_check: perturbed value not finite");
            double fd = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * h);
            double an = static_cast<double>(analytic[pi][ci]);
            double denom = std::max({1.0, std::abs(an), std::abs(fd)});
            double rel = std::abs(an - fd) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = "param " + std::to_string(pi) + "[" + std::to_string(ci) +
                               "]: analytic=" + std::to_string(an) + " fd=" + std::to_string(fd);
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    return report;
}

}  // namespace stcast
