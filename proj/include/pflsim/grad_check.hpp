#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pflsim/tensor.hpp"

namespace pflsim {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    double tolerance = 1e-4;
    double denominator_floor = 1e-6;

    bool passed() const { return max_rel_err < tolerance; }
};

/// Compares reverse-mode gradients against central finite differences
/// (f(p+eps) - f(p-eps)) / 2eps, elementwise per named parameter.
///
/// Relative error is |a-n| / max(|a|, |n|, floor). The floor shields
/// gradient components below the resolution of central differences: the
/// probe cannot distinguish values under ~|f|*ulp/step from zero, so the
/// floor is that noise bound scaled by 1/tolerance (with safety margin).
///
/// f must rebuild its graph from the given leaf tensors on every call and be
/// deterministic (fix any rng seed / dropout mask inside f).
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double step = 1e-5, double tolerance = 1e-4) {
    for (auto& [name, p] : params) {
        if (!p.requires_grad())
            throw std::invalid_argument("grad_check: parameter '" + name + "' does not require grad");
        const_cast<Tensor&>(p).zero_grad();
    }

    Tensor loss = f();
    if (loss.numel() != 1) throw std::runtime_error("grad_check: f must return a scalar");
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("grad_check: non-finite loss " + std::to_string(loss.item()));
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));

    auto eval = [&]() {
        NoGradGuard ng;
        const double v = f().item();
        if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss during probing");
        return v;
    };

    GradCheckReport report;
    report.tolerance = tolerance;
    const double fd_noise = 100.0 * std::abs(loss.item()) * 2.2e-16 / step;
    report.denominator_floor = std::max(1e-6, fd_noise / tolerance);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& values = const_cast<Tensor&>(params[pi].second).data();
        GradCheckEntry entry;
        entry.name = params[pi].first;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + step;
            const double fp = eval();
            values[i] = saved - step;
            const double fm = eval();
            values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[pi][i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), report.denominator_floor});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic_at_worst = a;
                entry.numeric_at_worst = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace pflsim
