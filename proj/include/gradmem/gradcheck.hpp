#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gradmem/tensor.hpp"

namespace gradmem {

// Central finite differences vs analytic gradients. rel errors use
// denominator max(|fd|, |analytic|, 1): a relative deviation for large
// gradients, an absolute one near zero.
struct GradReport {
    struct Entry {
        std::string name;
        double max_abs_err = 0;
        double max_rel_err = 0;
    };
    double max_abs_err = 0;
    double max_rel_err = 0;
    std::vector<Entry> per_param;

    void merge(Entry e) {
        max_abs_err = std::max(max_abs_err, e.max_abs_err);
        max_rel_err = std::max(max_rel_err, e.max_rel_err);
        per_param.push_back(std::move(e));
    }
};

template <class Real>
GradReport::Entry finite_diff_entry(const std::function<double(const Tensor<Real>&)>& f, const Tensor<Real>& point,
                                    const Tensor<Real>& analytic, double eps, const std::string& name = "x") {
    if (eps <= 0) throw TapeError("finite_diff_check: eps must be positive");
    if (!point.same_shape(analytic)) throw TapeError("finite_diff_check: analytic gradient shape mismatch");
    GradReport::Entry e;
    e.name = name;
    Tensor<Real> x = point;
    for (size_t i = 0; i < x.data.size(); ++i) {
        const Real saved = x.data[i];
        x.data[i] = saved + static_cast<Real>(eps);
        const double fp = f(x);
        x.data[i] = saved - static_cast<Real>(eps);
        const double fm = f(x);
        x.data[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw TapeError("finite_diff_check: non-finite function value");
        const double fd = (fp - fm) / (2.0 * eps);
        const double an = static_cast<double>(analytic.data[i]);
        const double abs_err = std::abs(fd - an);
        const double rel_err = abs_err / std::max({std::abs(fd), std::abs(an), 1.0});
        e.max_abs_err = std::max(e.max_abs_err, abs_err);
        e.max_rel_err = std::max(e.max_rel_err, rel_err);
    }
    return e;
}

template <class Real>
GradReport finite_diff_check(const std::function<double(const Tensor<Real>&)>& f, const Tensor<Real>& point,
                             const Tensor<Real>& analytic, double eps, const std::string& name = "x") {
    GradReport r;
    r.merge(finite_diff_entry(f, point, analytic, eps, name));
    return r;
}

}  // namespace gradmem
