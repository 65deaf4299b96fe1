#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "iseg/autograd.hpp"

namespace testing_util {

struct GradReport {
    double max_rel = 0;
    std::size_t worst = 0;
    std::size_t checked = 0;
    std::size_t refined = 0;  // entries whose step had to shrink
    double analytic = 0, numeric = 0;  // at the worst entry
};

/// Central differences of a scalar function of several double tensors against the analytic
/// gradient. Relative error uses max(|analytic|, |numeric|, floor) as denominator.
///
/// An entry that misses `tol` while its forward and backward one-sided differences also disagree
/// by more than `tol` has a ReLU kink (or strong curvature) inside [x-h, x+h], where the central difference estimates
/// nothing. Only such entries are re-probed, with the step divided by 10 (at most twice).
inline GradReport gradcheck(const std::function<iseg::Var<double>(std::vector<iseg::Var<double>>&)>& f,
                            std::vector<iseg::Var<double>> inputs, double h = 1e-3, double floor = 1e-6,
                            std::size_t stride = 1, double tol = 1e-4) {
    for (auto& v : inputs) {
        v.set_requires_grad(true);
        v.zero_grad();
    }
    auto out = f(inputs);
    iseg::backward(out);
    const double f0 = out.value()[0];
    std::vector<iseg::BasicTensor<double>> analytic;
    for (auto& v : inputs) analytic.push_back(v.grad());

    auto rel = [floor](double x, double y) { return std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}); };
    GradReport rep;
    std::size_t flat = 0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto& val = inputs[t].value();
        for (std::size_t i = 0; i < val.size(); i += stride, flat += stride) {
            const double orig = val[i], a = analytic[t][i];
            double numeric = 0, r = 0, step = h;
            for (int attempt = 0; attempt < 3; ++attempt, step /= 10) {
                val[i] = orig + step;
                const double up = f(inputs).value()[0];
                val[i] = orig - step;
                const double down = f(inputs).value()[0];
                val[i] = orig;
                numeric = (up - down) / (2 * step);
                r = rel(a, numeric);
                if (r <= tol || rel((up - f0) / step, (f0 - down) / step) <= tol) break;
                if (attempt == 0) ++rep.refined;
            }
            if (r > rep.max_rel) {
                rep.max_rel = r;
                rep.worst = flat;
                rep.analytic = a;
                rep.numeric = numeric;
            }
            ++rep.checked;
        }
    }
    return rep;
}

/// Random tensor with entries in [lo, hi], kept at least `gap` away from zero (ReLU kinks).
template <class RngT>
iseg::BasicTensor<double> random_tensor(const iseg::Shape& shape, RngT& rng, double lo = -1, double hi = 1,
                                        double gap = 0.0) {
    iseg::BasicTensor<double> t(shape, 0.0);
    for (auto& v : t.storage()) {
        do {
            v = rng.uniform(lo, hi);
        } while (std::abs(v) < gap);
    }
    return t;
}

}  // namespace testing_util
