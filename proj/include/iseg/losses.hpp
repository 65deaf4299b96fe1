#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "iseg/autograd.hpp"
#include "iseg/error.hpp"
#include "iseg/ops.hpp"
#include "iseg/tensor.hpp"

namespace iseg {

/// Every weighting coefficient of the training objectives.
struct LossWeights {
    double gamma_smse = 0.95;
    double gamma_mse = 0.05;
    double gamma_r = 1.0;
    double gamma_s = 1.0;
    double gamma_ce = 1.0;
    double gamma_il = 1.0;
    double intrinsic_scale = 100.0;
    double w = 2.0;

    /// Multiplier of the intrinsic term in the joint objective.
    double effective_intrinsic_weight() const { return gamma_il * intrinsic_scale * w; }

    void validate() const {
        for (double v : {gamma_smse, gamma_mse, gamma_r, gamma_s, gamma_ce, gamma_il, intrinsic_scale, w}) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
        }
        if (!(gamma_smse + gamma_mse > 0.0)) throw ConfigError("gamma_smse + gamma_mse must be positive");
    }
};

/// Per-class cross-entropy weights; zero marks a class excluded from the loss.
struct ClassWeightVector {
    std::vector<double> weights;

    static ClassWeightVector uniform(std::size_t classes) { return {std::vector<double>(classes, 1.0)}; }
};

/// How the SMSE gradient treats the optimal scale.
enum class AlphaGradient { detached, through };

namespace loss {

namespace detail {

template <class A, class B>
void require_same_size(std::span<const A> a, std::span<const B> b, const char* what) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(what) + ": size mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    if (a.empty()) throw ShapeError(std::string(what) + ": empty input");
}

}  // namespace detail

/// Mean of squared element differences.
template <class T>
double mse(std::span<const T> pred, std::span<const T> target) {
    detail::require_same_size(pred, target, "mse");
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = double(pred[i]) - double(target[i]);
        acc += d * d;
    }
    return acc / double(pred.size());
}

/// Least-squares scale alpha = <J, J_gt> / <J, J> minimizing mse(alpha * J, J_gt); one scalar over all elements.
/// A brightness factor cannot be negative: an anti-correlated prediction gets alpha = 0. Without the bound a
/// sign-flipped, near-zero output scores as well as the true one and training can settle there.
template <class T>
double optimal_alpha(std::span<const T> pred, std::span<const T> target) {
    detail::require_same_size(pred, target, "optimal_alpha");
    double jj = 0, jt = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        jj += double(pred[i]) * double(pred[i]);
        jt += double(pred[i]) * double(target[i]);
    }
    if (jj == 0.0) throw DegenerateInputError("optimal_alpha: prediction is identically zero, scale undefined");
    return std::max(0.0, jt / jj);
}

/// Scale-invariant MSE: mse(alpha * J, J_gt) with the optimal alpha.
template <class T>
double smse(std::span<const T> pred, std::span<const T> target) {
    const double alpha = optimal_alpha(pred, target);
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = alpha * double(pred[i]) - double(target[i]);
        acc += d * d;
    }
    return acc / double(pred.size());
}

template <class T>
double combined_loss(std::span<const T> pred, std::span<const T> target, const LossWeights& w) {
    return w.gamma_smse * smse(pred, target) + w.gamma_mse * mse(pred, target);
}

template <class T>
double intrinsic_loss(std::span<const T> r, std::span<const T> r_gt, std::span<const T> s, std::span<const T> s_gt,
                      const LossWeights& w) {
    return w.gamma_r * combined_loss(r, r_gt, w) + w.gamma_s * combined_loss(s, s_gt, w);
}

// Tensor overloads check full shapes, not only element counts.
template <class T>
double mse(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
    require_same_shape(pred, target, "mse");
    return mse(pred.values(), target.values());
}
template <class T>
double optimal_alpha(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
    require_same_shape(pred, target, "optimal_alpha");
    return optimal_alpha(pred.values(), target.values());
}
template <class T>
double smse(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
    require_same_shape(pred, target, "smse");
    return smse(pred.values(), target.values());
}
template <class T>
double combined_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, const LossWeights& w) {
    require_same_shape(pred, target, "combined_loss");
    return combined_loss(pred.values(), target.values(), w);
}
template <class T>
double intrinsic_loss(const BasicTensor<T>& r, const BasicTensor<T>& r_gt, const BasicTensor<T>& s,
                      const BasicTensor<T>& s_gt, const LossWeights& w) {
    require_same_shape(r, r_gt, "intrinsic_loss (reflectance)");
    require_same_shape(s, s_gt, "intrinsic_loss (shading)");
    return intrinsic_loss(r.values(), r_gt.values(), s.values(), s_gt.values(), w);
}

namespace detail {

inline void check_class_weights(const ClassWeightVector& cw, std::size_t classes) {
    if (cw.weights.size() != classes) {
        throw ShapeError("class weight vector has " + std::to_string(cw.weights.size()) + " entries, expected " +
                         std::to_string(classes));
    }
    for (double v : cw.weights) {
        if (!std::isfinite(v) || v < 0.0) throw PreconditionError("class weights must be finite and non-negative");
    }
}

inline constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

/// Weighted cross-entropy value and (optionally) d loss / d logits, for logits laid out (N, C, HW).
template <class T>
double cross_entropy_impl(const BasicTensor<T>& logits, std::span<const std::uint8_t> labels,
                          const ClassWeightVector& cw, BasicTensor<T>* grad) {
    if (logits.rank() != 3 && logits.rank() != 4) {
        throw ShapeError("cross_entropy: logits must be (C,H,W) or (N,C,H,W), got " + to_string(logits.shape()));
    }
    const bool batched = logits.rank() == 4;
    const std::size_t N = batched ? logits.dim(0) : 1;
    const std::size_t C = logits.dim(batched ? 1 : 0);
    const std::size_t HW = logits.size() / (N * C);
    if (labels.size() != N * HW) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(logits.shape()));
    }
    check_class_weights(cw, C);
    double total_w = 0, acc = 0;
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
            const std::uint8_t l = labels[n * HW + i];
            if (l >= C) throw RangeError("cross_entropy: label " + std::to_string(l) + " >= num_classes " + std::to_string(C));
            const double wl = cw.weights[l];
            double mx = logits[(n * C) * HW + i];
            for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, logits[(n * C + c) * HW + i]);
            double z = 0;
            for (std::size_t c = 0; c < C; ++c) z += std::exp(double(logits[(n * C + c) * HW + i]) - mx);
            const double logp = double(logits[(n * C + l) * HW + i]) - mx - std::log(z);
            acc -= wl * std::max(logp, kLogFloor);
            total_w += wl;
        }
    }
    if (total_w <= 0.0) {
        if (grad) *grad = BasicTensor<T>(logits.shape(), T{0});
        return 0.0;
    }
    if (grad) {
        *grad = BasicTensor<T>(logits.shape(), T{0});
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t i = 0; i < HW; ++i) {
                const std::uint8_t l = labels[n * HW + i];
                const double scale = cw.weights[l] / total_w;
                if (scale == 0.0) continue;
                double mx = logits[(n * C) * HW + i];
                for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, logits[(n * C + c) * HW + i]);
                double z = 0;
                for (std::size_t c = 0; c < C; ++c) z += std::exp(double(logits[(n * C + c) * HW + i]) - mx);
                for (std::size_t c = 0; c < C; ++c) {
                    const double p = std::exp(double(logits[(n * C + c) * HW + i]) - mx) / z;
                    (*grad)[(n * C + c) * HW + i] = static_cast<T>(scale * (p - (c == l ? 1.0 : 0.0)));
                }
            }
        }
    }
    return acc / total_w;
}

}  // namespace detail

/// Softmax cross-entropy with per-class weights, normalized by the summed pixel weights.
template <class T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const std::uint8_t> labels, const ClassWeightVector& cw) {
    return detail::cross_entropy_impl<T>(logits, labels, cw, nullptr);
}

/// Median-frequency balancing: w_c = median(freq) / freq_c over present classes; absent classes get 0.
inline ClassWeightVector median_frequency_weights(std::span<const double> freq) {
    std::vector<double> present;
    for (double f : freq) {
        if (!std::isfinite(f) || f < 0) throw PreconditionError("class frequencies must be finite and non-negative");
        if (f > 0) present.push_back(f);
    }
    if (present.empty()) throw DegenerateInputError("median_frequency_weights: all class frequencies are zero");
    std::sort(present.begin(), present.end());
    const std::size_t m = present.size();
    const double median = m % 2 ? present[m / 2] : 0.5 * (present[m / 2 - 1] + present[m / 2]);
    ClassWeightVector out;
    for (double f : freq) out.weights.push_back(f > 0 ? median / f : 0.0);
    return out;
}

inline ClassWeightVector median_frequency_weights(std::span<const std::uint64_t> counts) {
    std::vector<double> f(counts.begin(), counts.end());
    return median_frequency_weights(std::span<const double>(f));
}

// ---------------------------------------------------------------------------------------------
// Differentiable forms. `items` splits the leading axis into independent images: the SMSE scale
// is fitted per item and the result is the mean over items.

namespace detail {

inline std::size_t item_count(const Shape& s, std::size_t items) {
    const std::size_t n = numel(s);
    if (items == 0 || n % items != 0) throw ShapeError("loss: cannot split " + to_string(s) + " into " + std::to_string(items) + " items");
    return n / items;
}

}  // namespace detail

template <class T>
Var<T> mse(const Var<T>& pred, const BasicTensor<T>& target) {
    require_same_shape(pred.value(), target, "mse");
    const double value = mse(pred.value(), target);
    return make_result<T>(BasicTensor<T>({1}, static_cast<T>(value)), {pred}, [target](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.grad_buffer();
        const double k = 2.0 * double(self.grad[0]) / double(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(k * (double(p.value[i]) - double(target[i])));
    });
}

/// Weighted sum gamma_smse * SMSE + gamma_mse * MSE (each item-averaged) as one fused node.
template <class T>
Var<T> combined_loss(const Var<T>& pred, const BasicTensor<T>& target, double gamma_smse, double gamma_mse,
                     std::size_t items = 1, AlphaGradient alpha_mode = AlphaGradient::detached) {
    require_same_shape(pred.value(), target, "combined_loss");
    const std::size_t per = detail::item_count(target.shape(), items);
    std::vector<double> alpha(items), jj(items);
    double smse_acc = 0, mse_acc = 0;
    for (std::size_t it = 0; it < items; ++it) {
        const auto p = pred.value().values().subspan(it * per, per);
        const auto t = target.values().subspan(it * per, per);
        if (gamma_smse != 0.0) {
            alpha[it] = optimal_alpha(p, t);
            smse_acc += smse(p, t);
            for (auto v : p) jj[it] += double(v) * double(v);
        }
        mse_acc += mse(p, t);
    }
    const double value = (gamma_smse * smse_acc + gamma_mse * mse_acc) / double(items);
    return make_result<T>(BasicTensor<T>({1}, static_cast<T>(value)), {pred},
                          [=](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.grad_buffer();
        const double upstream = double(self.grad[0]) / double(items);
        for (std::size_t it = 0; it < items; ++it) {
            const std::size_t off = it * per;
            const double a = alpha[it];
            // dL/dalpha is zero at the optimum; it is evaluated explicitly when differentiating through alpha.
            double dl_dalpha = 0;
            const bool through = alpha_mode == AlphaGradient::through && a > 0.0;  // a bound alpha is constant
            if (gamma_smse != 0.0 && through) {
                for (std::size_t i = 0; i < per; ++i) {
                    const double j = p.value[off + i];
                    dl_dalpha += 2.0 * j * (a * j - double(target[off + i])) / double(per);
                }
            }
            for (std::size_t i = 0; i < per; ++i) {
                const double j = p.value[off + i], t = target[off + i];
                double d = gamma_mse * 2.0 * (j - t) / double(per);
                if (gamma_smse != 0.0) {
                    double ds = 2.0 * a * (a * j - t) / double(per);
                    if (through) ds += dl_dalpha * (t - 2.0 * a * j) / jj[it];
                    d += gamma_smse * ds;
                }
                g[off + i] += static_cast<T>(upstream * d);
            }
        }
    });
}

template <class T>
Var<T> smse(const Var<T>& pred, const BasicTensor<T>& target, std::size_t items = 1,
            AlphaGradient alpha_mode = AlphaGradient::detached) {
    return combined_loss(pred, target, 1.0, 0.0, items, alpha_mode);
}

template <class T>
Var<T> combined_loss(const Var<T>& pred, const BasicTensor<T>& target, const LossWeights& w, std::size_t items = 1,
                     AlphaGradient alpha_mode = AlphaGradient::detached) {
    return combined_loss(pred, target, w.gamma_smse, w.gamma_mse, items, alpha_mode);
}

template <class T>
Var<T> intrinsic_loss(const Var<T>& r, const BasicTensor<T>& r_gt, const Var<T>& s, const BasicTensor<T>& s_gt,
                      const LossWeights& w, std::size_t items = 1, AlphaGradient alpha_mode = AlphaGradient::detached) {
    return ops::add(ops::scale(combined_loss(r, r_gt, w, items, alpha_mode), static_cast<T>(w.gamma_r)),
                    ops::scale(combined_loss(s, s_gt, w, items, alpha_mode), static_cast<T>(w.gamma_s)));
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::uint8_t> labels, const ClassWeightVector& cw) {
    BasicTensor<T> grad;
    const double value = detail::cross_entropy_impl<T>(logits.value(), labels, cw, &grad);
    return make_result<T>(BasicTensor<T>({1}, static_cast<T>(value)), {logits},
                          [grad = std::move(grad)](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * grad[i];
    });
}

/// Joint objective gamma_ce * CE + (gamma_il * intrinsic_scale * w) * IL, with its per-term breakdown.
template <class T>
struct JointLoss {
    Var<T> total;
    double cross_entropy = 0;      // unweighted CE
    double intrinsic = 0;          // unweighted IL
    double weighted_ce = 0;        // gamma_ce * CE
    double weighted_intrinsic = 0; // effective weight * IL
};

template <class T>
JointLoss<T> joint_loss(const Var<T>& logits, std::span<const std::uint8_t> labels, const ClassWeightVector& cw,
                        const Var<T>& r, const BasicTensor<T>& r_gt, const Var<T>& s, const BasicTensor<T>& s_gt,
                        const LossWeights& w, std::size_t items = 1, AlphaGradient alpha_mode = AlphaGradient::detached) {
    Var<T> ce = cross_entropy(logits, labels, cw);
    Var<T> il = intrinsic_loss(r, r_gt, s, s_gt, w, items, alpha_mode);
    JointLoss<T> out;
    out.cross_entropy = ce.value()[0];
    out.intrinsic = il.value()[0];
    Var<T> wce = ops::scale(ce, static_cast<T>(w.gamma_ce));
    Var<T> wil = ops::scale(il, static_cast<T>(w.effective_intrinsic_weight()));
    out.weighted_ce = wce.value()[0];
    out.weighted_intrinsic = wil.value()[0];
    out.total = ops::add(wce, wil);
    return out;
}

/// Value-only breakdown for already computed component losses.
struct JointBreakdown {
    double total = 0;
    double weighted_ce = 0;
    double weighted_intrinsic = 0;
};

inline JointBreakdown joint_loss_value(double ce, double il, const LossWeights& w) {
    JointBreakdown b;
    b.weighted_ce = w.gamma_ce * ce;
    b.weighted_intrinsic = w.effective_intrinsic_weight() * il;
    b.total = b.weighted_ce + b.weighted_intrinsic;
    return b;
}

}  // namespace loss
}  // namespace iseg
