#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "iseg/error.hpp"
#include "iseg/network.hpp"

namespace iseg {

struct AdadeltaConfig {
    double lr = 0.01;
    double rho = 0.95;
    double eps = 1e-6;
    double weight_decay = 1e-9;
};

/// One Adadelta update in place:
///   E[g^2] <- rho E[g^2] + (1 - rho) g^2
///   d      <- -sqrt(E[d^2] + eps) / sqrt(E[g^2] + eps) * g
///   E[d^2] <- rho E[d^2] + (1 - rho) d^2
///   theta  <- theta + lr * d - lr * weight_decay * theta     (decoupled decay)
template <class T>
void adadelta_step(std::span<T> theta, std::span<const T> grad, std::span<T> acc_grad, std::span<T> acc_update,
                   const AdadeltaConfig& cfg) {
    if (grad.size() != theta.size() || acc_grad.size() != theta.size() || acc_update.size() != theta.size()) {
        throw ShapeError("adadelta_step: parameter, gradient and accumulator sizes differ");
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i];
        const double eg = cfg.rho * double(acc_grad[i]) + (1 - cfg.rho) * g * g;
        const double delta = -std::sqrt(double(acc_update[i]) + cfg.eps) / std::sqrt(eg + cfg.eps) * g;
        const double ed = cfg.rho * double(acc_update[i]) + (1 - cfg.rho) * delta * delta;
        const double t = theta[i];
        theta[i] = static_cast<T>(t + cfg.lr * delta - cfg.lr * cfg.weight_decay * t);
        acc_grad[i] = static_cast<T>(eg);
        acc_update[i] = static_cast<T>(ed);
    }
}

/// Adadelta over a network's trainable parameter groups. Frozen groups are left untouched.
template <class T>
class Adadelta {
   public:
    Adadelta(const Network<T>& net, AdadeltaConfig cfg) : cfg_(cfg) {
        for (const auto& p : net.parameters()) {
            acc_grad_.emplace_back(p.var.shape(), T{0});
            acc_update_.emplace_back(p.var.shape(), T{0});
        }
    }

    /// Applies one update from the accumulated gradients, then clears all gradients.
    void step(Network<T>& net) {
        auto params = net.parameters();
        if (params.size() != acc_grad_.size()) throw ShapeError("Adadelta: parameter list changed");
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (net.trainable(p.group) && p.var.has_grad()) {
                const auto g = p.var.grad();
                adadelta_step<T>(p.var.value().values(), g.values(), acc_grad_[i].values(), acc_update_[i].values(), cfg_);
            }
            p.var.zero_grad();
        }
    }

    const AdadeltaConfig& config() const { return cfg_; }

   private:
    AdadeltaConfig cfg_;
    std::vector<BasicTensor<T>> acc_grad_;
    std::vector<BasicTensor<T>> acc_update_;
};

}  // namespace iseg
