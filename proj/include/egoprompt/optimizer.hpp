#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "egoprompt/tensor.hpp"

namespace egoprompt {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double weight_decay = 0.01;
    double eps = 1e-8;
};

/// Linear warmup from `floor_lr` at step 0 to `lr` at the end of
/// `warmup_epochs`, constant afterward.
inline double lr_at_step(std::uint64_t step, std::uint64_t steps_per_epoch, double lr, double floor_lr,
                         std::uint64_t warmup_epochs) {
    const std::uint64_t warmup_steps = warmup_epochs * steps_per_epoch;
    if (warmup_steps == 0 || step >= warmup_steps) return lr;
    return floor_lr + (lr - floor_lr) * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

/// Decoupled-weight-decay Adam over a fixed parameter group. Moments are kept
/// in double regardless of the storage scalar; updates touch only parameters
/// that currently require gradients.
template <typename S>
class AdamWT {
public:
    AdamWT(std::vector<std::pair<std::string, TensorT<S>>> params, AdamWConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        moments_m_.resize(params_.size());
        moments_v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            moments_m_[i].assign(params_[i].second.size(), 0.0);
            moments_v_[i].assign(params_[i].second.size(), 0.0);
        }
    }

    std::uint64_t step_count() const { return step_; }
    const std::vector<std::pair<std::string, TensorT<S>>>& params() const { return params_; }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    /// One update at learning rate `lr_t`. Throws on non-finite gradients,
    /// naming the offending parameter.
    void step(double lr_t) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& [name, p] = params_[i];
            if (!p.requires_grad()) continue;
            auto& values = p.values_mut();
            auto& m = moments_m_[i];
            auto& v = moments_v_[i];
            const bool has_grad = p.has_grad();
            for (std::size_t j = 0; j < values.size(); ++j) {
                const double g = has_grad ? static_cast<double>(p.grad()[j]) : 0.0;
                if (!std::isfinite(g))
                    throw UsageError("adamw_step: non-finite gradient in '" + name + "' at index " +
                                     std::to_string(j));
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                const double m_hat = m[j] / bc1;
                const double v_hat = v[j] / bc2;
                const double update = m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay *
                                                                                  static_cast<double>(values[j]);
                values[j] = static_cast<S>(static_cast<double>(values[j]) - lr_t * update);
            }
        }
    }

private:
    std::vector<std::pair<std::string, TensorT<S>>> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> moments_m_, moments_v_;
    std::uint64_t step_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace egoprompt
