#include "flankid/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace flankid {

Adam::Adam(std::vector<nn::Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto* p : params_) {
        m_.emplace_back(p->value.size(), 0.0f);
        v_.emplace_back(p->value.size(), 0.0f);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const float step_size = static_cast<float>(lr_ / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_), eps = static_cast<float>(eps_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& value = params_[k]->value.values();
        const auto& grad = params_[k]->grad.values();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < value.size(); ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0f - b2) * grad[i] * grad[i];
            value[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->grad.fill(0.0f);
}

PlateauScheduler::PlateauScheduler(double factor, int patience, double min_lr)
    : factor_(factor), patience_(patience), min_lr_(min_lr), best_(-std::numeric_limits<double>::infinity()) {}

double PlateauScheduler::observe(double metric, double current_lr) {
    if (metric > best_) {
        best_ = metric;
        stale_ = 0;
        return current_lr;
    }
    if (++stale_ >= patience_) {
        stale_ = 0;
        return std::max(min_lr_, current_lr * factor_);
    }
    return current_lr;
}

}  // namespace flankid
