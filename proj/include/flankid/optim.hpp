#pragma once

#include <vector>

#include "flankid/nn.hpp"

namespace flankid {

// Adaptive-moment optimizer with bias correction.
class Adam {
public:
    explicit Adam(std::vector<nn::Parameter*> params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);

    void step();
    void zero_grad();
    double lr() const noexcept { return lr_; }
    void set_lr(double lr) noexcept { lr_ = lr; }
    long steps() const noexcept { return t_; }

private:
    std::vector<nn::Parameter*> params_;
    std::vector<std::vector<float>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

// Multiplies the learning rate by `factor` after `patience` epochs without an
// improvement of the monitored (higher-is-better) metric.
class PlateauScheduler {
public:
    PlateauScheduler(double factor = 0.5, int patience = 5, double min_lr = 1e-6);

    // Returns the learning rate to use for the next epoch.
    double observe(double metric, double current_lr);
    double best() const noexcept { return best_; }

private:
    double factor_;
    int patience_;
    double min_lr_;
    double best_;
    int stale_ = 0;
};

}  // namespace flankid
