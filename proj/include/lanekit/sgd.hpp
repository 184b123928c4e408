#pragma once

// SGD with classical momentum: v <- momentum*v + g; p <- p - lr*v.

#include <string>
#include <vector>

#include "lanekit/tensor.hpp"

namespace lanekit {

class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

    void add_param(std::string name, Tensor param);

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

    // One update over all registered parameters; clears their gradients.
    // Throws Error naming the first parameter without an accumulated gradient.
    void step();

    void zero_grad();

    std::size_t param_count() const { return params_.size(); }

private:
    struct Entry {
        std::string name;
        Tensor param;
        std::vector<double> velocity;
    };
    double lr_;
    double momentum_;
    std::vector<Entry> params_;
};

// Learning rate after the halving schedule: lr0 / 2^floor((epoch-1)/period),
// epoch is 1-based.
double scheduled_lr(double lr0, std::size_t epoch, std::size_t halve_every);

} // namespace lanekit
