#pragma once

// Dense row-major double tensor with reverse-mode differentiation through a
// single thread-local tape. Tensor is a cheap handle; clone() makes a deep
// copy. Gradients accumulate into per-tensor buffers during Tape::backward
// and stay there until an optimizer clears them.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lanekit/error.hpp"

namespace lanekit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until the first backward contribution
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);
    static Tensor scalar(double v);

    bool defined() const { return static_cast<bool>(d_); }

    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->values.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

    double* data() { return d_->values.data(); }
    const double* data() const { return d_->values.data(); }
    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }

    double& at(std::size_t i) { return d_->values[i]; }
    double at(std::size_t i) const { return d_->values[i]; }
    double& at(std::size_t i, std::size_t j) {
        return d_->values[i * d_->shape[1] + j];
    }
    double at(std::size_t i, std::size_t j) const {
        return d_->values[i * d_->shape[1] + j];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return d_->values[(i * d_->shape[1] + j) * d_->shape[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return d_->values[(i * d_->shape[1] + j) * d_->shape[2] + k];
    }

    // Value of a one-element tensor.
    double value() const;

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        d_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return d_ && !d_->grad.empty(); }
    // Allocates a zero gradient buffer if absent.
    std::vector<double>& ensure_grad();
    // Gradient buffer; throws Error when no gradient has been accumulated.
    const std::vector<double>& grad() const;
    // Drops the gradient buffer entirely.
    void clear_grad() { d_->grad.clear(); }

    Tensor clone() const; // deep copy, requires_grad off, no grad

    const std::shared_ptr<TensorData>& ptr() const { return d_; }

private:
    std::shared_ptr<TensorData> d_;
};

// Throws NumericError if any element is NaN or infinite.
void check_finite(const Tensor& t, const std::string& what);
void check_finite(double v, const std::string& what);

class Tape {
public:
    // The tape for the current thread.
    static Tape& active();

    bool recording() const { return pause_depth_ == 0; }
    void push(std::function<void()> step) { steps_.push_back(std::move(step)); }
    std::size_t size() const { return steps_.size(); }

    // Seeds d(loss) with `seed`, runs all recorded steps in exact reverse
    // execution order, then clears the tape. `loss` must be one element.
    void backward(const Tensor& loss, double seed = 1.0);

    void clear() { steps_.clear(); }

private:
    friend struct NoGradGuard;
    std::vector<std::function<void()>> steps_;
    int pause_depth_ = 0;
};

// Pauses recording for the current scope.
struct NoGradGuard {
    NoGradGuard() { ++Tape::active().pause_depth_; }
    ~NoGradGuard() { --Tape::active().pause_depth_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// True when the op should be recorded: some input needs a gradient and the
// tape is not paused.
inline bool grad_enabled(const Tensor& t) {
    return t.requires_grad() && Tape::active().recording();
}

} // namespace lanekit
