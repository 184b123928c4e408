#include "lanekit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace lanekit {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) {
            out << " x ";
        }
        out << s[i];
    }
    out << "]";
    return out.str();
}

Tensor::Tensor(Shape shape, double fill) : d_(std::make_shared<TensorData>()) {
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive, got " +
                             shape_str(shape));
        }
    }
    d_->shape = std::move(shape);
    d_->values.assign(shape_numel(d_->shape), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : d_(std::make_shared<TensorData>()) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_str(shape) + " expects " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    d_->shape = std::move(shape);
    d_->values = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

double Tensor::value() const {
    if (size() != 1) {
        throw ShapeError("value() requires a one-element tensor, got " +
                         shape_str(shape()));
    }
    return d_->values[0];
}

std::vector<double>& Tensor::ensure_grad() {
    if (d_->grad.empty()) {
        d_->grad.assign(d_->values.size(), 0.0);
    }
    return d_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (d_->grad.empty()) {
        throw Error("tensor has no accumulated gradient");
    }
    return d_->grad;
}

Tensor Tensor::clone() const {
    Tensor copy;
    copy.d_ = std::make_shared<TensorData>();
    copy.d_->shape = d_->shape;
    copy.d_->values = d_->values;
    return copy;
}

void check_finite(const Tensor& t, const std::string& what) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite value in " + what);
        }
    }
}

void check_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) {
        throw NumericError("non-finite value in " + what);
    }
}

Tape& Tape::active() {
    thread_local Tape tape;
    return tape;
}

void Tape::backward(const Tensor& loss, double seed) {
    if (loss.size() != 1) {
        throw ShapeError("backward() expects a scalar loss, got " +
                         shape_str(loss.shape()));
    }
    loss.ptr()->grad.assign(1, 0.0);
    loss.ptr()->grad[0] += seed;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        (*it)();
    }
    clear();
}

} // namespace lanekit
