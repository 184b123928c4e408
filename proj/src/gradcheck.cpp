#include "lanekit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lanekit/rng.hpp"

namespace lanekit {

namespace {

double probe(const std::function<Tensor()>& f) {
    NoGradGuard pause;
    const double v = f().value();
    if (!std::isfinite(v)) {
        throw NumericError("gradient_check: non-finite function value at probe");
    }
    return v;
}

// Analytic gradients for every tensor in xs, via one recorded forward.
void analytic_gradients(const std::function<Tensor()>& f, std::vector<Tensor>& xs) {
    for (Tensor& x : xs) {
        x.set_requires_grad();
        x.clear_grad();
    }
    Tape::active().clear();
    Tensor loss = f();
    if (!std::isfinite(loss.value())) {
        throw NumericError("gradient_check: non-finite function value");
    }
    Tape::active().backward(loss);
    for (Tensor& x : xs) {
        x.ensure_grad();
    }
}

double check_coord(const std::function<Tensor()>& f, Tensor& x, std::size_t i,
                   double g_ad, double step) {
    const double saved = x.at(i);
    x.at(i) = saved + step;
    const double up = probe(f);
    x.at(i) = saved - step;
    const double down = probe(f);
    x.at(i) = saved;
    const double g_fd = (up - down) / (2.0 * step);
    return std::abs(g_ad - g_fd) /
           std::max(1e-12, std::abs(g_ad) + std::abs(g_fd));
}

} // namespace

double gradient_check(const std::function<Tensor()>& f, Tensor& x, double step) {
    if (step <= 0.0) {
        throw Error("gradient_check: step must be positive");
    }
    std::vector<Tensor> xs{x};
    analytic_gradients(f, xs);
    const std::vector<double> g_ad = x.grad();
    x.clear_grad();
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        worst = std::max(worst, check_coord(f, x, i, g_ad[i], step));
    }
    return worst;
}

double gradient_check_sampled(const std::function<Tensor()>& f,
                              std::vector<Tensor>& xs, double step,
                              std::size_t max_coords, std::uint64_t seed) {
    if (step <= 0.0) {
        throw Error("gradient_check: step must be positive");
    }
    analytic_gradients(f, xs);
    std::vector<std::vector<double>> grads;
    grads.reserve(xs.size());
    for (Tensor& x : xs) {
        grads.push_back(x.grad());
        x.clear_grad();
    }
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        Tensor& x = xs[t];
        std::vector<std::size_t> coords(x.size());
        for (std::size_t i = 0; i < coords.size(); ++i) {
            coords[i] = i;
        }
        if (max_coords > 0 && coords.size() > max_coords) {
            rng.shuffle(coords);
            coords.resize(max_coords);
        }
        for (std::size_t i : coords) {
            worst = std::max(worst, check_coord(f, x, i, grads[t][i], step));
        }
    }
    return worst;
}

} // namespace lanekit
