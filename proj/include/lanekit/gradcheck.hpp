#pragma once

// Central-difference verification of the backward pass.

#include <cstdint>
#include <functional>
#include <vector>

#include "lanekit/tensor.hpp"

namespace lanekit {

// f evaluates a scalar from x's current values; it must be deterministic.
// Returns max over coordinates of |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|).
// Throws NumericError if f is non-finite at any probe.
double gradient_check(const std::function<Tensor()>& f, Tensor& x,
                      double step = 1e-5);

// Same check restricted to a seeded random sample of coordinates per tensor;
// max_coords == 0 means all coordinates. Returns the max error over all
// probed coordinates of all tensors.
double gradient_check_sampled(const std::function<Tensor()>& f,
                              std::vector<Tensor>& xs, double step,
                              std::size_t max_coords, std::uint64_t seed);

} // namespace lanekit
