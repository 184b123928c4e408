#pragma once

// Differentiable operations over Tensor. Each op computes its forward value
// and, when recording, pushes one adjoint step onto the active tape.

#include <cstdint>
#include <vector>

#include "lanekit/tensor.hpp"

namespace lanekit {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

// Elementwise / shaping -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& x);
// Strictly inside (0, 1): saturated lanes are nudged off the endpoints.
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor reshape(const Tensor& x, Shape target);

// Linear algebra --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

// Reductions ------------------------------------------------------------------

Tensor sum_over_rows(const Tensor& x); // [n x k] -> [k]
Tensor sum_axis0(const Tensor& x);     // [n x k x c] -> [k x c]
Tensor max_over_rows(const Tensor& x); // [n x k] -> [k], ties to lowest row
Tensor mean_all(const Tensor& x);      // -> scalar

// Broadcasting adds -----------------------------------------------------------

Tensor add_bias_rows(const Tensor& x, const Tensor& b);     // [n x k] + [k]
Tensor add_bias_channels(const Tensor& x, const Tensor& b); // [c x h x w] + [c]

// Layout ----------------------------------------------------------------------

// [c x h x w] -> [(h*w) x c]; pixel p of the output is feature column c.
Tensor chw_to_nc(const Tensor& x);

// Maps / convolution ----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernels, std::size_t stride,
              std::size_t padding);
Tensor channel_gate(const Tensor& x, const Tensor& gains); // [c x h x w] * [c]
Tensor global_avg_pool(const Tensor& x);                   // [c x h x w] -> [c]
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

// Normalization ---------------------------------------------------------------

enum class BatchNormMode { train, infer };

struct BatchNormState {
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;
    double eps = 1e-5;
    double momentum = 0.1;

    static BatchNormState make(std::size_t channels);
};

// x is [n x c]; train mode normalizes by batch statistics (n >= 2) and blends
// them into the running buffers, infer mode reads the running buffers.
Tensor batchnorm(const Tensor& x, BatchNormState& bn, BatchNormMode mode);

// Softmax ---------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x);     // [n x k], max-subtracted
Tensor softmax_pixels(const Tensor& x);   // [k x h x w], over k per pixel

// Losses ----------------------------------------------------------------------

// Mean over pixels of -log p[class]; mask is row-major [h*w] with entries in
// [0, k).
Tensor nll_pixels(const Tensor& probs, const std::vector<std::uint8_t>& mask);

// Mean binary cross entropy on sigmoid(logits); probabilities clamped to
// [1e-7, 1 - 1e-7].
Tensor bce_logits(const Tensor& logits, const std::vector<double>& targets);

// Soft-assignment residual encoding: out[i,k,c] = w_ik * (x[i,c] - d[k,c])
// with w_i = softmax_k(-s_k * ||x_i - d_k||^2). x is [n x c], codewords
// [k x c], smoothing [k] (already positive).
Tensor soft_assign(const Tensor& x, const Tensor& codewords,
                   const Tensor& smoothing);

// Symmetric Chamfer distance between pred rows (x, y) and a fixed point set.
Tensor chamfer(const Tensor& pred, const std::vector<Point2>& target);

} // namespace lanekit
