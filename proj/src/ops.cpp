#include "lanekit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "lanekit/kernels.hpp"

namespace lanekit {

namespace {

using Data = std::shared_ptr<TensorData>;

bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active().recording()) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

// Gradient buffer of an output node; nullptr means no downstream contribution.
const std::vector<double>* out_grad(const Data& d) {
    return d->grad.empty() ? nullptr : &d->grad;
}

std::vector<double>& accum(const Data& d) {
    if (d->grad.empty()) {
        d->grad.assign(d->values.size(), 0.0);
    }
    return d->grad;
}

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

double stable_sigmoid(double v) {
    double y;
    if (v >= 0.0) {
        y = 1.0 / (1.0 + std::exp(-v));
    } else {
        const double e = std::exp(v);
        y = e / (1.0 + e);
    }
    // Keep the range open; saturated values land on the nearest interior
    // representable instead of exactly 0 or 1.
    const double hi = std::nextafter(1.0, 0.0);
    const double lo = std::numeric_limits<double>::min();
    return std::min(std::max(y, lo), hi);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    kernels::table().add(a.size(), a.data(), b.data(), out.data());
    const bool track = want_grad({&a, &b});
    out.set_requires_grad(track);
    if (track) {
        Data ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::active().push([ad, bd, od] {
            const auto* g = out_grad(od);
            if (!g) return;
            if (ad->requires_grad) {
                kernels::table().axpy(g->size(), 1.0, g->data(), accum(ad).data());
            }
            if (bd->requires_grad) {
                kernels::table().axpy(g->size(), 1.0, g->data(), accum(bd).data());
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.at(i) = a.at(i) - b.at(i);
    }
    const bool track = want_grad({&a, &b});
    out.set_requires_grad(track);
    if (track) {
        Data ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::active().push([ad, bd, od] {
            const auto* g = out_grad(od);
            if (!g) return;
            if (ad->requires_grad) {
                kernels::table().axpy(g->size(), 1.0, g->data(), accum(ad).data());
            }
            if (bd->requires_grad) {
                kernels::table().axpy(g->size(), -1.0, g->data(), accum(bd).data());
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    kernels::table().mul(a.size(), a.data(), b.data(), out.data());
    const bool track = want_grad({&a, &b});
    out.set_requires_grad(track);
    if (track) {
        Data ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::active().push([ad, bd, od] {
            const auto* g = out_grad(od);
            if (!g) return;
            if (ad->requires_grad) {
                auto& da = accum(ad);
                for (std::size_t i = 0; i < g->size(); ++i) {
                    da[i] += (*g)[i] * bd->values[i];
                }
            }
            if (bd->requires_grad) {
                auto& db = accum(bd);
                for (std::size_t i = 0; i < g->size(); ++i) {
                    db[i] += (*g)[i] * ad->values[i];
                }
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    kernels::table().scale_copy(a.size(), s, a.data(), out.data());
    const bool track = want_grad({&a});
    out.set_requires_grad(track);
    if (track) {
        Data ad = a.ptr(), od = out.ptr();
        Tape::active().push([ad, od, s] {
            const auto* g = out_grad(od);
            if (!g) return;
            kernels::table().axpy(g->size(), s, g->data(), accum(ad).data());
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    kernels::table().relu(x.size(), x.data(), out.data());
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od] {
            const auto* g = out_grad(od);
            if (!g) return;
            kernels::table().relu_backward(g->size(), xd->values.data(), g->data(),
                                           accum(xd).data());
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.at(i) = stable_sigmoid(x.at(i));
    }
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            for (std::size_t i = 0; i < g->size(); ++i) {
                const double y = od->values[i];
                dx[i] += (*g)[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

Tensor softplus(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.at(i);
        out.at(i) = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            for (std::size_t i = 0; i < g->size(); ++i) {
                dx[i] += (*g)[i] * stable_sigmoid(xd->values[i]);
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape target) {
    if (shape_numel(target) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(target));
    }
    Tensor out(std::move(target), x.values());
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od] {
            const auto* g = out_grad(od);
            if (!g) return;
            kernels::table().axpy(g->size(), 1.0, g->data(), accum(xd).data());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    kernels::table().matmul(m, k, n, a.data(), b.data(), out.data());
    const bool track = want_grad({&a, &b});
    out.set_requires_grad(track);
    if (track) {
        Data ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::active().push([ad, bd, od, m, k, n] {
            const auto* g = out_grad(od);
            if (!g) return;
            const auto& kt = kernels::table();
            if (ad->requires_grad) {
                // da += dy * b^T
                std::vector<double> bt(k * n);
                transpose(k, n, bd->values.data(), bt.data());
                std::vector<double> tmp(m * k);
                kt.matmul(m, n, k, g->data(), bt.data(), tmp.data());
                kt.axpy(tmp.size(), 1.0, tmp.data(), accum(ad).data());
            }
            if (bd->requires_grad) {
                // db += a^T * dy
                std::vector<double> at(m * k);
                transpose(m, k, ad->values.data(), at.data());
                std::vector<double> tmp(k * n);
                kt.matmul(k, m, n, at.data(), g->data(), tmp.data());
                kt.axpy(tmp.size(), 1.0, tmp.data(), accum(bd).data());
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum_over_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("sum_over_rows expects a matrix, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor out(Shape{k});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            out.at(j) += x.at(i, j);
        }
    }
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od, n, k] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    dx[i * k + j] += (*g)[j];
                }
            }
        });
    }
    return out;
}

Tensor sum_axis0(const Tensor& x) {
    if (x.rank() != 3) {
        throw ShapeError("sum_axis0 expects a rank-3 tensor, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), k = x.dim(1), c = x.dim(2);
    Tensor out(Shape{k, c});
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data() + i * k * c;
        for (std::size_t j = 0; j < k * c; ++j) {
            out.at(j) += row[j];
        }
    }
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od, n, k, c] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            for (std::size_t i = 0; i < n; ++i) {
                kernels::table().axpy(k * c, 1.0, g->data(), dx.data() + i * k * c);
            }
        });
    }
    return out;
}

Tensor max_over_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("max_over_rows expects a matrix, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor out(Shape{k});
    auto arg = std::make_shared<std::vector<std::size_t>>(k, 0);
    for (std::size_t j = 0; j < k; ++j) {
        double best = x.at(0, j);
        std::size_t best_i = 0;
        for (std::size_t i = 1; i < n; ++i) {
            if (x.at(i, j) > best) {
                best = x.at(i, j);
                best_i = i;
            }
        }
        out.at(j) = best;
        (*arg)[j] = best_i;
    }
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od, arg, k] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            for (std::size_t j = 0; j < k; ++j) {
                dx[(*arg)[j] * k + j] += (*g)[j];
            }
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        s += x.at(i);
    }
    Tensor out = Tensor::scalar(s / static_cast<double>(x.size()));
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        const double inv = 1.0 / static_cast<double>(x.size());
        Tape::active().push([xd, od, inv] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            const double gv = (*g)[0] * inv;
            for (double& v : dx) {
                v += gv;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Broadcasting adds

Tensor add_bias_rows(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.size() != x.dim(1)) {
        throw ShapeError("add_bias_rows: " + shape_str(x.shape()) + " with bias " +
                         shape_str(b.shape()));
    }
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        kernels::table().add(k, x.data() + i * k, b.data(), out.data() + i * k);
    }
    const bool track = want_grad({&x, &b});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::active().push([xd, bd, od, n, k] {
            const auto* g = out_grad(od);
            if (!g) return;
            if (xd->requires_grad) {
                kernels::table().axpy(g->size(), 1.0, g->data(), accum(xd).data());
            }
            if (bd->requires_grad) {
                auto& db = accum(bd);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        db[j] += (*g)[i * k + j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor add_bias_channels(const Tensor& x, const Tensor& b) {
    if (x.rank() != 3 || b.size() != x.dim(0)) {
        throw ShapeError("add_bias_channels: " + shape_str(x.shape()) + " with bias " +
                         shape_str(b.shape()));
    }
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    Tensor out(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double bias = b.at(ch);
        const double* src = x.data() + ch * plane;
        double* dst = out.data() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            dst[i] = src[i] + bias;
        }
    }
    const bool track = want_grad({&x, &b});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::active().push([xd, bd, od, c, plane] {
            const auto* g = out_grad(od);
            if (!g) return;
            if (xd->requires_grad) {
                kernels::table().axpy(g->size(), 1.0, g->data(), accum(xd).data());
            }
            if (bd->requires_grad) {
                auto& db = accum(bd);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) {
                        s += (*g)[ch * plane + i];
                    }
                    db[ch] += s;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layout

Tensor chw_to_nc(const Tensor& x) {
    if (x.rank() != 3) {
        throw ShapeError("chw_to_nc expects a rank-3 tensor, got " + shape_str(x.shape()));
    }
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    Tensor out(Shape{plane, c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < plane; ++p) {
            out.at(p, ch) = x.at(ch * plane + p);
        }
    }
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od, c, plane] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t p = 0; p < plane; ++p) {
                    dx[ch * plane + p] += (*g)[p * c + ch];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) via im2col + matmul

namespace {

struct ConvDims {
    std::size_t in_c, in_h, in_w;
    std::size_t out_c, kh, kw;
    std::size_t stride, pad;
    std::size_t out_h, out_w;
};

void im2col(const ConvDims& d, const double* x, double* cols) {
    const std::size_t out_plane = d.out_h * d.out_w;
    for (std::size_t c = 0; c < d.in_c; ++c) {
        for (std::size_t ki = 0; ki < d.kh; ++ki) {
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                double* row = cols + ((c * d.kh + ki) * d.kw + kj) * out_plane;
                for (std::size_t oh = 0; oh < d.out_h; ++oh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * d.stride + ki) -
                        static_cast<std::ptrdiff_t>(d.pad);
                    for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * d.stride + kj) -
                            static_cast<std::ptrdiff_t>(d.pad);
                        double v = 0.0;
                        if (ih >= 0 && ih < static_cast<std::ptrdiff_t>(d.in_h) &&
                            iw >= 0 && iw < static_cast<std::ptrdiff_t>(d.in_w)) {
                            v = x[(c * d.in_h + ih) * d.in_w + iw];
                        }
                        row[oh * d.out_w + ow] = v;
                    }
                }
            }
        }
    }
}

void col2im_accum(const ConvDims& d, const double* cols, double* dx) {
    const std::size_t out_plane = d.out_h * d.out_w;
    for (std::size_t c = 0; c < d.in_c; ++c) {
        for (std::size_t ki = 0; ki < d.kh; ++ki) {
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                const double* row = cols + ((c * d.kh + ki) * d.kw + kj) * out_plane;
                for (std::size_t oh = 0; oh < d.out_h; ++oh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * d.stride + ki) -
                        static_cast<std::ptrdiff_t>(d.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.in_h)) {
                        continue;
                    }
                    for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * d.stride + kj) -
                            static_cast<std::ptrdiff_t>(d.pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.in_w)) {
                            continue;
                        }
                        dx[(c * d.in_h + ih) * d.in_w + iw] += row[oh * d.out_w + ow];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels_t, std::size_t stride,
              std::size_t padding) {
    if (x.rank() != 3 || kernels_t.rank() != 4) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " with kernels " +
                         shape_str(kernels_t.shape()));
    }
    if (stride == 0) {
        throw ShapeError("conv2d: stride must be positive");
    }
    ConvDims d;
    d.in_c = x.dim(0);
    d.in_h = x.dim(1);
    d.in_w = x.dim(2);
    d.out_c = kernels_t.dim(0);
    d.kh = kernels_t.dim(2);
    d.kw = kernels_t.dim(3);
    d.stride = stride;
    d.pad = padding;
    if (kernels_t.dim(1) != d.in_c) {
        throw ShapeError("conv2d: kernel channels " + shape_str(kernels_t.shape()) +
                         " disagree with input " + shape_str(x.shape()));
    }
    const std::size_t padded_h = d.in_h + 2 * padding;
    const std::size_t padded_w = d.in_w + 2 * padding;
    if (d.kh > padded_h || d.kw > padded_w) {
        throw ShapeError("conv2d: kernel " + shape_str(kernels_t.shape()) +
                         " exceeds padded input " + shape_str(x.shape()));
    }
    d.out_h = (padded_h - d.kh) / stride + 1;
    d.out_w = (padded_w - d.kw) / stride + 1;

    const std::size_t patch = d.in_c * d.kh * d.kw;
    const std::size_t out_plane = d.out_h * d.out_w;
    auto cols = std::make_shared<std::vector<double>>(patch * out_plane);
    im2col(d, x.data(), cols->data());

    Tensor out(Shape{d.out_c, d.out_h, d.out_w});
    // Kernel tensor viewed row-major is exactly the [out_c x patch] matrix.
    kernels::table().matmul(d.out_c, patch, out_plane, kernels_t.data(),
                            cols->data(), out.data());

    const bool track = want_grad({&x, &kernels_t});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), kd = kernels_t.ptr(), od = out.ptr();
        Tape::active().push([xd, kd, od, cols, d, patch, out_plane] {
            const auto* g = out_grad(od);
            if (!g) return;
            const auto& kt = kernels::table();
            if (kd->requires_grad) {
                // dW += dOut * cols^T
                std::vector<double> cols_t(out_plane * patch);
                transpose(patch, out_plane, cols->data(), cols_t.data());
                std::vector<double> tmp(d.out_c * patch);
                kt.matmul(d.out_c, out_plane, patch, g->data(), cols_t.data(),
                          tmp.data());
                kt.axpy(tmp.size(), 1.0, tmp.data(), accum(kd).data());
            }
            if (xd->requires_grad) {
                // dCols = W^T * dOut, scattered back through the patch map.
                std::vector<double> w_t(patch * d.out_c);
                transpose(d.out_c, patch, kd->values.data(), w_t.data());
                std::vector<double> dcols(patch * out_plane);
                kt.matmul(patch, d.out_c, out_plane, w_t.data(), g->data(),
                          dcols.data());
                col2im_accum(d, dcols.data(), accum(xd).data());
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel gating / pooling / upsampling

Tensor channel_gate(const Tensor& x, const Tensor& gains) {
    if (x.rank() != 3 || gains.size() != x.dim(0)) {
        throw ShapeError("channel_gate: feature " + shape_str(x.shape()) +
                         " with gains " + shape_str(gains.shape()));
    }
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    Tensor out(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        kernels::table().scale_copy(plane, gains.at(ch), x.data() + ch * plane,
                                    out.data() + ch * plane);
    }
    const bool track = want_grad({&x, &gains});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), ad = gains.ptr(), od = out.ptr();
        Tape::active().push([xd, ad, od, c, plane] {
            const auto* g = out_grad(od);
            if (!g) return;
            if (xd->requires_grad) {
                auto& dx = accum(xd);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    kernels::table().axpy(plane, ad->values[ch], g->data() + ch * plane,
                                          dx.data() + ch * plane);
                }
            }
            if (ad->requires_grad) {
                auto& da = accum(ad);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    const double* gp = g->data() + ch * plane;
                    const double* xp = xd->values.data() + ch * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        s += gp[i] * xp[i];
                    }
                    da[ch] += s;
                }
            }
        });
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3) {
        throw ShapeError("global_avg_pool expects a rank-3 tensor, got " +
                         shape_str(x.shape()));
    }
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    const double inv = 1.0 / static_cast<double>(plane);
    Tensor out(Shape{c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        const double* src = x.data() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            s += src[i];
        }
        out.at(ch) = s * inv;
    }
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od, c, plane, inv] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double gv = (*g)[ch] * inv;
                double* dst = dx.data() + ch * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    dst[i] += gv;
                }
            }
        });
    }
    return out;
}

namespace {

struct LerpAxis {
    std::vector<std::size_t> lo, hi;
    std::vector<double> w; // weight of hi
};

LerpAxis lerp_axis(std::size_t in_n, std::size_t out_n) {
    LerpAxis ax;
    ax.lo.resize(out_n);
    ax.hi.resize(out_n);
    ax.w.resize(out_n);
    const double sc = out_n > 1
                          ? static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1)
                          : 0.0;
    for (std::size_t o = 0; o < out_n; ++o) {
        const double f = static_cast<double>(o) * sc;
        std::size_t lo = static_cast<std::size_t>(f);
        if (lo >= in_n - 1 && in_n > 1) {
            lo = in_n - 2;
        }
        const std::size_t hi = in_n > 1 ? lo + 1 : 0;
        ax.lo[o] = lo;
        ax.hi[o] = hi;
        ax.w[o] = in_n > 1 ? f - static_cast<double>(lo) : 0.0;
    }
    return ax;
}

} // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 3) {
        throw ShapeError("upsample_bilinear expects a rank-3 tensor, got " +
                         shape_str(x.shape()));
    }
    if (out_h == 0 || out_w == 0) {
        throw ShapeError("upsample_bilinear: output dims must be positive");
    }
    const std::size_t c = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
    const LerpAxis rows = lerp_axis(in_h, out_h);
    const LerpAxis cols = lerp_axis(in_w, out_w);
    Tensor out(Shape{c, out_h, out_w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = x.data() + ch * in_h * in_w;
        double* dst = out.data() + ch * out_h * out_w;
        for (std::size_t r = 0; r < out_h; ++r) {
            const double wr = rows.w[r];
            const double* r0 = src + rows.lo[r] * in_w;
            const double* r1 = src + rows.hi[r] * in_w;
            for (std::size_t cc = 0; cc < out_w; ++cc) {
                const double wc = cols.w[cc];
                const double top = r0[cols.lo[cc]] * (1.0 - wc) + r0[cols.hi[cc]] * wc;
                const double bot = r1[cols.lo[cc]] * (1.0 - wc) + r1[cols.hi[cc]] * wc;
                dst[r * out_w + cc] = top * (1.0 - wr) + bot * wr;
            }
        }
    }
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        auto rb = std::make_shared<LerpAxis>(rows);
        auto cb = std::make_shared<LerpAxis>(cols);
        Tape::active().push([xd, od, rb, cb, c, in_h, in_w, out_h, out_w] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dx = accum(xd);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* gp = g->data() + ch * out_h * out_w;
                double* dst = dx.data() + ch * in_h * in_w;
                for (std::size_t r = 0; r < out_h; ++r) {
                    const double wr = rb->w[r];
                    for (std::size_t cc = 0; cc < out_w; ++cc) {
                        const double wc = cb->w[cc];
                        const double gv = gp[r * out_w + cc];
                        dst[rb->lo[r] * in_w + cb->lo[cc]] += gv * (1.0 - wr) * (1.0 - wc);
                        dst[rb->lo[r] * in_w + cb->hi[cc]] += gv * (1.0 - wr) * wc;
                        dst[rb->hi[r] * in_w + cb->lo[cc]] += gv * wr * (1.0 - wc);
                        dst[rb->hi[r] * in_w + cb->hi[cc]] += gv * wr * wc;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

BatchNormState BatchNormState::make(std::size_t channels) {
    BatchNormState bn;
    bn.gamma = Tensor(Shape{channels}, 1.0);
    bn.gamma.set_requires_grad();
    bn.beta = Tensor(Shape{channels}, 0.0);
    bn.beta.set_requires_grad();
    bn.running_mean = Tensor(Shape{channels}, 0.0);
    bn.running_var = Tensor(Shape{channels}, 1.0);
    return bn;
}

Tensor batchnorm(const Tensor& x, BatchNormState& bn, BatchNormMode mode) {
    if (x.rank() != 2 || x.dim(1) != bn.gamma.size()) {
        throw ShapeError("batchnorm: input " + shape_str(x.shape()) + " with " +
                         std::to_string(bn.gamma.size()) + " channels");
    }
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (mode == BatchNormMode::train && n < 2) {
        throw Error("batchnorm: train mode requires a batch of at least 2 rows, got " +
                    std::to_string(n));
    }

    Tensor out(x.shape());
    auto mean = std::make_shared<std::vector<double>>(c, 0.0);
    auto invstd = std::make_shared<std::vector<double>>(c, 0.0);

    if (mode == BatchNormMode::train) {
        std::vector<double> var(c, 0.0);
        for (std::size_t j = 0; j < c; ++j) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                m += x.at(i, j);
            }
            m /= static_cast<double>(n);
            double v = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = x.at(i, j) - m;
                v += d * d;
            }
            v /= static_cast<double>(n);
            (*mean)[j] = m;
            var[j] = v;
            (*invstd)[j] = 1.0 / std::sqrt(v + bn.eps);
            bn.running_mean.at(j) =
                (1.0 - bn.momentum) * bn.running_mean.at(j) + bn.momentum * m;
            bn.running_var.at(j) =
                (1.0 - bn.momentum) * bn.running_var.at(j) + bn.momentum * v;
        }
    } else {
        for (std::size_t j = 0; j < c; ++j) {
            (*mean)[j] = bn.running_mean.at(j);
            (*invstd)[j] = 1.0 / std::sqrt(bn.running_var.at(j) + bn.eps);
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double xhat = (x.at(i, j) - (*mean)[j]) * (*invstd)[j];
            out.at(i, j) = bn.gamma.at(j) * xhat + bn.beta.at(j);
        }
    }

    const bool track = want_grad({&x, &bn.gamma, &bn.beta});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), gd = bn.gamma.ptr(), bd = bn.beta.ptr(), od = out.ptr();
        const bool train = mode == BatchNormMode::train;
        Tape::active().push([xd, gd, bd, od, mean, invstd, n, c, train] {
            const auto* g = out_grad(od);
            if (!g) return;
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < c; ++j) {
                const double mu = (*mean)[j];
                const double is = (*invstd)[j];
                const double gamma = gd->values[j];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double dy = (*g)[i * c + j];
                    const double xhat = (xd->values[i * c + j] - mu) * is;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                if (gd->requires_grad) {
                    accum(gd)[j] += sum_dy_xhat;
                }
                if (bd->requires_grad) {
                    accum(bd)[j] += sum_dy;
                }
                if (xd->requires_grad) {
                    auto& dx = accum(xd);
                    if (train) {
                        // dx = gamma*is/n * (n*dy - sum_dy - xhat*sum_dy_xhat)
                        for (std::size_t i = 0; i < n; ++i) {
                            const double dy = (*g)[i * c + j];
                            const double xhat = (xd->values[i * c + j] - mu) * is;
                            dx[i * c + j] += gamma * is * inv_n *
                                             (static_cast<double>(n) * dy - sum_dy -
                                              xhat * sum_dy_xhat);
                        }
                    } else {
                        for (std::size_t i = 0; i < n; ++i) {
                            dx[i * c + j] += (*g)[i * c + j] * gamma * is;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax

namespace {

// Shared softmax core over strided lanes: for each of `groups` index sets
// {base + t*stride : t in [0, k)} the values are max-shifted and normalized.
void softmax_lanes(const double* x, double* p, std::size_t groups,
                   std::size_t k, std::size_t stride,
                   const std::vector<std::size_t>& bases) {
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
        const std::size_t base = bases[gidx];
        double mx = x[base];
        for (std::size_t t = 1; t < k; ++t) {
            mx = std::max(mx, x[base + t * stride]);
        }
        double sum = 0.0;
        for (std::size_t t = 0; t < k; ++t) {
            const double e = std::exp(x[base + t * stride] - mx);
            p[base + t * stride] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t t = 0; t < k; ++t) {
            p[base + t * stride] *= inv;
        }
    }
}

void softmax_lanes_backward(const double* p, const double* g, double* dx,
                            std::size_t groups, std::size_t k, std::size_t stride,
                            const std::vector<std::size_t>& bases) {
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
        const std::size_t base = bases[gidx];
        double dot = 0.0;
        for (std::size_t t = 0; t < k; ++t) {
            dot += g[base + t * stride] * p[base + t * stride];
        }
        for (std::size_t t = 0; t < k; ++t) {
            const std::size_t idx = base + t * stride;
            dx[idx] += p[idx] * (g[idx] - dot);
        }
    }
}

} // namespace

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("softmax_rows expects a matrix, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), k = x.dim(1);
    auto bases = std::make_shared<std::vector<std::size_t>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        (*bases)[i] = i * k;
    }
    Tensor out(x.shape());
    softmax_lanes(x.data(), out.data(), n, k, 1, *bases);
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od, bases, n, k] {
            const auto* g = out_grad(od);
            if (!g) return;
            softmax_lanes_backward(od->values.data(), g->data(), accum(xd).data(),
                                   n, k, 1, *bases);
        });
    }
    return out;
}

Tensor softmax_pixels(const Tensor& x) {
    if (x.rank() != 3) {
        throw ShapeError("softmax_pixels expects a rank-3 tensor, got " +
                         shape_str(x.shape()));
    }
    const std::size_t k = x.dim(0), plane = x.dim(1) * x.dim(2);
    auto bases = std::make_shared<std::vector<std::size_t>>(plane);
    for (std::size_t p = 0; p < plane; ++p) {
        (*bases)[p] = p;
    }
    Tensor out(x.shape());
    softmax_lanes(x.data(), out.data(), plane, k, plane, *bases);
    const bool track = want_grad({&x});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), od = out.ptr();
        Tape::active().push([xd, od, bases, k, plane] {
            const auto* g = out_grad(od);
            if (!g) return;
            softmax_lanes_backward(od->values.data(), g->data(), accum(xd).data(),
                                   plane, k, plane, *bases);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

Tensor nll_pixels(const Tensor& probs, const std::vector<std::uint8_t>& mask) {
    if (probs.rank() != 3) {
        throw ShapeError("nll_pixels expects a rank-3 tensor, got " +
                         shape_str(probs.shape()));
    }
    const std::size_t k = probs.dim(0), plane = probs.dim(1) * probs.dim(2);
    if (mask.size() != plane) {
        throw ShapeError("nll_pixels: mask has " + std::to_string(mask.size()) +
                         " entries for " + std::to_string(plane) + " pixels");
    }
    constexpr double kFloor = 1e-300;
    double loss = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
        if (mask[p] >= k) {
            throw Error("nll_pixels: mask class " + std::to_string(mask[p]) +
                        " outside " + std::to_string(k) + " classes");
        }
        loss -= std::log(std::max(probs.at(mask[p] * plane + p), kFloor));
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(plane));
    const bool track = want_grad({&probs});
    out.set_requires_grad(track);
    if (track) {
        Data pd = probs.ptr(), od = out.ptr();
        auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
        Tape::active().push([pd, od, m, plane] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dp = accum(pd);
            const double gv = (*g)[0] / static_cast<double>(plane);
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t idx = (*m)[p] * plane + p;
                const double pv = pd->values[idx];
                if (pv > kFloor) {
                    dp[idx] -= gv / pv;
                }
            }
        });
    }
    return out;
}

Tensor bce_logits(const Tensor& logits, const std::vector<double>& targets) {
    if (logits.size() != targets.size()) {
        throw ShapeError("bce_logits: " + std::to_string(logits.size()) +
                         " logits for " + std::to_string(targets.size()) + " targets");
    }
    constexpr double kClamp = 1e-7;
    const std::size_t m = logits.size();
    double loss = 0.0;
    std::vector<double> probs(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double p = std::clamp(stable_sigmoid(logits.at(i)), kClamp, 1.0 - kClamp);
        probs[i] = p;
        loss -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(m));
    const bool track = want_grad({&logits});
    out.set_requires_grad(track);
    if (track) {
        Data ld = logits.ptr(), od = out.ptr();
        auto t = std::make_shared<std::vector<double>>(targets);
        Tape::active().push([ld, od, t, m] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dl = accum(ld);
            const double gv = (*g)[0] / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) {
                const double raw = stable_sigmoid(ld->values[i]);
                if (raw > kClamp && raw < 1.0 - kClamp) {
                    dl[i] += gv * (raw - (*t)[i]);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Soft-assignment residual encoding

Tensor soft_assign(const Tensor& x, const Tensor& codewords, const Tensor& smoothing) {
    if (x.rank() != 2 || codewords.rank() != 2 || x.dim(1) != codewords.dim(1)) {
        throw ShapeError("soft_assign: features " + shape_str(x.shape()) +
                         " with codewords " + shape_str(codewords.shape()) +
                         " (feature dims must match)");
    }
    const std::size_t n = x.dim(0), c = x.dim(1), k = codewords.dim(0);
    if (smoothing.size() != k) {
        throw ShapeError("soft_assign: " + std::to_string(smoothing.size()) +
                         " smoothing factors for " + std::to_string(k) + " codewords");
    }

    auto weights = std::make_shared<std::vector<double>>(n * k);
    Tensor out(Shape{n, k, c});
    std::vector<double> scaled(k);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t kk = 0; kk < k; ++kk) {
            double d2 = 0.0;
            for (std::size_t cc = 0; cc < c; ++cc) {
                const double r = x.at(i, cc) - codewords.at(kk, cc);
                d2 += r * r;
            }
            scaled[kk] = -smoothing.at(kk) * d2;
            mx = std::max(mx, scaled[kk]);
        }
        double sum = 0.0;
        for (std::size_t kk = 0; kk < k; ++kk) {
            scaled[kk] = std::exp(scaled[kk] - mx);
            sum += scaled[kk];
        }
        const double inv = 1.0 / sum;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double w = scaled[kk] * inv;
            (*weights)[i * k + kk] = w;
            for (std::size_t cc = 0; cc < c; ++cc) {
                out.at(i, kk, cc) = w * (x.at(i, cc) - codewords.at(kk, cc));
            }
        }
    }

    const bool track = want_grad({&x, &codewords, &smoothing});
    out.set_requires_grad(track);
    if (track) {
        Data xd = x.ptr(), dd = codewords.ptr(), sd = smoothing.ptr(), od = out.ptr();
        Tape::active().push([xd, dd, sd, od, weights, n, k, c] {
            const auto* g = out_grad(od);
            if (!g) return;
            double* dx = xd->requires_grad ? accum(xd).data() : nullptr;
            double* ddw = dd->requires_grad ? accum(dd).data() : nullptr;
            double* ds = sd->requires_grad ? accum(sd).data() : nullptr;
            std::vector<double> gw(k), dist2(k);
            for (std::size_t i = 0; i < n; ++i) {
                // gw_k = sum_c dL/de_ikc * r_ikc ; dist2_k = ||x_i - d_k||^2
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0, d2 = 0.0;
                    for (std::size_t cc = 0; cc < c; ++cc) {
                        const double r = xd->values[i * c + cc] - dd->values[kk * c + cc];
                        acc += (*g)[(i * k + kk) * c + cc] * r;
                        d2 += r * r;
                    }
                    gw[kk] = acc;
                    dist2[kk] = d2;
                }
                double inner = 0.0;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    inner += (*weights)[i * k + kk] * gw[kk];
                }
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double w = (*weights)[i * k + kk];
                    const double dq = w * (gw[kk] - inner);
                    if (ds) {
                        ds[kk] -= dq * dist2[kk];
                    }
                    const double s_k = sd->values[kk];
                    for (std::size_t cc = 0; cc < c; ++cc) {
                        const double r = xd->values[i * c + cc] - dd->values[kk * c + cc];
                        const double dr =
                            (*g)[(i * k + kk) * c + cc] * w - dq * 2.0 * s_k * r;
                        if (dx) {
                            dx[i * c + cc] += dr;
                        }
                        if (ddw) {
                            ddw[kk * c + cc] -= dr;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Chamfer distance

Tensor chamfer(const Tensor& pred, const std::vector<Point2>& target) {
    if (pred.rank() != 2 || pred.dim(1) != 2) {
        throw ShapeError("chamfer expects predicted points of shape [n x 2], got " +
                         shape_str(pred.shape()));
    }
    if (target.empty()) {
        throw Error("chamfer: target point set is empty");
    }
    const std::size_t np = pred.dim(0), ng = target.size();
    auto near_pred = std::make_shared<std::vector<std::size_t>>(np);
    auto near_gt = std::make_shared<std::vector<std::size_t>>(ng);

    double sum_pred = 0.0;
    for (std::size_t i = 0; i < np; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < ng; ++j) {
            const double dx = pred.at(i, 0) - target[j].x;
            const double dy = pred.at(i, 1) - target[j].y;
            const double d2 = dx * dx + dy * dy;
            if (d2 < best) {
                best = d2;
                best_j = j;
            }
        }
        (*near_pred)[i] = best_j;
        sum_pred += best;
    }
    double sum_gt = 0.0;
    for (std::size_t j = 0; j < ng; ++j) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < np; ++i) {
            const double dx = pred.at(i, 0) - target[j].x;
            const double dy = pred.at(i, 1) - target[j].y;
            const double d2 = dx * dx + dy * dy;
            if (d2 < best) {
                best = d2;
                best_i = i;
            }
        }
        (*near_gt)[j] = best_i;
        sum_gt += best;
    }

    Tensor out = Tensor::scalar(sum_pred / static_cast<double>(np) +
                                sum_gt / static_cast<double>(ng));
    const bool track = want_grad({&pred});
    out.set_requires_grad(track);
    if (track) {
        Data pd = pred.ptr(), od = out.ptr();
        auto tgt = std::make_shared<std::vector<Point2>>(target);
        Tape::active().push([pd, od, tgt, near_pred, near_gt, np, ng] {
            const auto* g = out_grad(od);
            if (!g) return;
            auto& dp = accum(pd);
            const double gp = (*g)[0] * 2.0 / static_cast<double>(np);
            for (std::size_t i = 0; i < np; ++i) {
                const Point2& t = (*tgt)[(*near_pred)[i]];
                dp[i * 2 + 0] += gp * (pd->values[i * 2 + 0] - t.x);
                dp[i * 2 + 1] += gp * (pd->values[i * 2 + 1] - t.y);
            }
            const double gg = (*g)[0] * 2.0 / static_cast<double>(ng);
            for (std::size_t j = 0; j < ng; ++j) {
                const std::size_t i = (*near_gt)[j];
                dp[i * 2 + 0] += gg * (pd->values[i * 2 + 0] - (*tgt)[j].x);
                dp[i * 2 + 1] += gg * (pd->values[i * 2 + 1] - (*tgt)[j].y);
            }
        });
    }
    return out;
}

} // namespace lanekit
