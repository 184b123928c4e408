#include "lanekit/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <string>

#include "lanekit/error.hpp"

namespace lanekit::kernels {

namespace {

void matmul_scalar(std::size_t m, std::size_t k, std::size_t n,
                   const double* a, const double* b, double* c) {
    std::memset(c, 0, m * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        double* c_row = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double a_ip = a[i * k + p];
            const double* b_row = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

void scale_copy_scalar(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = alpha * x[i];
    }
}

void add_scalar(std::size_t n, const double* a, const double* b, double* out) {
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a[i] + b[i];
    }
}

void mul_scalar(std::size_t n, const double* a, const double* b, double* out) {
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a[i] * b[i];
    }
}

void relu_scalar(std::size_t n, const double* x, double* out) {
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::max(x[i], 0.0);
    }
}

void relu_backward_scalar(std::size_t n, const double* x, const double* dy, double* dx) {
    for (std::size_t i = 0; i < n; ++i) {
        if (x[i] > 0.0) {
            dx[i] += dy[i];
        }
    }
}

void sgd_update_scalar(std::size_t n, double lr, double momentum,
                       double* velocity, const double* grad, double* param) {
    for (std::size_t i = 0; i < n; ++i) {
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] -= lr * velocity[i];
    }
}

constexpr KernelTable kScalarTable = {
    matmul_scalar, axpy_scalar,  scale_copy_scalar,   add_scalar,
    mul_scalar,    relu_scalar,  relu_backward_scalar, sgd_update_scalar,
};

Backend g_backend = [] {
    return avx2_supported() ? Backend::avx2 : Backend::scalar;
}();

} // namespace

namespace detail {
// Defined in kernels_avx2.cpp; returns nullptr when AVX2 was not compiled in.
const KernelTable* avx2_table();
} // namespace detail

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
    return detail::avx2_table() != nullptr && __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

Backend active_backend() { return g_backend; }

void set_backend(Backend b) {
    if (b == Backend::avx2 && !avx2_supported()) {
        throw Error("kernel backend avx2 is not available on this machine");
    }
    g_backend = b;
}

void set_backend_auto() {
    g_backend = avx2_supported() ? Backend::avx2 : Backend::scalar;
}

void select_backend(std::string_view name) {
    if (name == "auto") {
        set_backend_auto();
    } else if (name == "scalar") {
        set_backend(Backend::scalar);
    } else if (name == "avx2") {
        set_backend(Backend::avx2);
    } else {
        throw Error("unknown kernel backend '" + std::string(name) +
                    "' (expected auto, scalar or avx2)");
    }
}

const char* backend_name(Backend b) {
    return b == Backend::avx2 ? "avx2" : "scalar";
}

const KernelTable& table() { return table_for(g_backend); }

const KernelTable& table_for(Backend b) {
    if (b == Backend::avx2) {
        if (!avx2_supported()) {
            throw Error("kernel backend avx2 is not available on this machine");
        }
        return *detail::avx2_table();
    }
    return kScalarTable;
}

} // namespace lanekit::kernels
