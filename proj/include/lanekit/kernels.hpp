#pragma once

// Dense double-precision inner loops behind the tensor ops. Every entry has a
// scalar reference implementation and, on x86-64 with AVX2, a vector variant
// selected at runtime. Both variants of a kernel must produce bitwise
// identical results: vector code keeps the scalar accumulation order per
// output element and is built without FMA contraction. The equivalence tests
// assert exact equality, not a tolerance.

#include <cstddef>
#include <string_view>

namespace lanekit::kernels {

enum class Backend { scalar, avx2 };

struct KernelTable {
    // c = a * b, row-major, a is m x k, b is k x n. c is overwritten.
    void (*matmul)(std::size_t m, std::size_t k, std::size_t n,
                   const double* a, const double* b, double* c);
    // y += alpha * x
    void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
    // y = alpha * x
    void (*scale_copy)(std::size_t n, double alpha, const double* x, double* y);
    // out = a + b
    void (*add)(std::size_t n, const double* a, const double* b, double* out);
    // out = a * b (elementwise)
    void (*mul)(std::size_t n, const double* a, const double* b, double* out);
    // out = max(x, 0)
    void (*relu)(std::size_t n, const double* x, double* out);
    // dx += dy where x > 0
    void (*relu_backward)(std::size_t n, const double* x, const double* dy, double* dx);
    // v = momentum * v + g; p -= lr * v
    void (*sgd_update)(std::size_t n, double lr, double momentum,
                       double* velocity, const double* grad, double* param);
};

// True when the AVX2 variant is both compiled in and supported by this CPU.
bool avx2_supported();

Backend active_backend();
void set_backend(Backend b); // throws Error if unsupported on this machine
void set_backend_auto();     // picks the widest supported variant

// Accepts "auto", "scalar", "avx2". "auto" applies set_backend_auto().
void select_backend(std::string_view name);

const char* backend_name(Backend b);

// Table for the active backend.
const KernelTable& table();

// Table for a specific backend (throws if unavailable). Used by tests.
const KernelTable& table_for(Backend b);

} // namespace lanekit::kernels
