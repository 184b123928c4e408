// AVX2 variants of the kernel table. Compiled with -mavx2 -mno-fma
// -ffp-contract=off so that mul+add sequences are never contracted into FMA;
// per-element results must match the scalar reference bitwise.

#include "lanekit/kernels.hpp"

#include <cstring>

#if (defined(__x86_64__) || defined(_M_X64)) && defined(__AVX2__)
#define LANEKIT_AVX2_BUILD 1
#include <immintrin.h>
#else
#define LANEKIT_AVX2_BUILD 0
#endif

namespace lanekit::kernels {

#if LANEKIT_AVX2_BUILD

namespace {

void matmul_avx2(std::size_t m, std::size_t k, std::size_t n,
                 const double* a, const double* b, double* c) {
    std::memset(c, 0, m * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        double* c_row = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double a_ip = a[i * k + p];
            const double* b_row = b + p * n;
            const __m256d a_vec = _mm256_set1_pd(a_ip);
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4) {
                __m256d acc = _mm256_loadu_pd(c_row + j);
                __m256d prod = _mm256_mul_pd(a_vec, _mm256_loadu_pd(b_row + j));
                _mm256_storeu_pd(c_row + j, _mm256_add_pd(acc, prod));
            }
            for (; j < n; ++j) {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d a_vec = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d prod = _mm256_mul_pd(a_vec, _mm256_loadu_pd(x + i));
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
    }
    for (; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

void scale_copy_avx2(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d a_vec = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_mul_pd(a_vec, _mm256_loadu_pd(x + i)));
    }
    for (; i < n; ++i) {
        y[i] = alpha * x[i];
    }
}

void add_avx2(std::size_t n, const double* a, const double* b, double* out) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i,
                         _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) {
        out[i] = a[i] + b[i];
    }
}

void mul_avx2(std::size_t n, const double* a, const double* b, double* out) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i,
                         _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) {
        out[i] = a[i] * b[i];
    }
}

void relu_avx2(std::size_t n, const double* x, double* out) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
    }
    for (; i < n; ++i) {
        out[i] = x[i] > 0.0 ? x[i] : 0.0;
    }
}

void relu_backward_avx2(std::size_t n, const double* x, const double* dy, double* dx) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
        __m256d pass = _mm256_and_pd(mask, _mm256_loadu_pd(dy + i));
        _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), pass));
    }
    for (; i < n; ++i) {
        if (x[i] > 0.0) {
            dx[i] += dy[i];
        }
    }
}

void sgd_update_avx2(std::size_t n, double lr, double momentum,
                     double* velocity, const double* grad, double* param) {
    const __m256d m_vec = _mm256_set1_pd(momentum);
    const __m256d lr_vec = _mm256_set1_pd(lr);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d v = _mm256_mul_pd(m_vec, _mm256_loadu_pd(velocity + i));
        v = _mm256_add_pd(v, _mm256_loadu_pd(grad + i));
        _mm256_storeu_pd(velocity + i, v);
        __m256d p = _mm256_loadu_pd(param + i);
        _mm256_storeu_pd(param + i, _mm256_sub_pd(p, _mm256_mul_pd(lr_vec, v)));
    }
    for (; i < n; ++i) {
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] -= lr * velocity[i];
    }
}

constexpr KernelTable kAvx2Table = {
    matmul_avx2, axpy_avx2,  scale_copy_avx2,    add_avx2,
    mul_avx2,    relu_avx2,  relu_backward_avx2, sgd_update_avx2,
};

} // namespace

namespace detail {
const KernelTable* avx2_table() { return &kAvx2Table; }
} // namespace detail

#else

namespace detail {
const KernelTable* avx2_table() { return nullptr; }
} // namespace detail

#endif // LANEKIT_AVX2_BUILD

} // namespace lanekit::kernels
