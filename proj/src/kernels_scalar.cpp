#include "rsnas/kernels.hpp"

namespace rsnas::kern::scalar {

void axpy(float* y, const float* x, float a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scale(float* x, float a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

void vadd(float* out, const float* a, const float* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void vmul(float* out, const float* a, const float* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void relu_fwd(float* out, const float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd(float* dx, const float* x, const float* dy, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (x[i] > 0.0f) dx[i] += dy[i];
}

void affine(float* out, const float* x, float a, float b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i] + b;
}

void addc(float* x, float a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] += a;
}

void vmac(float* y, const float* a, const float* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a[i] * b[i];
}

// Reductions accumulate in double: the scalar tier doubles as the accuracy
// reference in the scalar-vs-SIMD equivalence tests.
float dot(const float* x, const float* y, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * y[i];
    return static_cast<float>(acc);
}

float sum(const float* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return static_cast<float>(acc);
}

float sumsq(const float* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * x[i];
    return static_cast<float>(acc);
}

} // namespace rsnas::kern::scalar
