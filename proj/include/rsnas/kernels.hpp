#pragma once

#include <cstddef>
#include <string>

// Float kernels behind a runtime-dispatched table. The scalar implementations
// are the reference semantics; the AVX2 set must agree with them within float
// tolerance (reductions reassociate, so bit-equality is not promised).
namespace rsnas::kern {

enum class Backend {
    Scalar,
    Avx2,
};

struct KernelTable {
    // y[i] += a * x[i]
    void (*axpy)(float* y, const float* x, float a, std::size_t n);
    // x[i] *= a
    void (*scale)(float* x, float a, std::size_t n);
    // out[i] = a[i] + b[i]
    void (*vadd)(float* out, const float* a, const float* b, std::size_t n);
    // out[i] = a[i] * b[i]
    void (*vmul)(float* out, const float* a, const float* b, std::size_t n);
    // out[i] = max(x[i], 0)
    void (*relu_fwd)(float* out, const float* x, std::size_t n);
    // dx[i] += x[i] > 0 ? dy[i] : 0
    void (*relu_bwd)(float* dx, const float* x, const float* dy, std::size_t n);
    // out[i] = a * x[i] + b
    void (*affine)(float* out, const float* x, float a, float b, std::size_t n);
    // x[i] += a
    void (*addc)(float* x, float a, std::size_t n);
    // y[i] += a[i] * b[i]
    void (*vmac)(float* y, const float* a, const float* b, std::size_t n);
    float (*dot)(const float* x, const float* y, std::size_t n);
    float (*sum)(const float* x, std::size_t n);
    float (*sumsq)(const float* x, std::size_t n);
};

// Highest tier supported by this CPU.
Backend detect_backend();

// Force a backend (tests, CLI); throws std::invalid_argument if unsupported here.
void set_backend(Backend b);

Backend active_backend();
const KernelTable& table();
const KernelTable& table_for(Backend b);
bool backend_available(Backend b);

const char* backend_name(Backend b);
Backend backend_from_name(const std::string& name);

// Strided variants used by stride>1 convolutions; scalar only (cold path).
void axpy_strided(float* y, std::size_t ystride, const float* x, std::size_t xstride,
                  float a, std::size_t n);
float dot_strided(const float* x, std::size_t xstride, const float* y, std::size_t ystride,
                  std::size_t n);

namespace scalar {
void axpy(float* y, const float* x, float a, std::size_t n);
void scale(float* x, float a, std::size_t n);
void vadd(float* out, const float* a, const float* b, std::size_t n);
void vmul(float* out, const float* a, const float* b, std::size_t n);
void relu_fwd(float* out, const float* x, std::size_t n);
void relu_bwd(float* dx, const float* x, const float* dy, std::size_t n);
void affine(float* out, const float* x, float a, float b, std::size_t n);
void addc(float* x, float a, std::size_t n);
void vmac(float* y, const float* a, const float* b, std::size_t n);
float dot(const float* x, const float* y, std::size_t n);
float sum(const float* x, std::size_t n);
float sumsq(const float* x, std::size_t n);
} // namespace scalar

#if RSNAS_HAVE_AVX2
namespace avx2 {
void axpy(float* y, const float* x, float a, std::size_t n);
void scale(float* x, float a, std::size_t n);
void vadd(float* out, const float* a, const float* b, std::size_t n);
void vmul(float* out, const float* a, const float* b, std::size_t n);
void relu_fwd(float* out, const float* x, std::size_t n);
void relu_bwd(float* dx, const float* x, const float* dy, std::size_t n);
void affine(float* out, const float* x, float a, float b, std::size_t n);
void addc(float* x, float a, std::size_t n);
void vmac(float* y, const float* a, const float* b, std::size_t n);
float dot(const float* x, const float* y, std::size_t n);
float sum(const float* x, std::size_t n);
float sumsq(const float* x, std::size_t n);
} // namespace avx2
#endif

} // namespace rsnas::kern
