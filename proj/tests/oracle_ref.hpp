#pragma once

// Test-side reference implementations. These stay independent of the
// production kernels (plain nested loops, double accumulation) so they can
// arbitrate between the scalar and SIMD backends.

#include <cmath>
#include <functional>
#include <vector>

#include "rsnas/tensor.hpp"

namespace refimpl {

// Naive, six-loop convolution with implicit zero padding dilation*(k-1)/2.
inline rsnas::TensorPtr naive_conv2d(const rsnas::TensorPtr& x, const rsnas::TensorPtr& w,
                                     const rsnas::TensorPtr& b, int stride, int dilation,
                                     int groups) {
    const int N = x->shape.n, Cin = x->shape.c, H = x->shape.h, W = x->shape.w;
    const int Cout = w->shape.n, k = w->shape.h;
    const int pad = dilation * (k - 1) / 2;
    const int Hout = (H + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    const int Wout = (W + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    const int icg = Cin / groups, ocg = Cout / groups;
    auto out = rsnas::Tensor::zeros({N, Cout, Hout, Wout});
    for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < Cout; ++oc) {
            const int g = oc / ocg;
            for (int oy = 0; oy < Hout; ++oy)
                for (int ox = 0; ox < Wout; ++ox) {
                    double acc = b ? b->data[static_cast<std::size_t>(oc)] : 0.0;
                    for (int icl = 0; icl < icg; ++icl) {
                        const int ic = g * icg + icl;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride + ky * dilation - pad;
                                const int ix = ox * stride + kx * dilation - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += static_cast<double>(x->at(n, ic, iy, ix)) *
                                       w->data[static_cast<std::size_t>(((static_cast<std::int64_t>(oc) * icg + icl) * k + ky) * k + kx)];
                            }
                    }
                    out->at(n, oc, oy, ox) = static_cast<float>(acc);
                }
        }
    return out;
}

// Central finite difference of a scalar-valued rebuild function with respect
// to one entry of `param`.
inline double fd_grad(const std::function<double()>& eval_loss, rsnas::Tensor& param,
                      std::size_t index, double eps) {
    const float saved = param.data[index];
    param.data[index] = static_cast<float>(saved + eps);
    const double up = eval_loss();
    param.data[index] = static_cast<float>(saved - eps);
    const double down = eval_loss();
    param.data[index] = saved;
    return (up - down) / (2.0 * eps);
}

// Relative error with an absolute floor; near-zero gradients are dominated by
// float32 forward noise, so they are compared absolutely against the floor.
inline double rel_err(double analytic, double numeric, double floor_val = 0.05) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor_val});
    return std::fabs(analytic - numeric) / denom;
}

inline rsnas::TensorPtr random_tensor(rsnas::Shape4 s, rsnas::Rng& rng, float stddev = 1.0f) {
    return rsnas::Tensor::randn(s, rng, 0.0f, stddev);
}

} // namespace refimpl
