#include "rsnas/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

#include "rsnas/kernels.hpp"

namespace rsnas {

using nlohmann::json;

// ---- Tensor basics ----

static void check_shape(const Shape4& s) {
    RSNAS_CHECK(s.n > 0 && s.c > 0 && s.h > 0 && s.w > 0, "invalid tensor shape ", s.str());
}

TensorPtr Tensor::zeros(Shape4 s, bool requires_grad) {
    check_shape(s);
    auto t = std::make_shared<Tensor>();
    t->shape = s;
    t->data.assign(static_cast<std::size_t>(s.numel()), 0.0f);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::full(Shape4 s, float value, bool requires_grad) {
    auto t = zeros(s, requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr Tensor::from_vector(Shape4 s, std::vector<float> values, bool requires_grad) {
    check_shape(s);
    RSNAS_CHECK(static_cast<std::int64_t>(values.size()) == s.numel(),
                "from_vector: ", values.size(), " values for shape ", s.str());
    auto t = std::make_shared<Tensor>();
    t->shape = s;
    t->data = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::randn(Shape4 s, Rng& rng, float mean, float stddev, bool requires_grad) {
    auto t = zeros(s, requires_grad);
    for (auto& v : t->data) v = static_cast<float>(rng.normal(mean, stddev));
    return t;
}

float Tensor::item() const {
    RSNAS_CHECK(numel() == 1, "item() on non-scalar tensor ", shape.str());
    return data[0];
}

std::vector<float>& Tensor::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad;
}

void Tensor::check_finite(const std::string& what) const {
    for (float v : data) {
        if (!std::isfinite(v))
            throw NumericalError(cat("non-finite value in ", what, " (op '", op, "')"));
    }
}

// ---- grad mode ----

namespace {
thread_local bool g_grad_enabled = true;
bool g_relu_fault = false;
} // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

namespace testing {
void set_relu_backward_fault(bool on) { g_relu_fault = on; }
bool relu_backward_fault() { return g_relu_fault; }
} // namespace testing

namespace {

// Op output node. Parents/backward are only attached when the tape is live
// and some input can produce gradient.
TensorPtr make_node(Shape4 s, const char* op_name, std::vector<TensorPtr> parents,
                    std::function<void(Tensor&)> backward_fn) {
    auto out = Tensor::zeros(s);
    out->op = op_name;
    bool any = false;
    for (const auto& p : parents) {
        if (p && p->requires_grad) any = true;
    }
    if (any && GradMode::enabled()) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backward_fn = std::move(backward_fn);
    }
    return out;
}

inline const kern::KernelTable& K() { return kern::table(); }

} // namespace

// ---- conv2d ----

namespace {

struct ConvDims {
    int N, Cin, H, W, Cout, k, stride, dilation, groups, pad, Hout, Wout, icg, ocg;
};

ConvDims conv_dims(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                   int stride, int dilation, int groups) {
    RSNAS_CHECK(x && w, "conv2d: null tensor");
    ConvDims d{};
    d.N = x->shape.n;
    d.Cin = x->shape.c;
    d.H = x->shape.h;
    d.W = x->shape.w;
    d.Cout = w->shape.n;
    d.k = w->shape.h;
    RSNAS_CHECK(w->shape.h == w->shape.w, "conv2d: kernel must be square, got ",
                w->shape.h, "x", w->shape.w);
    RSNAS_CHECK(d.k == 1 || d.k == 3, "conv2d: kernel size must be 1 or 3, got ", d.k);
    RSNAS_CHECK(dilation >= 1 && dilation <= 3, "conv2d: dilation must be in {1,2,3}, got ",
                dilation);
    RSNAS_CHECK(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2, got ", stride);
    RSNAS_CHECK(groups >= 1 && d.Cin % groups == 0 && d.Cout % groups == 0,
                "conv2d: groups=", groups, " must divide in/out channels (", d.Cin, ",", d.Cout, ")");
    RSNAS_CHECK(w->shape.c == d.Cin / groups, "conv2d: weight expects ", w->shape.c,
                " input channels per group, input has ", d.Cin / groups);
    if (b) {
        RSNAS_CHECK((b->shape == Shape4{1, d.Cout, 1, 1}), "conv2d: bias shape ", b->shape.str(),
                    " != (1,", d.Cout, ",1,1)");
    }
    d.stride = stride;
    d.dilation = dilation;
    d.groups = groups;
    d.pad = dilation * (d.k - 1) / 2;
    d.Hout = (d.H + 2 * d.pad - dilation * (d.k - 1) - 1) / stride + 1;
    d.Wout = (d.W + 2 * d.pad - dilation * (d.k - 1) - 1) / stride + 1;
    RSNAS_CHECK(d.Hout > 0 && d.Wout > 0, "conv2d: input ", x->shape.str(), " too small");
    d.icg = d.Cin / groups;
    d.ocg = d.Cout / groups;
    return d;
}

// Valid output range [lo, hi) along one axis for kernel tap kd (= kpos*dilation).
inline void tap_range(int in_size, int out_size, int stride, int pad, int kd, int& lo, int& hi) {
    int v = pad - kd; // first in-coordinate offset: i = o*stride - v
    lo = v <= 0 ? 0 : (v + stride - 1) / stride;
    int last = in_size - 1 + pad - kd;
    hi = last < 0 ? lo : std::min(out_size, last / stride + 1);
    if (hi < lo) hi = lo;
}

} // namespace

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                 int stride, int dilation, int groups) {
    const ConvDims d = conv_dims(x, w, b, stride, dilation, groups);
    auto out = make_node(
        Shape4{d.N, d.Cout, d.Hout, d.Wout}, "conv2d", {x, w, b},
        [x, w, b, d](Tensor& self) {
            const float* dy = self.grad.data();
            // dx
            if (x->requires_grad) {
                float* dx = x->grad_buffer().data();
                for (int n = 0; n < d.N; ++n)
                    for (int g = 0; g < d.groups; ++g)
                        for (int ocl = 0; ocl < d.ocg; ++ocl) {
                            const int oc = g * d.ocg + ocl;
                            for (int icl = 0; icl < d.icg; ++icl) {
                                const int ic = g * d.icg + icl;
                                for (int ky = 0; ky < d.k; ++ky)
                                    for (int kx = 0; kx < d.k; ++kx) {
                                        const float wv = w->data[static_cast<std::size_t>(
                                            ((static_cast<std::int64_t>(oc) * d.icg + icl) * d.k + ky) * d.k + kx)];
                                        if (wv == 0.0f) continue;
                                        int oy0, oy1, ox0, ox1;
                                        tap_range(d.H, d.Hout, d.stride, d.pad, ky * d.dilation, oy0, oy1);
                                        tap_range(d.W, d.Wout, d.stride, d.pad, kx * d.dilation, ox0, ox1);
                                        if (ox1 <= ox0) continue;
                                        for (int oy = oy0; oy < oy1; ++oy) {
                                            const int iy = oy * d.stride + ky * d.dilation - d.pad;
                                            const int ix0 = ox0 * d.stride + kx * d.dilation - d.pad;
                                            float* dxrow = dx + ((static_cast<std::int64_t>(n) * d.Cin + ic) * d.H + iy) * d.W + ix0;
                                            const float* dyrow = dy + ((static_cast<std::int64_t>(n) * d.Cout + oc) * d.Hout + oy) * d.Wout + ox0;
                                            if (d.stride == 1)
                                                K().axpy(dxrow, dyrow, wv, static_cast<std::size_t>(ox1 - ox0));
                                            else
                                                kern::axpy_strided(dxrow, d.stride, dyrow, 1, wv,
                                                                   static_cast<std::size_t>(ox1 - ox0));
                                        }
                                    }
                            }
                        }
            }
            // dw
            if (w->requires_grad) {
                float* dw = w->grad_buffer().data();
                for (int g = 0; g < d.groups; ++g)
                    for (int ocl = 0; ocl < d.ocg; ++ocl) {
                        const int oc = g * d.ocg + ocl;
                        for (int icl = 0; icl < d.icg; ++icl) {
                            const int ic = g * d.icg + icl;
                            for (int ky = 0; ky < d.k; ++ky)
                                for (int kx = 0; kx < d.k; ++kx) {
                                    int oy0, oy1, ox0, ox1;
                                    tap_range(d.H, d.Hout, d.stride, d.pad, ky * d.dilation, oy0, oy1);
                                    tap_range(d.W, d.Wout, d.stride, d.pad, kx * d.dilation, ox0, ox1);
                                    if (ox1 <= ox0) continue;
                                    double acc = 0.0;
                                    for (int n = 0; n < d.N; ++n)
                                        for (int oy = oy0; oy < oy1; ++oy) {
                                            const int iy = oy * d.stride + ky * d.dilation - d.pad;
                                            const int ix0 = ox0 * d.stride + kx * d.dilation - d.pad;
                                            const float* xrow = x->data.data() + ((static_cast<std::int64_t>(n) * d.Cin + ic) * d.H + iy) * d.W + ix0;
                                            const float* dyrow = dy + ((static_cast<std::int64_t>(n) * d.Cout + oc) * d.Hout + oy) * d.Wout + ox0;
                                            acc += d.stride == 1
                                                       ? K().dot(xrow, dyrow, static_cast<std::size_t>(ox1 - ox0))
                                                       : kern::dot_strided(xrow, d.stride, dyrow, 1,
                                                                           static_cast<std::size_t>(ox1 - ox0));
                                        }
                                    dw[((static_cast<std::int64_t>(oc) * d.icg + icl) * d.k + ky) * d.k + kx] +=
                                        static_cast<float>(acc);
                                }
                        }
                    }
            }
            // db
            if (b && b->requires_grad) {
                float* db = b->grad_buffer().data();
                const std::size_t plane = static_cast<std::size_t>(d.Hout) * d.Wout;
                for (int n = 0; n < d.N; ++n)
                    for (int oc = 0; oc < d.Cout; ++oc)
                        db[oc] += K().sum(dy + (static_cast<std::int64_t>(n) * d.Cout + oc) * plane, plane);
            }
        });

    // forward
    const std::size_t oplane = static_cast<std::size_t>(d.Hout) * d.Wout;
    for (int n = 0; n < d.N; ++n)
        for (int g = 0; g < d.groups; ++g)
            for (int ocl = 0; ocl < d.ocg; ++ocl) {
                const int oc = g * d.ocg + ocl;
                float* oplane_ptr = out->data.data() + (static_cast<std::int64_t>(n) * d.Cout + oc) * oplane;
                if (b) {
                    const float bv = b->data[static_cast<std::size_t>(oc)];
                    std::fill(oplane_ptr, oplane_ptr + oplane, bv);
                }
                for (int icl = 0; icl < d.icg; ++icl) {
                    const int ic = g * d.icg + icl;
                    const float* iplane_ptr = x->data.data() + (static_cast<std::int64_t>(n) * d.Cin + ic) * d.H * d.W;
                    for (int ky = 0; ky < d.k; ++ky)
                        for (int kx = 0; kx < d.k; ++kx) {
                            const float wv = w->data[static_cast<std::size_t>(
                                ((static_cast<std::int64_t>(oc) * d.icg + icl) * d.k + ky) * d.k + kx)];
                            if (wv == 0.0f) continue;
                            int oy0, oy1, ox0, ox1;
                            tap_range(d.H, d.Hout, d.stride, d.pad, ky * d.dilation, oy0, oy1);
                            tap_range(d.W, d.Wout, d.stride, d.pad, kx * d.dilation, ox0, ox1);
                            if (ox1 <= ox0) continue;
                            for (int oy = oy0; oy < oy1; ++oy) {
                                const int iy = oy * d.stride + ky * d.dilation - d.pad;
                                const int ix0 = ox0 * d.stride + kx * d.dilation - d.pad;
                                float* orow = oplane_ptr + static_cast<std::int64_t>(oy) * d.Wout + ox0;
                                const float* irow = iplane_ptr + static_cast<std::int64_t>(iy) * d.W + ix0;
                                if (d.stride == 1)
                                    K().axpy(orow, irow, wv, static_cast<std::size_t>(ox1 - ox0));
                                else
                                    kern::axpy_strided(orow, 1, irow, d.stride, wv,
                                                       static_cast<std::size_t>(ox1 - ox0));
                            }
                        }
                }
            }
    return out;
}

// ---- group norm ----

TensorPtr group_norm(const TensorPtr& x, int num_groups, const TensorPtr& gamma,
                     const TensorPtr& beta, float eps) {
    RSNAS_CHECK(x && gamma && beta, "group_norm: null tensor");
    const int C = x->shape.c;
    RSNAS_CHECK(num_groups >= 1 && num_groups <= C && C % num_groups == 0,
                "group_norm: num_groups=", num_groups, " incompatible with C=", C);
    RSNAS_CHECK(gamma->shape == (Shape4{1, C, 1, 1}) && beta->shape == (Shape4{1, C, 1, 1}),
                "group_norm: gamma/beta must be (1,", C, ",1,1)");
    const int N = x->shape.n, H = x->shape.h, W = x->shape.w;
    const int cpg = C / num_groups;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t gsize = plane * static_cast<std::size_t>(cpg);

    // Per (n, group) statistics, shared between forward and backward.
    auto means = std::make_shared<std::vector<float>>(static_cast<std::size_t>(N) * num_groups);
    auto invs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(N) * num_groups);

    auto out = make_node(
        x->shape, "group_norm", {x, gamma, beta},
        [x, gamma, beta, num_groups, means, invs, N, C, H, W, cpg, plane, gsize](Tensor& self) {
            const float* dy = self.grad.data();
            const float m = static_cast<float>(gsize);
            float* dgamma = gamma->requires_grad ? gamma->grad_buffer().data() : nullptr;
            float* dbeta = beta->requires_grad ? beta->grad_buffer().data() : nullptr;
            float* dx = x->requires_grad ? x->grad_buffer().data() : nullptr;
            for (int n = 0; n < N; ++n)
                for (int g = 0; g < num_groups; ++g) {
                    const float mean = (*means)[static_cast<std::size_t>(n) * num_groups + g];
                    const float inv = (*invs)[static_cast<std::size_t>(n) * num_groups + g];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int cl = 0; cl < cpg; ++cl) {
                        const int c = g * cpg + cl;
                        const float* dyc = dy + (static_cast<std::int64_t>(n) * C + c) * plane;
                        const float* xc = x->data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                        const float s1 = K().sum(dyc, plane);
                        const float s2 = K().dot(dyc, xc, plane);
                        const float dg = inv * (s2 - mean * s1); // = sum(dy*xhat) for channel
                        if (dbeta) dbeta[c] += s1;
                        if (dgamma) dgamma[c] += dg;
                        const float gc = gamma->data[static_cast<std::size_t>(c)];
                        sum_g += static_cast<double>(gc) * s1;
                        sum_gx += static_cast<double>(gc) * dg;
                    }
                    if (!dx) continue;
                    // dx = a_c*dy + bx*x + c0, with group-constant bx, per-channel a_c.
                    const float bx = static_cast<float>(-inv * inv * sum_gx / m);
                    const float c0 = static_cast<float>(-inv * sum_g / m + mean * inv * inv * sum_gx / m);
                    for (int cl = 0; cl < cpg; ++cl) {
                        const int c = g * cpg + cl;
                        const float ac = inv * gamma->data[static_cast<std::size_t>(c)];
                        float* dxc = dx + (static_cast<std::int64_t>(n) * C + c) * plane;
                        const float* dyc = dy + (static_cast<std::int64_t>(n) * C + c) * plane;
                        const float* xc = x->data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                        K().axpy(dxc, dyc, ac, plane);
                        K().axpy(dxc, xc, bx, plane);
                        K().addc(dxc, c0, plane);
                    }
                }
        });

    for (int n = 0; n < N; ++n)
        for (int g = 0; g < num_groups; ++g) {
            const float* xg = x->data.data() + (static_cast<std::int64_t>(n) * C + g * cpg) * plane;
            const double s = K().sum(xg, gsize);
            const double ss = K().sumsq(xg, gsize);
            const double mean = s / static_cast<double>(gsize);
            double var = ss / static_cast<double>(gsize) - mean * mean;
            if (var < 0.0) var = 0.0;
            const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
            (*means)[static_cast<std::size_t>(n) * num_groups + g] = static_cast<float>(mean);
            (*invs)[static_cast<std::size_t>(n) * num_groups + g] = inv;
            for (int cl = 0; cl < cpg; ++cl) {
                const int c = g * cpg + cl;
                const float a = inv * gamma->data[static_cast<std::size_t>(c)];
                const float bsh = beta->data[static_cast<std::size_t>(c)] - static_cast<float>(mean) * a;
                const float* xc = x->data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                float* oc = out->data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                K().affine(oc, xc, a, bsh, plane);
            }
        }
    return out;
}

// ---- elementwise / structural ops ----

TensorPtr relu(const TensorPtr& x) {
    RSNAS_CHECK(x, "relu: null tensor");
    auto out = make_node(x->shape, "relu", {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        float* dx = x->grad_buffer().data();
        const std::size_t n = x->data.size();
        if (testing::relu_backward_fault()) {
            K().axpy(dx, self.grad.data(), 1.0f, n); // fault: ignores the mask
            return;
        }
        K().relu_bwd(dx, x->data.data(), self.grad.data(), n);
    });
    K().relu_fwd(out->data.data(), x->data.data(), x->data.size());
    return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    RSNAS_CHECK(a && b, "add: null tensor");
    RSNAS_CHECK(a->shape == b->shape, "add: shape mismatch ", a->shape.str(), " vs ",
                b->shape.str());
    auto out = make_node(a->shape, "add", {a, b}, [a, b](Tensor& self) {
        if (a->requires_grad)
            K().axpy(a->grad_buffer().data(), self.grad.data(), 1.0f, a->data.size());
        if (b->requires_grad)
            K().axpy(b->grad_buffer().data(), self.grad.data(), 1.0f, b->data.size());
    });
    K().vadd(out->data.data(), a->data.data(), b->data.data(), a->data.size());
    return out;
}

TensorPtr scale(const TensorPtr& x, float s) {
    RSNAS_CHECK(x, "scale: null tensor");
    auto out = make_node(x->shape, "scale", {x}, [x, s](Tensor& self) {
        if (x->requires_grad)
            K().axpy(x->grad_buffer().data(), self.grad.data(), s, x->data.size());
    });
    K().affine(out->data.data(), x->data.data(), s, 0.0f, x->data.size());
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    RSNAS_CHECK(a && b, "mul: null tensor");
    RSNAS_CHECK(a->shape == b->shape, "mul: shape mismatch ", a->shape.str(), " vs ",
                b->shape.str());
    auto out = make_node(a->shape, "mul", {a, b}, [a, b](Tensor& self) {
        if (a->requires_grad)
            K().vmac(a->grad_buffer().data(), self.grad.data(), b->data.data(), a->data.size());
        if (b->requires_grad)
            K().vmac(b->grad_buffer().data(), self.grad.data(), a->data.data(), b->data.size());
    });
    K().vmul(out->data.data(), a->data.data(), b->data.data(), a->data.size());
    return out;
}

// The ops below run on loss-sized tensors, so they use plain scalar loops
// instead of the kernel table.

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    RSNAS_CHECK(a && b, "div: null tensor");
    RSNAS_CHECK(a->shape == b->shape, "div: shape mismatch ", a->shape.str(), " vs ",
                b->shape.str());
    auto out = make_node(a->shape, "div", {a, b}, [a, b](Tensor& self) {
        if (a->requires_grad) {
            float* da = a->grad_buffer().data();
            for (std::size_t i = 0; i < a->data.size(); ++i)
                da[i] += self.grad[i] / b->data[i];
        }
        if (b->requires_grad) {
            float* db = b->grad_buffer().data();
            for (std::size_t i = 0; i < b->data.size(); ++i)
                db[i] -= self.grad[i] * a->data[i] / (b->data[i] * b->data[i]);
        }
    });
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] / b->data[i];
    return out;
}

TensorPtr sigmoid(const TensorPtr& x) {
    RSNAS_CHECK(x, "sigmoid: null tensor");
    auto out = make_node(x->shape, "sigmoid", {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        float* dx = x->grad_buffer().data();
        for (std::size_t i = 0; i < x->data.size(); ++i) {
            const float s = self.data[i];
            dx[i] += self.grad[i] * s * (1.0f - s);
        }
    });
    for (std::size_t i = 0; i < x->data.size(); ++i) {
        const float v = x->data[i];
        out->data[i] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                 : std::exp(v) / (1.0f + std::exp(v));
    }
    return out;
}

TensorPtr exp(const TensorPtr& x) {
    RSNAS_CHECK(x, "exp: null tensor");
    auto out = make_node(x->shape, "exp", {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        float* dx = x->grad_buffer().data();
        for (std::size_t i = 0; i < x->data.size(); ++i) dx[i] += self.grad[i] * self.data[i];
    });
    for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = std::exp(x->data[i]);
    return out;
}

TensorPtr log(const TensorPtr& x, float floor) {
    RSNAS_CHECK(x, "log: null tensor");
    RSNAS_CHECK(floor > 0.0f, "log: floor must be positive, got ", floor);
    auto out = make_node(x->shape, "log", {x}, [x, floor](Tensor& self) {
        if (!x->requires_grad) return;
        float* dx = x->grad_buffer().data();
        for (std::size_t i = 0; i < x->data.size(); ++i)
            if (x->data[i] > floor) dx[i] += self.grad[i] / x->data[i];
    });
    for (std::size_t i = 0; i < x->data.size(); ++i)
        out->data[i] = std::log(std::max(x->data[i], floor));
    return out;
}

TensorPtr clamp(const TensorPtr& x, float lo, float hi) {
    RSNAS_CHECK(x, "clamp: null tensor");
    RSNAS_CHECK(lo < hi, "clamp: lo ", lo, " must be below hi ", hi);
    auto out = make_node(x->shape, "clamp", {x}, [x, lo, hi](Tensor& self) {
        if (!x->requires_grad) return;
        float* dx = x->grad_buffer().data();
        for (std::size_t i = 0; i < x->data.size(); ++i)
            if (x->data[i] > lo && x->data[i] < hi) dx[i] += self.grad[i];
    });
    for (std::size_t i = 0; i < x->data.size(); ++i)
        out->data[i] = std::min(std::max(x->data[i], lo), hi);
    return out;
}

TensorPtr channel_slice(const TensorPtr& x, int c_begin, int c_end) {
    RSNAS_CHECK(x, "channel_slice: null tensor");
    RSNAS_CHECK(0 <= c_begin && c_begin < c_end && c_end <= x->shape.c, "channel_slice: range [",
                c_begin, ", ", c_end, ") out of ", x->shape.c, " channels");
    const Shape4 s = x->shape;
    const int cs = c_end - c_begin;
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    auto out = make_node(Shape4{s.n, cs, s.h, s.w}, "channel_slice", {x},
                         [x, s, c_begin, cs, plane](Tensor& self) {
                             if (!x->requires_grad) return;
                             float* dx = x->grad_buffer().data();
                             for (int n = 0; n < s.n; ++n)
                                 K().axpy(dx + (static_cast<std::size_t>(n) * s.c + c_begin) * plane,
                                          self.grad.data() + static_cast<std::size_t>(n) * cs * plane,
                                          1.0f, static_cast<std::size_t>(cs) * plane);
                         });
    for (int n = 0; n < s.n; ++n)
        std::memcpy(out->data.data() + static_cast<std::size_t>(n) * cs * plane,
                    x->data.data() + (static_cast<std::size_t>(n) * s.c + c_begin) * plane,
                    static_cast<std::size_t>(cs) * plane * sizeof(float));
    return out;
}

TensorPtr concat_channels(const std::vector<TensorPtr>& xs) {
    RSNAS_CHECK(!xs.empty(), "concat_channels: empty input list");
    const Shape4 s0 = xs[0]->shape;
    int ctotal = 0;
    for (const auto& x : xs) {
        RSNAS_CHECK(x, "concat_channels: null tensor");
        RSNAS_CHECK(x->shape.n == s0.n && x->shape.h == s0.h && x->shape.w == s0.w,
                    "concat_channels: spatial/batch mismatch ", x->shape.str(), " vs ", s0.str());
        ctotal += x->shape.c;
    }
    const std::size_t plane = static_cast<std::size_t>(s0.h) * s0.w;
    auto parents = xs;
    auto out = make_node(
        Shape4{s0.n, ctotal, s0.h, s0.w}, "concat_channels", std::move(parents),
        [xs, s0, ctotal, plane](Tensor& self) {
            for (int n = 0; n < s0.n; ++n) {
                std::size_t coff = 0;
                for (const auto& x : xs) {
                    const std::size_t chunk = static_cast<std::size_t>(x->shape.c) * plane;
                    if (x->requires_grad) {
                        const float* dyp = self.grad.data() +
                                           (static_cast<std::size_t>(n) * ctotal) * plane + coff;
                        float* dxp = x->grad_buffer().data() +
                                     static_cast<std::size_t>(n) * x->shape.c * plane;
                        K().axpy(dxp, dyp, 1.0f, chunk);
                    }
                    coff += chunk;
                }
            }
        });
    for (int n = 0; n < s0.n; ++n) {
        std::size_t coff = 0;
        for (const auto& x : xs) {
            const std::size_t chunk = static_cast<std::size_t>(x->shape.c) * plane;
            std::memcpy(out->data.data() + (static_cast<std::size_t>(n) * ctotal) * plane + coff,
                        x->data.data() + static_cast<std::size_t>(n) * x->shape.c * plane,
                        chunk * sizeof(float));
            coff += chunk;
        }
    }
    return out;
}

TensorPtr softmax_channels(const TensorPtr& logits) {
    RSNAS_CHECK(logits, "softmax_channels: null tensor");
    RSNAS_CHECK(logits->shape.n == 1 && logits->shape.h == 1 && logits->shape.w == 1,
                "softmax_channels: expected (1,K,1,1), got ", logits->shape.str());
    auto out = make_node(logits->shape, "softmax", {logits}, [logits](Tensor& self) {
        if (!logits->requires_grad) return;
        const std::size_t k = self.data.size();
        double dotv = 0.0;
        for (std::size_t i = 0; i < k; ++i)
            dotv += static_cast<double>(self.grad[i]) * self.data[i];
        float* dz = logits->grad_buffer().data();
        for (std::size_t i = 0; i < k; ++i)
            dz[i] += self.data[i] * (self.grad[i] - static_cast<float>(dotv));
    });
    auto sm = softmax(logits->data);
    std::copy(sm.begin(), sm.end(), out->data.begin());
    return out;
}

TensorPtr weighted_sum(const std::vector<TensorPtr>& items, const TensorPtr& weights) {
    RSNAS_CHECK(weights, "weighted_sum: null weights");
    RSNAS_CHECK(weights->shape.n == 1 && weights->shape.h == 1 && weights->shape.w == 1,
                "weighted_sum: weights must be (1,K,1,1), got ", weights->shape.str());
    RSNAS_CHECK(static_cast<int>(items.size()) == weights->shape.c, "weighted_sum: ",
                items.size(), " items vs K=", weights->shape.c);
    const Shape4 s = items.at(0)->shape;
    for (const auto& t : items) {
        RSNAS_CHECK(t, "weighted_sum: null item");
        RSNAS_CHECK(t->shape == s, "weighted_sum: item shape ", t->shape.str(), " vs ", s.str());
    }
    std::vector<TensorPtr> parents = items;
    parents.push_back(weights);
    auto out = make_node(s, "weighted_sum", std::move(parents), [items, weights](Tensor& self) {
        const std::size_t n = self.data.size();
        for (std::size_t k = 0; k < items.size(); ++k) {
            if (items[k]->requires_grad)
                K().axpy(items[k]->grad_buffer().data(), self.grad.data(), weights->data[k], n);
        }
        if (weights->requires_grad) {
            float* dwv = weights->grad_buffer().data();
            for (std::size_t k = 0; k < items.size(); ++k)
                dwv[k] += K().dot(items[k]->data.data(), self.grad.data(), n);
        }
    });
    for (std::size_t k = 0; k < items.size(); ++k)
        K().axpy(out->data.data(), items[k]->data.data(), weights->data[k], out->data.size());
    return out;
}

TensorPtr global_avg_pool(const TensorPtr& x) {
    RSNAS_CHECK(x, "global_avg_pool: null tensor");
    const std::size_t plane = static_cast<std::size_t>(x->shape.h) * x->shape.w;
    auto out = make_node(Shape4{x->shape.n, x->shape.c, 1, 1}, "global_avg_pool", {x},
                         [x, plane](Tensor& self) {
                             if (!x->requires_grad) return;
                             float* dx = x->grad_buffer().data();
                             const float invp = 1.0f / static_cast<float>(plane);
                             for (std::size_t p = 0; p < self.data.size(); ++p)
                                 K().addc(dx + p * plane, self.grad[p] * invp, plane);
                         });
    for (std::size_t p = 0; p < out->data.size(); ++p)
        out->data[p] = K().sum(x->data.data() + p * plane, plane) / static_cast<float>(plane);
    return out;
}

namespace {

TensorPtr pool2_common(const TensorPtr& x, bool is_max) {
    RSNAS_CHECK(x, "pool2: null tensor");
    RSNAS_CHECK(x->shape.h % 2 == 0 && x->shape.w % 2 == 0,
                "pool2: spatial dims must be even, got ", x->shape.str());
    const int N = x->shape.n, C = x->shape.c, H = x->shape.h, W = x->shape.w;
    const int Ho = H / 2, Wo = W / 2;
    auto argmax = is_max ? std::make_shared<std::vector<std::int32_t>>(
                               static_cast<std::size_t>(x->shape.numel() / 4))
                         : nullptr;
    auto out = make_node(
        Shape4{N, C, Ho, Wo}, is_max ? "max_pool2" : "avg_pool2", {x},
        [x, argmax, is_max, W, Wo](Tensor& self) {
            if (!x->requires_grad) return;
            float* dx = x->grad_buffer().data();
            if (is_max) {
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    dx[(*argmax)[i]] += self.grad[i];
            } else {
                const std::size_t planes = self.data.size() / (static_cast<std::size_t>(self.shape.h) * self.shape.w);
                const int Hop = self.shape.h;
                for (std::size_t p = 0; p < planes; ++p)
                    for (int oy = 0; oy < Hop; ++oy)
                        for (int ox = 0; ox < Wo; ++ox) {
                            const float g = self.grad[(p * Hop + oy) * Wo + ox] * 0.25f;
                            float* base = dx + (p * (Hop * 2) + oy * 2) * W + ox * 2;
                            base[0] += g;
                            base[1] += g;
                            base[W] += g;
                            base[W + 1] += g;
                        }
            }
        });
    const std::size_t planes = static_cast<std::size_t>(N) * C;
    for (std::size_t p = 0; p < planes; ++p)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                const std::size_t ibase = (p * H + static_cast<std::size_t>(oy) * 2) * W + ox * 2;
                const float v00 = x->data[ibase], v01 = x->data[ibase + 1];
                const float v10 = x->data[ibase + W], v11 = x->data[ibase + W + 1];
                const std::size_t oidx = (p * Ho + oy) * Wo + ox;
                if (is_max) {
                    float best = v00;
                    std::size_t bi = ibase;
                    if (v01 > best) { best = v01; bi = ibase + 1; }
                    if (v10 > best) { best = v10; bi = ibase + W; }
                    if (v11 > best) { best = v11; bi = ibase + W + 1; }
                    out->data[oidx] = best;
                    if (argmax) (*argmax)[oidx] = static_cast<std::int32_t>(bi);
                } else {
                    out->data[oidx] = 0.25f * (v00 + v01 + v10 + v11);
                }
            }
    return out;
}

} // namespace

TensorPtr max_pool2(const TensorPtr& x) { return pool2_common(x, true); }
TensorPtr avg_pool2(const TensorPtr& x) { return pool2_common(x, false); }

TensorPtr subsample2(const TensorPtr& x) {
    RSNAS_CHECK(x, "subsample2: null tensor");
    RSNAS_CHECK(x->shape.h % 2 == 0 && x->shape.w % 2 == 0,
                "subsample2: spatial dims must be even, got ", x->shape.str());
    const int N = x->shape.n, C = x->shape.c, H = x->shape.h, W = x->shape.w;
    const int Ho = H / 2, Wo = W / 2;
    auto out = make_node(Shape4{N, C, Ho, Wo}, "subsample2", {x}, [x, W, Wo](Tensor& self) {
        if (!x->requires_grad) return;
        float* dx = x->grad_buffer().data();
        const int Hop = self.shape.h;
        const std::size_t planes = self.data.size() / (static_cast<std::size_t>(Hop) * Wo);
        for (std::size_t p = 0; p < planes; ++p)
            for (int oy = 0; oy < Hop; ++oy)
                for (int ox = 0; ox < Wo; ++ox)
                    dx[(p * (Hop * 2) + oy * 2) * W + ox * 2] += self.grad[(p * Hop + oy) * Wo + ox];
    });
    const std::size_t planes = static_cast<std::size_t>(N) * C;
    for (std::size_t p = 0; p < planes; ++p)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox)
                out->data[(p * Ho + oy) * Wo + ox] = x->data[(p * H + static_cast<std::size_t>(oy) * 2) * W + ox * 2];
    return out;
}

TensorPtr sum_all(const TensorPtr& x) {
    RSNAS_CHECK(x, "sum_all: null tensor");
    auto out = make_node(Shape4{1, 1, 1, 1}, "sum_all", {x}, [x](Tensor& self) {
        if (x->requires_grad)
            K().addc(x->grad_buffer().data(), self.grad[0], x->data.size());
    });
    out->data[0] = K().sum(x->data.data(), x->data.size());
    return out;
}

TensorPtr mse_loss(const TensorPtr& pred, const TensorPtr& target) {
    RSNAS_CHECK(pred && target, "mse_loss: null tensor");
    RSNAS_CHECK(pred->shape == target->shape, "mse_loss: shape mismatch ", pred->shape.str(),
                " vs ", target->shape.str());
    const std::size_t n = pred->data.size();
    auto out = make_node(Shape4{1, 1, 1, 1}, "mse_loss", {pred, target}, [pred, target, n](Tensor& self) {
        const float g = self.grad[0] * 2.0f / static_cast<float>(n);
        if (pred->requires_grad) {
            float* dp = pred->grad_buffer().data();
            for (std::size_t i = 0; i < n; ++i) dp[i] += g * (pred->data[i] - target->data[i]);
        }
        if (target->requires_grad) {
            float* dt = target->grad_buffer().data();
            for (std::size_t i = 0; i < n; ++i) dt[i] -= g * (pred->data[i] - target->data[i]);
        }
    });
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred->data[i]) - target->data[i];
        acc += d * d;
    }
    out->data[0] = static_cast<float>(acc / static_cast<double>(n));
    return out;
}

TensorPtr linear_readout(const TensorPtr& x, std::shared_ptr<std::vector<float>> coeffs) {
    RSNAS_CHECK(x && coeffs, "linear_readout: null input");
    RSNAS_CHECK(coeffs->size() == x->data.size(), "linear_readout: ", coeffs->size(),
                " coeffs for ", x->data.size(), " values");
    const float inv = 1.0f / static_cast<float>(x->data.size());
    auto out = make_node(Shape4{1, 1, 1, 1}, "linear_readout", {x}, [x, coeffs, inv](Tensor& self) {
        if (x->requires_grad)
            K().axpy(x->grad_buffer().data(), coeffs->data(), self.grad[0] * inv, x->data.size());
    });
    double acc = 0.0;
    for (std::size_t i = 0; i < x->data.size(); ++i)
        acc += static_cast<double>(x->data[i]) * (*coeffs)[i];
    out->data[0] = static_cast<float>(acc * inv);
    return out;
}

std::vector<float> softmax(const std::vector<float>& logits) {
    RSNAS_CHECK(!logits.empty(), "softmax: empty logits");
    float mx = logits[0];
    for (float v : logits) mx = std::max(mx, v);
    std::vector<float> out(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        z += out[i];
    }
    const float invz = static_cast<float>(1.0 / z);
    for (auto& v : out) v *= invz;
    return out;
}

// ---- backward sweep ----

namespace {

std::vector<Tensor*> topo_from(const TensorPtr& loss) {
    // Iterative post-order DFS; parents appear before consumers in `order`.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx++].get();
            if (p && !visited.count(p) && !p->parents.empty()) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

void run_backward(const TensorPtr& loss) {
    RSNAS_CHECK(loss, "backward: null loss");
    RSNAS_CHECK(loss->numel() == 1, "backward: loss must be scalar, got ", loss->shape.str());
    loss->check_finite("loss");
    auto order = topo_from(loss);
    loss->grad_buffer()[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (!node->backward_fn || !node->has_grad()) continue;
        for (float g : node->grad) {
            if (!std::isfinite(g))
                throw NumericalError(cat("non-finite gradient entering node '", node->op, "'"));
        }
        node->backward_fn(*node);
    }
}

} // namespace

void backward(const TensorPtr& loss) { run_backward(loss); }

void backward(const TensorPtr& loss, ParamStore& store) {
    run_backward(loss);
    for (const auto& [name, entry] : store.entries())
        entry.tensor->grad_buffer(); // zero-fill params the graph never reached
}

// ---- ParamStore / optimizers ----

void ParamStore::add(const std::string& name, const TensorPtr& t, ParamKind kind) {
    RSNAS_CHECK(t, "ParamStore::add: null tensor for '", name, "'");
    RSNAS_CHECK(!name.empty(), "ParamStore::add: empty name");
    RSNAS_CHECK(entries_.find(name) == entries_.end(), "ParamStore::add: duplicate name '", name, "'");
    t->requires_grad = true;
    entries_.emplace(name, Entry{t, kind});
}

const TensorPtr& ParamStore::get(const std::string& name) const {
    auto it = entries_.find(name);
    RSNAS_CHECK(it != entries_.end(), "ParamStore: no parameter named '", name, "'");
    return it->second.tensor;
}

std::int64_t ParamStore::param_count(std::optional<ParamKind> kind) const {
    std::int64_t total = 0;
    for (const auto& [name, e] : entries_)
        if (!kind || e.kind == *kind) total += e.tensor->numel();
    return total;
}

void zero_grads(ParamStore& store) {
    for (const auto& [name, e] : store.entries()) e.tensor->zero_grad();
}

float clip_grad_norm(ParamStore& store, float max_norm, ParamKind kind) {
    RSNAS_CHECK(max_norm > 0.0f, "clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, e] : store.entries()) {
        if (e.kind != kind || !e.tensor->has_grad()) continue;
        sq += K().sumsq(e.tensor->grad.data(), e.tensor->grad.size());
    }
    const float norm = static_cast<float>(std::sqrt(sq));
    if (norm > max_norm) {
        const float s = max_norm / norm;
        for (const auto& [name, e] : store.entries()) {
            if (e.kind != kind || !e.tensor->has_grad()) continue;
            K().scale(e.tensor->grad.data(), s, e.tensor->grad.size());
        }
    }
    return norm;
}

void SgdOptimizer::step(ParamStore& store) {
    for (const auto& [name, e] : store.entries()) {
        if (e.kind != kind_) continue;
        auto& w = e.tensor->data;
        auto& g = e.tensor->grad_buffer();
        auto& v = velocity_[name];
        if (v.empty()) v.assign(w.size(), 0.0f);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const float geff = g[i] + cfg_.weight_decay * w[i];
            v[i] = cfg_.momentum * v[i] + geff;
            w[i] -= cfg_.lr * v[i];
        }
    }
}

void AdamOptimizer::step(ParamStore& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
    for (const auto& [name, e] : store.entries()) {
        if (e.kind != kind_) continue;
        auto& w = e.tensor->data;
        auto& g = e.tensor->grad_buffer();
        auto& st = state_[name];
        if (st.m.empty()) {
            st.m.assign(w.size(), 0.0f);
            st.v.assign(w.size(), 0.0f);
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            const float geff = g[i] + cfg_.weight_decay * w[i];
            st.m[i] = cfg_.beta1 * st.m[i] + (1.0f - cfg_.beta1) * geff;
            st.v[i] = cfg_.beta2 * st.v[i] + (1.0f - cfg_.beta2) * geff * geff;
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            w[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

// ---- checkpoints ----

namespace {
constexpr char kMagic[8] = {'R', 'S', 'N', 'A', 'S', 'C', 'P', '1'};
static_assert(std::endian::native == std::endian::little,
              "checkpoint blob layout assumes a little-endian host");

const char* kind_name(ParamKind k) { return k == ParamKind::Weight ? "weight" : "arch"; }

ParamKind kind_from_name(const std::string& s) {
    if (s == "weight") return ParamKind::Weight;
    if (s == "arch") return ParamKind::Architecture;
    throw std::invalid_argument(cat("checkpoint: unknown param kind '", s, "'"));
}
} // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& meta_json) {
    json manifest;
    manifest["version"] = 1;
    manifest["meta"] = json::parse(meta_json);
    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, e] : store.entries()) {
        json t;
        t["name"] = name;
        t["kind"] = kind_name(e.kind);
        t["shape"] = {e.tensor->shape.n, e.tensor->shape.c, e.tensor->shape.h, e.tensor->shape.w};
        t["dtype"] = "f32";
        t["offset"] = offset;
        tensors.push_back(std::move(t));
        offset += e.tensor->data.size() * sizeof(float);
    }
    manifest["tensors"] = std::move(tensors);
    const std::string mstr = manifest.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    RSNAS_CHECK(f.good(), "cannot open '", path, "' for writing");
    f.write(kMagic, sizeof(kMagic));
    const std::uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& [name, e] : store.entries())
        f.write(reinterpret_cast<const char*>(e.tensor->data.data()),
                static_cast<std::streamsize>(e.tensor->data.size() * sizeof(float)));
    f.flush();
    if (!f.good()) throw std::runtime_error(cat("failed writing checkpoint '", path, "'"));
}

std::map<std::string, CheckpointEntry> read_checkpoint(const std::string& path,
                                                       std::string* meta_json) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw std::runtime_error(cat("cannot open checkpoint '", path, "'"));
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f.good() || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error(cat("'", path, "' is not a checkpoint (bad magic)"));
    std::uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    RSNAS_CHECK(f.good() && mlen > 0 && mlen < (1ull << 30), "checkpoint manifest length corrupt");
    std::string mstr(mlen, '\0');
    f.read(mstr.data(), static_cast<std::streamsize>(mlen));
    if (!f.good()) throw std::runtime_error(cat("checkpoint '", path, "' truncated in manifest"));
    json manifest = json::parse(mstr);
    if (manifest.at("version").get<int>() != 1)
        throw std::runtime_error(cat("checkpoint '", path, "': unsupported version ",
                                     manifest.at("version").get<int>()));
    if (meta_json) *meta_json = manifest.value("meta", json::object()).dump();

    std::vector<char> blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::map<std::string, CheckpointEntry> out;
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        if (t.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error(cat("checkpoint tensor '", name, "': unsupported dtype"));
        const auto shp = t.at("shape");
        RSNAS_CHECK(shp.size() == 4, "checkpoint tensor '", name, "': shape rank != 4");
        CheckpointEntry e;
        e.shape = Shape4{shp[0].get<int>(), shp[1].get<int>(), shp[2].get<int>(), shp[3].get<int>()};
        e.kind = kind_from_name(t.at("kind").get<std::string>());
        const std::uint64_t off = t.at("offset").get<std::uint64_t>();
        const std::uint64_t bytes = static_cast<std::uint64_t>(e.shape.numel()) * sizeof(float);
        if (off + bytes > blob.size())
            throw std::runtime_error(cat("checkpoint tensor '", name, "' extends past blob end"));
        e.values.resize(static_cast<std::size_t>(e.shape.numel()));
        std::memcpy(e.values.data(), blob.data() + off, static_cast<std::size_t>(bytes));
        out.emplace(name, std::move(e));
    }
    return out;
}

void load_checkpoint(const std::string& path, ParamStore& store) {
    auto entries = read_checkpoint(path);
    for (const auto& [name, e] : store.entries()) {
        auto it = entries.find(name);
        if (it == entries.end())
            throw std::runtime_error(cat("checkpoint missing parameter '", name, "'"));
        if (!(it->second.shape == e.tensor->shape))
            throw std::runtime_error(cat("checkpoint parameter '", name, "' has shape ",
                                         it->second.shape.str(), ", expected ",
                                         e.tensor->shape.str()));
        e.tensor->data = it->second.values;
    }
    for (const auto& [name, e] : entries) {
        if (!store.contains(name))
            throw std::runtime_error(cat("checkpoint has unexpected parameter '", name, "'"));
    }
}

} // namespace rsnas
