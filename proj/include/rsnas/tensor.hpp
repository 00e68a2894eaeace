#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rsnas/common.hpp"

namespace rsnas {

// Dense 4-D float32 tensor, NCHW. Non-image data is carried in degenerate
// dims: scalars as (1,1,1,1), per-channel vectors as (1,C,1,1).
struct Shape4 {
    int n = 1, c = 1, h = 1, w = 1;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;
    std::string str() const { return cat("(", n, ",", c, ",", h, ",", w, ")"); }
};

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    Shape4 shape;
    std::vector<float> data;
    std::vector<float> grad; // empty until first accumulation
    bool requires_grad = false;

    // Tape linkage; leaves have no parents and no backward_fn.
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;
    const char* op = "leaf";

    static TensorPtr zeros(Shape4 s, bool requires_grad = false);
    static TensorPtr full(Shape4 s, float value, bool requires_grad = false);
    static TensorPtr from_vector(Shape4 s, std::vector<float> values, bool requires_grad = false);
    static TensorPtr randn(Shape4 s, Rng& rng, float mean, float stddev, bool requires_grad = false);

    std::int64_t numel() const { return shape.numel(); }

    float& at(int n_, int c_, int y_, int x_) {
        return data[static_cast<std::size_t>(((static_cast<std::int64_t>(n_) * shape.c + c_) * shape.h + y_) * shape.w + x_)];
    }
    float at(int n_, int c_, int y_, int x_) const {
        return data[static_cast<std::size_t>(((static_cast<std::int64_t>(n_) * shape.c + c_) * shape.h + y_) * shape.w + x_)];
    }

    // Value of a (1,1,1,1) tensor.
    float item() const;

    // Grad buffer, zero-filled on first use.
    std::vector<float>& grad_buffer();
    bool has_grad() const { return !grad.empty(); }
    void zero_grad() { grad.clear(); }

    void check_finite(const std::string& what) const;
};

// When false, tape ops skip recording parents/backward closures (evaluation
// passes). Forward numerics are unchanged.
class GradMode {
public:
    static bool enabled();
    static void set(bool on);
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev); }
};

// ---- tape ops ----

// k in {1,3}, dilation in {1,2,3}, stride in {1,2}; padding is implicit,
// dilation*(k-1)/2, so stride-1 convs preserve spatial size.
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                 int stride, int dilation, int groups);
TensorPtr group_norm(const TensorPtr& x, int num_groups, const TensorPtr& gamma,
                     const TensorPtr& beta, float eps = 1e-5f);
TensorPtr relu(const TensorPtr& x);
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& x, float s);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
// Elementwise a / b; the caller keeps b away from zero.
TensorPtr div(const TensorPtr& a, const TensorPtr& b);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr exp(const TensorPtr& x);
// ln(max(x, floor)); gradient is zero below the floor.
TensorPtr log(const TensorPtr& x, float floor = 1e-12f);
// Gradient passes only strictly inside [lo, hi].
TensorPtr clamp(const TensorPtr& x, float lo, float hi);
// Channels [c_begin, c_end) as a fresh tensor.
TensorPtr channel_slice(const TensorPtr& x, int c_begin, int c_end);
inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) { return add(a, scale(b, -1.0f)); }
TensorPtr concat_channels(const std::vector<TensorPtr>& xs);
// Softmax over the channel dim of a (1,K,1,1) tensor.
TensorPtr softmax_channels(const TensorPtr& logits);
// out = sum_k weights[k] * items[k]; weights is (1,K,1,1), items all same shape.
TensorPtr weighted_sum(const std::vector<TensorPtr>& items, const TensorPtr& weights);
TensorPtr global_avg_pool(const TensorPtr& x);
TensorPtr max_pool2(const TensorPtr& x);   // 2x2, stride 2
TensorPtr avg_pool2(const TensorPtr& x);   // 2x2, stride 2
TensorPtr subsample2(const TensorPtr& x);  // strided identity, stride 2
TensorPtr sum_all(const TensorPtr& x);     // -> (1,1,1,1)
// Mean of (pred-target)^2 over all elements.
TensorPtr mse_loss(const TensorPtr& pred, const TensorPtr& target);
// Scalar loss = dot(x, coeffs) / x.numel() with constant coeffs; smooth probe
// readout for gradient audits.
TensorPtr linear_readout(const TensorPtr& x, std::shared_ptr<std::vector<float>> coeffs);

// Stable softmax utility over plain vectors (derivation, logging).
std::vector<float> softmax(const std::vector<float>& logits);

// ---- parameters ----

enum class ParamKind { Weight, Architecture };

class ParamStore {
public:
    struct Entry {
        TensorPtr tensor;
        ParamKind kind;
    };

    // Name must be unique; tensor is marked requires_grad.
    void add(const std::string& name, const TensorPtr& t, ParamKind kind);
    const TensorPtr& get(const std::string& name) const;
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    std::size_t size() const { return entries_.size(); }

    // Iteration is name-sorted (std::map) so every traversal is deterministic.
    const std::map<std::string, Entry>& entries() const { return entries_; }

    std::int64_t param_count(std::optional<ParamKind> kind = std::nullopt) const;

private:
    std::map<std::string, Entry> entries_;
};

// Reverse-mode sweep from a scalar loss. Touches only nodes reachable from
// `loss`; afterwards every parameter in `store` has a grad buffer (zeros if
// unreachable). Throws NumericalError naming the first node whose incoming
// gradient contains NaN/Inf.
void backward(const TensorPtr& loss, ParamStore& store);
void backward(const TensorPtr& loss);

void zero_grads(ParamStore& store);

// Global L2 clip over one partition; returns the pre-clip norm.
float clip_grad_norm(ParamStore& store, float max_norm, ParamKind kind);

struct SgdConfig {
    float lr = 0.01f;
    float momentum = 0.9f;
    float weight_decay = 0.0f;
};

class SgdOptimizer {
public:
    SgdOptimizer(SgdConfig cfg, ParamKind kind) : cfg_(cfg), kind_(kind) {}
    void step(ParamStore& store);
    void set_lr(float lr) { cfg_.lr = lr; }
    float lr() const { return cfg_.lr; }

private:
    SgdConfig cfg_;
    ParamKind kind_;
    std::map<std::string, std::vector<float>> velocity_;
};

struct AdamConfig {
    float lr = 3e-4f;
    float beta1 = 0.5f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f; // classic L2, added to the gradient
};

class AdamOptimizer {
public:
    AdamOptimizer(AdamConfig cfg, ParamKind kind) : cfg_(cfg), kind_(kind) {}
    void step(ParamStore& store);

private:
    AdamConfig cfg_;
    ParamKind kind_;
    struct State {
        std::vector<float> m, v;
    };
    std::map<std::string, State> state_;
    std::int64_t t_ = 0;
};

// ---- checkpoints ----
// Single file: magic, manifest length, JSON manifest (name/kind/shape/dtype/
// offset + optional meta), then a flat little-endian float32 blob. Round-trips
// bit-exactly.

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& meta_json = "{}");

struct CheckpointEntry {
    Shape4 shape;
    ParamKind kind;
    std::vector<float> values;
};

// Raw read; callers rebuild structures from names.
std::map<std::string, CheckpointEntry> read_checkpoint(const std::string& path,
                                                       std::string* meta_json = nullptr);

// Restore into an existing store; names and shapes must match exactly.
void load_checkpoint(const std::string& path, ParamStore& store);

namespace testing {
// Fault fixture: when on, relu backward leaks gradient through negative
// inputs. Exists so the gradient audit can prove it catches a broken op.
void set_relu_backward_fault(bool on);
bool relu_backward_fault();
} // namespace testing

} // namespace rsnas
