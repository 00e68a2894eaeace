#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rsnas/tensor.hpp"

namespace rsnas {

// Default group count for group-norm: 8 when it divides the channel count,
// the channel count itself when smaller, otherwise the largest divisor <= 8.
int pick_gn_groups(int channels);

struct Conv2dLayer {
    TensorPtr w;
    TensorPtr b; // null when the layer is followed by a norm
    int stride = 1, dilation = 1, groups = 1;

    static Conv2dLayer make(int cin, int cout, int k, int stride, int dilation, int groups,
                            bool bias, Rng& rng);

    TensorPtr forward(const TensorPtr& x) const { return conv2d(x, w, b, stride, dilation, groups); }
    void register_params(ParamStore& store, const std::string& prefix) const;
    std::vector<std::pair<std::string, TensorPtr>> named_tensors(const std::string& prefix) const;
    std::int64_t param_count() const;
};

struct GroupNormLayer {
    TensorPtr gamma, beta;
    int groups = 1;

    static GroupNormLayer make(int channels);
    TensorPtr forward(const TensorPtr& x) const { return group_norm(x, groups, gamma, beta); }
    void register_params(ParamStore& store, const std::string& prefix) const;
    std::vector<std::pair<std::string, TensorPtr>> named_tensors(const std::string& prefix) const;
};

// One conv layer of a transformation pipeline. A depthwise-separable unit
// (depthwise k x k followed by pointwise 1x1) counts as a single layer and
// produces a single representation, exactly like a standard conv.
struct ConvUnit {
    Conv2dLayer conv;
    std::optional<Conv2dLayer> pointwise;
    std::optional<GroupNormLayer> norm;
    bool relu_after = true;

    // Standard (full) convolution; gn=false+bias=true yields a bare conv unit.
    static ConvUnit standard(int cin, int cout, int k, int stride, int dilation, bool gn,
                             bool relu, bool bias, Rng& rng);
    // Depthwise k x k (optionally dilated) then pointwise 1x1, one norm+relu after.
    static ConvUnit separable(int cin, int cout, int k, int dilation, bool gn, bool relu,
                              Rng& rng);

    // `counter`, when given, is incremented once per unit execution.
    TensorPtr forward(const TensorPtr& x, std::int64_t* counter = nullptr) const;
    void register_params(ParamStore& store, const std::string& prefix) const;
    std::vector<std::pair<std::string, TensorPtr>> named_tensors(const std::string& prefix) const;
    void copy_from(const ConvUnit& other);
    std::int64_t param_count() const;
};

// Bare 1x1 prediction head: small-variance weights, constant bias init.
Conv2dLayer make_prediction_head(int c, int out, float bias_init, Rng& rng);

} // namespace rsnas
