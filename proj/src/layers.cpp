#include "rsnas/layers.hpp"

#include <cmath>
#include <cstring>

namespace rsnas {

int pick_gn_groups(int channels) {
    RSNAS_CHECK(channels >= 1, "pick_gn_groups: channels=", channels);
    if (channels <= 8) return channels;
    if (channels % 8 == 0) return 8;
    for (int g = 8; g >= 2; --g)
        if (channels % g == 0) return g;
    return 1;
}

Conv2dLayer Conv2dLayer::make(int cin, int cout, int k, int stride, int dilation, int groups,
                              bool bias, Rng& rng) {
    RSNAS_CHECK(cin % groups == 0 && cout % groups == 0, "conv layer: groups=", groups,
                " incompatible with channels (", cin, ",", cout, ")");
    Conv2dLayer l;
    l.stride = stride;
    l.dilation = dilation;
    l.groups = groups;
    const int fan_in = (cin / groups) * k * k;
    const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
    l.w = Tensor::randn({cout, cin / groups, k, k}, rng, 0.0f, stddev, /*requires_grad=*/true);
    if (bias) l.b = Tensor::zeros({1, cout, 1, 1}, /*requires_grad=*/true);
    return l;
}

void Conv2dLayer::register_params(ParamStore& store, const std::string& prefix) const {
    for (const auto& [name, t] : named_tensors(prefix)) store.add(name, t, ParamKind::Weight);
}

std::vector<std::pair<std::string, TensorPtr>> Conv2dLayer::named_tensors(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back(prefix + "/w", w);
    if (b) out.emplace_back(prefix + "/b", b);
    return out;
}

std::int64_t Conv2dLayer::param_count() const {
    return w->numel() + (b ? b->numel() : 0);
}

GroupNormLayer GroupNormLayer::make(int channels) {
    GroupNormLayer l;
    l.groups = pick_gn_groups(channels);
    l.gamma = Tensor::full({1, channels, 1, 1}, 1.0f, /*requires_grad=*/true);
    l.beta = Tensor::zeros({1, channels, 1, 1}, /*requires_grad=*/true);
    return l;
}

void GroupNormLayer::register_params(ParamStore& store, const std::string& prefix) const {
    for (const auto& [name, t] : named_tensors(prefix)) store.add(name, t, ParamKind::Weight);
}

std::vector<std::pair<std::string, TensorPtr>> GroupNormLayer::named_tensors(
    const std::string& prefix) const {
    return {{prefix + "/gamma", gamma}, {prefix + "/beta", beta}};
}

ConvUnit ConvUnit::standard(int cin, int cout, int k, int stride, int dilation, bool gn,
                            bool relu, bool bias, Rng& rng) {
    ConvUnit u;
    u.conv = Conv2dLayer::make(cin, cout, k, stride, dilation, 1, bias, rng);
    if (gn) u.norm = GroupNormLayer::make(cout);
    u.relu_after = relu;
    return u;
}

ConvUnit ConvUnit::separable(int cin, int cout, int k, int dilation, bool gn, bool relu,
                             Rng& rng) {
    ConvUnit u;
    u.conv = Conv2dLayer::make(cin, cin, k, 1, dilation, cin, false, rng); // depthwise
    u.pointwise = Conv2dLayer::make(cin, cout, 1, 1, 1, 1, false, rng);
    if (gn) u.norm = GroupNormLayer::make(cout);
    u.relu_after = relu;
    return u;
}

TensorPtr ConvUnit::forward(const TensorPtr& x, std::int64_t* counter) const {
    TensorPtr y = conv.forward(x);
    if (pointwise) y = pointwise->forward(y);
    if (norm) y = norm->forward(y);
    if (relu_after) y = relu(y);
    if (counter) ++*counter;
    return y;
}

void ConvUnit::register_params(ParamStore& store, const std::string& prefix) const {
    for (const auto& [name, t] : named_tensors(prefix)) store.add(name, t, ParamKind::Weight);
}

std::vector<std::pair<std::string, TensorPtr>> ConvUnit::named_tensors(
    const std::string& prefix) const {
    auto out = conv.named_tensors(prefix + "/conv");
    if (pointwise) {
        auto more = pointwise->named_tensors(prefix + "/pw");
        out.insert(out.end(), more.begin(), more.end());
    }
    if (norm) {
        auto more = norm->named_tensors(prefix + "/gn");
        out.insert(out.end(), more.begin(), more.end());
    }
    return out;
}

void ConvUnit::copy_from(const ConvUnit& other) {
    auto dst = named_tensors("");
    auto src = other.named_tensors("");
    RSNAS_CHECK(dst.size() == src.size(), "ConvUnit::copy_from: structure mismatch (", dst.size(),
                " vs ", src.size(), " tensors)");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        RSNAS_CHECK(dst[i].first == src[i].first && dst[i].second->shape == src[i].second->shape,
                    "ConvUnit::copy_from: tensor mismatch at '", dst[i].first, "'");
        dst[i].second->data = src[i].second->data;
    }
}

std::int64_t ConvUnit::param_count() const {
    std::int64_t total = conv.param_count();
    if (pointwise) total += pointwise->param_count();
    if (norm) total += norm->gamma->numel() + norm->beta->numel();
    return total;
}

Conv2dLayer make_prediction_head(int c, int out, float bias_init, Rng& rng) {
    Conv2dLayer head = Conv2dLayer::make(c, out, 1, 1, 1, 1, /*bias=*/true, rng);
    for (float& v : head.w->data) v = static_cast<float>(rng.normal(0.0, 0.01));
    for (float& v : head.b->data) v = bias_init;
    return head;
}

} // namespace rsnas
