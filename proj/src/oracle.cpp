#include "rsnas/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

#include "rsnas/common.hpp"

namespace rsnas {

namespace {

double max_abs_diff(const TensorPtr& a, const TensorPtr& b) {
    RSNAS_CHECK((a->shape == b->shape), "max_abs_diff: shape mismatch ", a->shape.str(), " vs ",
                b->shape.str());
    double worst = 0.0;
    for (std::size_t i = 0; i < a->data.size(); ++i)
        worst = std::max(worst,
                         std::abs(static_cast<double>(a->data[i]) - static_cast<double>(b->data[i])));
    return worst;
}

// Copies every tensor of `src` into `dst`, rejecting structure or shape drift
// with a message naming both layer paths.
void copy_unit_checked(const ConvUnit& src, ConvUnit& dst, const std::string& src_path,
                       const std::string& dst_path) {
    auto src_named = src.named_tensors("");
    auto dst_named = dst.named_tensors("");
    if (src_named.size() != dst_named.size())
        throw ConfigError(cat("tie_weights: '", dst_path, "' has ", dst_named.size(),
                              " tensors but shared '", src_path, "' has ", src_named.size()));
    for (std::size_t i = 0; i < src_named.size(); ++i) {
        const auto& [sname, st] = src_named[i];
        const auto& [dname, dt] = dst_named[i];
        if (sname != dname || !(st->shape == dt->shape))
            throw ConfigError(cat("tie_weights: '", dst_path, dname, "' ", dt->shape.str(),
                                  " does not match shared '", src_path, sname, "' ",
                                  st->shape.str()));
        dt->data = st->data;
    }
}

} // namespace

int TieMap::fan_out(const std::string& shared_path) const {
    int n = 0;
    for (const auto& [unshared, shared] : bindings)
        if (shared == shared_path) ++n;
    return n;
}

TieMap make_tie_map(const BlockTopology& topo) {
    TieMap map;
    for (Stream s : {Stream::Std, Stream::Sep}) {
        const std::string sn = stream_name(s);
        for (const VariantSpec& v : topo.variants) {
            const std::string cand = cat(sn, "_t", v.variant);
            for (int d = 0; d < v.depth; ++d)
                map.bindings[cat(cand, "/l", d)] = cat(sn, "/stem", d);
            if (!v.is_stem_tap())
                map.bindings[cat(cand, "/l", v.depth)] = cat(sn, "/branch_t", v.variant);
        }
    }
    return map;
}

TieMap tie_weights(const SharedBlock& shared, UnsharedBlock& unshared) {
    if (shared.decoupled())
        throw ConfigError(
            "tie_weights: shared block is decoupled; adapters have no unshared counterpart");
    if (shared.topology().variants.size() != unshared.topology().variants.size())
        throw ConfigError(cat("tie_weights: topology mismatch (", shared.topology().variants.size(),
                              " vs ", unshared.topology().variants.size(), " variants)"));
    TieMap map = make_tie_map(shared.topology());
    for (const auto& [dst_path, src_path] : map.bindings) {
        const ConvUnit* src = shared.unit(src_path);
        ConvUnit* dst = unshared.unit(dst_path);
        if (!src || !dst)
            throw ConfigError(cat("tie_weights: missing unit for binding '", dst_path, "' <- '",
                                  src_path, "'"));
        copy_unit_checked(*src, *dst, src_path, dst_path);
    }
    return map;
}

std::size_t tie_supernet_weights(const ParamStore& shared, ParamStore& unshared,
                                 const TieMap& block_map) {
    std::size_t copied = 0;
    for (const auto& [name, entry] : unshared.entries()) {
        std::string src_name = name;
        if (!shared.contains(src_name)) {
            src_name.clear();
            for (const auto& [dst_path, src_path] : block_map.bindings) {
                const std::string needle = "/" + dst_path + "/";
                const std::size_t pos = name.find(needle);
                if (pos == std::string::npos) continue;
                src_name = name.substr(0, pos + 1) + src_path + name.substr(pos + needle.size() - 1);
                break;
            }
            if (src_name.empty())
                throw ConfigError(cat("tie_supernet_weights: no shared counterpart for '", name,
                                      "'"));
            if (!shared.contains(src_name))
                throw ConfigError(cat("tie_supernet_weights: rewrote '", name, "' to '", src_name,
                                      "' which is absent from the shared store"));
        }
        const TensorPtr& src = shared.get(src_name);
        if (!(src->shape == entry.tensor->shape))
            throw ConfigError(cat("tie_supernet_weights: '", name, "' ", entry.tensor->shape.str(),
                                  " does not match shared '", src_name, "' ", src->shape.str()));
        entry.tensor->data = src->data;
        ++copied;
    }
    return copied;
}

EquivalenceReport equivalence_check(SharedBlock& shared, UnsharedBlock& unshared, int trials,
                                    std::uint64_t seed, int height, int width) {
    RSNAS_CHECK(trials >= 1, "equivalence_check: trials must be >= 1, got ", trials);
    const CandidateSet& set = shared.candidates();
    // The blocks' inner width: exit maps c' back to c, so its input channel
    // count is c'.
    const int c_prime = shared.unit("exit")->conv.w->shape.c;

    EquivalenceReport report;
    report.trials = trials;
    for (const TransformationId& t : set.convs) report.candidate_names.push_back(t.name());
    report.per_candidate.assign(set.convs.size(), 0.0);

    NoGradGuard ng;
    Rng rng(seed);
    for (int trial = 0; trial < trials; ++trial) {
        TensorPtr x_prime = Tensor::randn({1, c_prime, height, width}, rng, 0.0f, 1.0f);
        std::vector<TensorPtr> a = shared.candidate_outputs(x_prime);
        std::vector<TensorPtr> b = unshared.candidate_outputs(x_prime);
        for (std::size_t i = 0; i < set.convs.size(); ++i) {
            const double d = max_abs_diff(a[i], b[i]);
            report.per_candidate[i] = std::max(report.per_candidate[i], d);
            report.max_abs_diff = std::max(report.max_abs_diff, d);
        }
    }
    return report;
}

double module_equivalence_check(Supernet& a, Supernet& b, int trials, std::uint64_t seed,
                                int height, int width) {
    RSNAS_CHECK(trials >= 1, "module_equivalence_check: trials must be >= 1, got ", trials);
    if (a.config().c != b.config().c || a.config().num_classes != b.config().num_classes)
        throw ConfigError("module_equivalence_check: supernets disagree on channels or classes");
    NoGradGuard ng;
    Rng rng(seed);
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        TensorPtr x = Tensor::randn({1, a.config().c, height, width}, rng, 0.0f, 1.0f);
        ModuleOutput oa = a.forward(x);
        ModuleOutput ob = b.forward(x);
        worst = std::max(worst, max_abs_diff(oa.g1, ob.g1));
        worst = std::max(worst, max_abs_diff(oa.g2, ob.g2));
        worst = std::max(worst, max_abs_diff(oa.box, ob.box));
        worst = std::max(worst, max_abs_diff(oa.centerness, ob.centerness));
        worst = std::max(worst, max_abs_diff(oa.cls, ob.cls));
    }
    return worst;
}

GradAuditReport grad_check_supernet(Supernet& net, ParamStore& store, int probes, double eps,
                                    std::uint64_t seed, bool alpha_only, int height, int width) {
    RSNAS_CHECK(probes >= 1, "grad_check_supernet: probes must be >= 1, got ", probes);
    RSNAS_CHECK(eps > 0.0, "grad_check_supernet: eps must be positive, got ", eps);

    Rng rng(seed);
    Rng input_rng = rng.fork("input");
    TensorPtr x = Tensor::randn({1, net.config().c, height, width}, input_rng, 0.0f, 1.0f);

    // Fixed random readout coefficients over all three head outputs so every
    // parameter and every alpha row influences the scalar.
    ModuleOutput probe_out = [&]() {
        NoGradGuard ng;
        return net.forward(x);
    }();
    Rng coeff_rng = rng.fork("coeffs");
    auto make_coeffs = [&coeff_rng](const TensorPtr& t) {
        auto c = std::make_shared<std::vector<float>>(t->data.size());
        for (float& v : *c) v = static_cast<float>(coeff_rng.normal());
        return c;
    };
    auto box_c = make_coeffs(probe_out.box);
    auto ctr_c = make_coeffs(probe_out.centerness);
    auto cls_c = make_coeffs(probe_out.cls);

    auto loss_tensor = [&]() {
        ModuleOutput out = net.forward(x);
        return add(add(linear_readout(out.box, box_c), linear_readout(out.centerness, ctr_c)),
                   linear_readout(out.cls, cls_c));
    };
    auto loss_value = [&]() {
        NoGradGuard ng;
        return static_cast<double>(loss_tensor()->data[0]);
    };

    std::vector<std::string> weight_names, alpha_names;
    for (const auto& [name, entry] : store.entries())
        (entry.kind == ParamKind::Architecture ? alpha_names : weight_names).push_back(name);
    RSNAS_CHECK(!alpha_names.empty(), "grad_check_supernet: store has no architecture params");
    RSNAS_CHECK(alpha_only || !weight_names.empty(),
                "grad_check_supernet: store has no weight params");

    // One backward supplies analytic gradients for every probe.
    zero_grads(store);
    backward(loss_tensor(), store);

    GradAuditReport report;
    report.probes = probes;
    std::set<std::pair<std::string, std::size_t>> seen;
    Rng pick_rng = rng.fork("probes");
    for (int p = 0; p < probes; ++p) {
        const bool pick_alpha = alpha_only || (p % 2 == 1);
        const std::vector<std::string>& pool = pick_alpha ? alpha_names : weight_names;
        std::string name;
        std::size_t idx = 0;
        for (int attempt = 0; attempt < 64; ++attempt) {
            name = pool[static_cast<std::size_t>(pick_rng.below(pool.size()))];
            idx = static_cast<std::size_t>(pick_rng.below(store.get(name)->data.size()));
            if (seen.insert({name, idx}).second) break;
        }
        (pick_alpha ? report.alpha_probes : report.weight_probes)++;

        const TensorPtr& t = store.get(name);
        const double analytic = t->has_grad() ? static_cast<double>(t->grad[idx]) : 0.0;
        const float orig = t->data[idx];
        t->data[idx] = orig + static_cast<float>(eps);
        const double up = loss_value();
        t->data[idx] = orig - static_cast<float>(eps);
        const double down = loss_value();
        t->data[idx] = orig;
        const double numeric = (up - down) / (2.0 * eps);

        // Relative error with a floor absorbing float32 forward noise on
        // near-zero gradients.
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 0.05});
        GradProbeResult r{name, idx, analytic, numeric, std::abs(analytic - numeric) / denom};
        if (report.results.empty() || r.rel_err > report.worst_rel_err) {
            report.worst_rel_err = r.rel_err;
            report.worst = r;
        }
        report.results.push_back(std::move(r));
    }
    return report;
}

} // namespace rsnas
