#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "rsnas/layers.hpp"

namespace rsnas {

enum class Stream { Std = 0, Sep = 1 };

const char* stream_name(Stream s);

// Candidate transformation: a (stream, variant) pair or the explicit none.
// Canonical order is std_t1..std_t6, sep_t1..sep_t6, none.
struct TransformationId {
    Stream stream = Stream::Std;
    int variant = 0; // 1..6; 0 for none
    bool none = false;

    static TransformationId make(Stream s, int variant);
    static TransformationId make_none();
    static TransformationId from_name(const std::string& name);

    std::string name() const;
    int receptive_field() const; // throws for none
    bool operator==(const TransformationId&) const = default;
};

// Per-variant wiring inside one stream of the transformation block:
// `depth` plain 3x3 convs below; dilation 1 taps the stem output directly,
// dilation > 1 appends one dilated depthwise-separable 3x3 on that tap.
struct VariantSpec {
    int variant;
    int depth;
    int dilation;

    bool is_stem_tap() const { return dilation == 1; }
    int receptive_field() const { return 1 + 2 * depth + (is_stem_tap() ? 0 : 2 * dilation); }
};

struct BlockTopology {
    std::vector<VariantSpec> variants; // ascending variant order
    int stem_depth = 0;

    // t1..variant_max; variant_max=6 is the detection space, 5 the
    // classification ablation space.
    static BlockTopology for_variants(int variant_max);

    const VariantSpec& spec(int variant) const;
    int representations_per_stream() const; // stem taps + dilated branches
    int unshared_layers_per_stream() const; // total conv layers when nothing is shared
    // A tap variant needs a decoupling adapter iff its representation also
    // feeds other transformations.
    bool needs_adapter(int variant) const;
};

// Ordered candidate list for one edge: all (stream, variant) convs + none last.
struct CandidateSet {
    std::vector<TransformationId> convs;

    static CandidateSet for_variants(int variant_max);
    static CandidateSet detection() { return for_variants(6); }

    int size() const { return static_cast<int>(convs.size()) + 1; }
    int none_index() const { return static_cast<int>(convs.size()); }
    const TransformationId& conv(int idx) const { return convs.at(static_cast<std::size_t>(idx)); }
    int index_of(const TransformationId& t) const; // throws if absent
    std::vector<int> receptive_field_multiset() const; // sorted RFs of conv candidates
};

// One edge's transformation block: entry 1x1 (c -> c'), the candidate
// pipelines (c' -> c'), exit 1x1 (c' -> c). candidate_outputs() returns one
// tensor per candidate in canonical order; the trailing none is the zero map.
class TransformBlock {
public:
    virtual ~TransformBlock() = default;

    virtual TensorPtr entry_forward(const TensorPtr& x) = 0;
    virtual std::vector<TensorPtr> candidate_outputs(const TensorPtr& x_prime) = 0;
    virtual TensorPtr exit_forward(const TensorPtr& mixed) = 0;

    virtual const CandidateSet& candidates() const = 0;
    // Topology-derived count of conv representations materialized per forward.
    virtual int representation_count() const = 0;
    virtual void register_params(ParamStore& store, const std::string& prefix) const = 0;
    virtual std::int64_t param_count() const = 0;

    // Unit lookup by block-relative path (weight tying); null when absent.
    virtual const ConvUnit* unit(const std::string& path) const = 0;
    virtual ConvUnit* unit(const std::string& path) = 0;
    virtual std::vector<std::string> unit_paths() const = 0;

    // Instrumented forward-pass counters.
    std::int64_t representation_convs_run() const { return repr_convs_; }
    std::int64_t adapter_convs_run() const { return adapter_convs_; }
    void reset_counters() { repr_convs_ = adapter_convs_ = 0; }

protected:
    std::int64_t repr_convs_ = 0;
    std::int64_t adapter_convs_ = 0;
};

// Representation-sharing block: per stream one stem of plain convs whose taps
// are p1..p3, dilated branches hanging off the taps, and (optionally) 1x1+ReLU
// adapters decoupling the tapped outputs from the stem.
class SharedBlock : public TransformBlock {
public:
    SharedBlock(int c, int c_prime, int variant_max, bool decoupled, Rng& rng);

    TensorPtr entry_forward(const TensorPtr& x) override;
    std::vector<TensorPtr> candidate_outputs(const TensorPtr& x_prime) override;
    TensorPtr exit_forward(const TensorPtr& mixed) override;

    const CandidateSet& candidates() const override { return set_; }
    int representation_count() const override;
    void register_params(ParamStore& store, const std::string& prefix) const override;
    std::int64_t param_count() const override;
    const ConvUnit* unit(const std::string& path) const override;
    ConvUnit* unit(const std::string& path) override;
    std::vector<std::string> unit_paths() const override;

    bool decoupled() const { return decoupled_; }
    const BlockTopology& topology() const { return topo_; }

private:
    struct StreamUnits {
        std::vector<ConvUnit> stem;                  // stem[d] produces p_{d+1}
        std::vector<std::pair<int, ConvUnit>> branches; // (variant, dilated unit)
        std::vector<std::pair<int, ConvUnit>> adapters; // (variant, 1x1+relu)
    };

    BlockTopology topo_;
    CandidateSet set_;
    bool decoupled_;
    std::array<StreamUnits, 2> streams_;
    ConvUnit entry_;
    ConvUnit exit_;
};

// Baseline block without reuse: each candidate owns a full private pipeline.
class UnsharedBlock : public TransformBlock {
public:
    UnsharedBlock(int c, int c_prime, int variant_max, Rng& rng);

    TensorPtr entry_forward(const TensorPtr& x) override;
    std::vector<TensorPtr> candidate_outputs(const TensorPtr& x_prime) override;
    TensorPtr exit_forward(const TensorPtr& mixed) override;

    const CandidateSet& candidates() const override { return set_; }
    int representation_count() const override;
    void register_params(ParamStore& store, const std::string& prefix) const override;
    std::int64_t param_count() const override;
    const ConvUnit* unit(const std::string& path) const override;
    ConvUnit* unit(const std::string& path) override;
    std::vector<std::string> unit_paths() const override;

    const BlockTopology& topology() const { return topo_; }

private:
    BlockTopology topo_;
    CandidateSet set_;
    // pipelines in candidate order (streams x variants)
    std::vector<std::vector<ConvUnit>> pipelines_;
    ConvUnit entry_;
    ConvUnit exit_;
};

// Fresh pipeline realizing one candidate (derived networks, unshared block).
std::vector<ConvUnit> make_candidate_pipeline(Stream stream, const VariantSpec& spec, int c_prime,
                                              Rng& rng);

int count_representations(const TransformBlock& block);

} // namespace rsnas
