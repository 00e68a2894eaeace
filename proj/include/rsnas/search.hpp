#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rsnas/supernet.hpp"

namespace rsnas {

// ---- discrete architectures ----

struct GenotypeInput {
    int from = 0; // 0 = cell input, j = intermediate node j
    TransformationId trans;
    bool operator==(const GenotypeInput&) const = default;
};

struct GenotypeNode {
    std::vector<GenotypeInput> inputs; // sorted by `from`, one for node 1, two otherwise
    bool operator==(const GenotypeNode&) const = default;
};

struct GenotypeGroup {
    std::vector<GenotypeNode> nodes;
    bool operator==(const GenotypeGroup&) const = default;
};

struct Genotype {
    std::vector<GenotypeGroup> groups;
    bool operator==(const Genotype&) const = default;
};

// Per edge: argmax over the non-none candidates (softmax weight; ties fall to
// the lowest canonical index). Per node: keep the min(2, j) edges with the
// highest winning weight (ties fall to the lowest predecessor), listed by
// ascending predecessor.
Genotype derive_genotype(const AlphaTable& alphas, const CandidateSet& set);

// True once the latest derived architecture repeats the previous one.
bool should_terminate(const std::vector<Genotype>& history);

Genotype random_genotype(Rng& rng, const CandidateSet& set, int nodes = CellTopology::kNodes,
                         int groups = AlphaTable::kGroups);

// Stable JSON text: {"version":1,"groups":[{"nodes":[{"inputs":[{"from":..,
// "trans":".."}]}]}]}. parse_genotype rejects unknown keys, bad names, "none",
// out-of-order/out-of-range predecessors, and wrong versions (ConfigError).
std::string serialize_genotype(const Genotype& g);
Genotype parse_genotype(const std::string& text);

// Number of derivable discrete architectures: per group
// prod_j C(j, min(2,j)) * K^min(2,j), raised to the group count.
std::uint64_t count_discrete_paths(int nodes, int candidates, int groups);
// Brute force over a small space; counts distinct serialized genotypes.
std::uint64_t enumerate_discrete_paths(int nodes, int candidates);

// ---- derived (discrete) networks ----

// Discrete network realizing a genotype: M fresh-weight cells per group (no
// parameter aliasing, no supernet weight inheritance), same macro wiring and
// heads as the supernet.
class DerivedCell {
public:
    DerivedCell(const GenotypeGroup& group, int c, int c_prime, int variant_max, Rng& rng);

    TensorPtr forward(const TensorPtr& x);
    void register_params(ParamStore& store, const std::string& prefix) const;
    std::int64_t param_count() const;

private:
    struct DiscreteEdge {
        int from;
        ConvUnit entry;
        std::vector<ConvUnit> pipeline;
        ConvUnit exit;
    };
    std::vector<std::vector<DiscreteEdge>> nodes_;
    ConvUnit reduce_;
};

class DerivedNetwork {
public:
    DerivedNetwork(const Genotype& genotype, const SupernetConfig& cfg, Rng& rng);

    ModuleOutput forward(const TensorPtr& x);
    void register_params(ParamStore& store) const;
    std::int64_t param_count() const;
    const SupernetConfig& config() const { return cfg_; }

private:
    SupernetConfig cfg_;
    std::vector<DerivedCell> cells_; // groups * M, fresh weights each
    Conv2dLayer box_head_, ctr_head_, cls_head_;
};

// ---- bilevel search loop ----

struct ScheduleConfig {
    int total_iters = 3000;
    int derive_every = 600;
    int batch_size = 4;
    float w_lr = 0.004f;
    int w_lr_decay_iter = 2400; // divided once from this iteration on
    float w_lr_decay_factor = 10.0f;
    float w_momentum = 0.9f;
    float w_weight_decay = 1e-4f;
    float clip_max = 20.0f;
    float alpha_lr = 3e-4f;
    float alpha_beta1 = 0.5f;
    float alpha_beta2 = 0.999f;
    float alpha_weight_decay = 1e-3f;
    float val_fraction = 0.5f;

    void validate() const;
};

enum class Split { Train, Val };

// Produces the loss for one fresh batch of the given split at `iter`.
using SearchLossFn = std::function<TensorPtr(Supernet&, int iter, Split)>;

struct SearchRecord {
    int iter = 0;
    double l_train = 0.0;
    double l_val = 0.0;
    double alpha_entropy_per_edge = 0.0;
    double grad_norm_pre_clip = 0.0;
};

struct SearchResult {
    Genotype genotype;
    std::vector<Genotype> history;
    std::vector<SearchRecord> records;
    int iters_run = 0;
    bool converged_early = false;
};

// Alternates one alpha update (Adam, validation batch) with one weight update
// (SGD + momentum, train batch, clipped); derives a genotype every
// `derive_every` iterations and stops early when the derivation repeats.
class SearchDriver {
public:
    SearchDriver(Supernet& net, ScheduleConfig cfg,
                 const std::function<void(ParamStore&)>& register_extra = nullptr);

    SearchRecord step(const SearchLossFn& loss_fn);
    SearchResult run(const SearchLossFn& loss_fn);

    int iter() const { return iter_; }
    float current_w_lr() const { return w_opt_.lr(); }
    ParamStore& params() { return store_; }

private:
    Supernet& net_;
    ScheduleConfig cfg_;
    CandidateSet set_;
    ParamStore store_;
    AdamOptimizer alpha_opt_;
    SgdOptimizer w_opt_;
    int iter_ = 0;
};

} // namespace rsnas
