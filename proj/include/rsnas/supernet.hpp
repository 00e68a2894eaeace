#pragma once

#include <memory>
#include <string>
#include <vector>

#include "rsnas/search_space.hpp"

namespace rsnas {

// Relaxation logits: one row of K logits per (group, edge), shared across the
// M repeated cells of a group. Rows start at zero (uniform softmax).
class AlphaTable {
public:
    static constexpr int kGroups = 2;
    static constexpr int kEdges = 6;

    explicit AlphaTable(int num_candidates);

    const TensorPtr& logits(int group, int edge) const;
    int num_candidates() const { return k_; }
    void register_params(ParamStore& store) const; // "alpha/g{g}/e{e}"
    // Mean softmax entropy (nats) across the 12 rows; ln(K) at init.
    double mean_edge_entropy() const;

private:
    int k_;
    std::vector<TensorPtr> rows_;
};

// Fixed DAG of one cell: intermediate node j (1-based) draws one edge from
// the cell input and one from every earlier node; edges are numbered
// node-major: e0=(n1<-in), e1=(n2<-in), e2=(n2<-n1), e3=(n3<-in),
// e4=(n3<-n1), e5=(n3<-n2).
struct CellTopology {
    static constexpr int kNodes = 3;
    static constexpr int kEdges = 6;

    static int edge_offset(int node);      // first edge id of node (1-based)
    static int edge_node(int edge);        // owning node, 1-based
    static int edge_predecessor(int edge); // 0 = cell input, j = node j
};

// One relaxed edge: entry 1x1, the 13 candidate outputs, softmax(alpha) mix,
// exit 1x1 back to c channels.
class Edge {
public:
    Edge(int c, int c_prime, int variant_max, bool decoupled, bool unshared, Rng& rng);

    TensorPtr forward(const TensorPtr& x, const TensorPtr& alpha);
    TransformBlock& block() { return *block_; }
    const TransformBlock& block() const { return *block_; }
    void register_params(ParamStore& store, const std::string& prefix) const;
    std::int64_t param_count() const;

private:
    std::unique_ptr<TransformBlock> block_;
};

class Cell {
public:
    Cell(int c, int c_prime, int variant_max, bool decoupled, bool unshared, Rng& rng);

    // `nodes`, when given, receives the three intermediate node outputs.
    TensorPtr forward(const TensorPtr& x, const AlphaTable& alphas, int group,
                      std::vector<TensorPtr>* nodes = nullptr);
    Edge& edge(int e) { return edges_.at(static_cast<std::size_t>(e)); }
    void register_params(ParamStore& store, const std::string& prefix) const;
    std::int64_t param_count() const;

private:
    std::vector<Edge> edges_;
    ConvUnit reduce_; // 1x1 reducing 3c -> c, GN + ReLU
};

struct SupernetConfig {
    int M = 1;
    int c = 64;
    int c_prime = 24;
    bool decouple = true;
    bool unshared_blocks = false; // baseline blocks without representation sharing
    int num_classes = 4;
    int variant_max = 6;
};

struct ModuleOutput {
    TensorPtr g1;         // group-1 features (regression side)
    TensorPtr g2;         // group-2 features (classification side)
    TensorPtr box;        // 4 per location
    TensorPtr centerness; // 1 per location
    TensorPtr cls;        // num_classes per location
};

// The searchable module: two groups of M parameter-aliased cell evaluations,
// box/centerness heads on group 1, an input shortcut into group 2, and the
// classification head on group 2.
class Supernet {
public:
    Supernet(SupernetConfig cfg, Rng& rng);

    ModuleOutput forward(const TensorPtr& x);

    const SupernetConfig& config() const { return cfg_; }
    AlphaTable& alphas() { return alphas_; }
    const AlphaTable& alphas() const { return alphas_; }
    Cell& group_cell(int g) { return cells_.at(static_cast<std::size_t>(g)); }

    // Weights under "net/...", alpha rows under "alpha/...".
    void register_params(ParamStore& store) const;
    std::int64_t weight_param_count() const;

private:
    SupernetConfig cfg_;
    AlphaTable alphas_;
    std::vector<Cell> cells_; // one per group; evaluated M times each
    Conv2dLayer box_head_, ctr_head_, cls_head_;
};

} // namespace rsnas
