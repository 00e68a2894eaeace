#include "rsnas/supernet.hpp"

#include <cmath>

#include "rsnas/common.hpp"

namespace rsnas {

AlphaTable::AlphaTable(int num_candidates) : k_(num_candidates) {
    RSNAS_CHECK(num_candidates >= 2, "alpha rows need at least 2 candidates");
    for (int i = 0; i < kGroups * kEdges; ++i)
        rows_.push_back(Tensor::zeros({1, k_, 1, 1}, /*requires_grad=*/true));
}

const TensorPtr& AlphaTable::logits(int group, int edge) const {
    RSNAS_CHECK(group >= 0 && group < kGroups && edge >= 0 && edge < kEdges,
                "alpha index out of range: g", group, " e", edge);
    return rows_[static_cast<std::size_t>(group * kEdges + edge)];
}

void AlphaTable::register_params(ParamStore& store) const {
    for (int g = 0; g < kGroups; ++g)
        for (int e = 0; e < kEdges; ++e)
            store.add(cat("alpha/g", g, "/e", e), logits(g, e), ParamKind::Architecture);
}

double AlphaTable::mean_edge_entropy() const {
    double total = 0.0;
    for (const TensorPtr& row : rows_) {
        const std::vector<float> p = softmax(row->data);
        double h = 0.0;
        for (float v : p)
            if (v > 0.0f) h -= static_cast<double>(v) * std::log(static_cast<double>(v));
        total += h;
    }
    return total / static_cast<double>(rows_.size());
}

int CellTopology::edge_offset(int node) {
    RSNAS_CHECK(node >= 1 && node <= kNodes, "bad cell node: ", node);
    return node * (node - 1) / 2;
}

int CellTopology::edge_node(int edge) {
    RSNAS_CHECK(edge >= 0 && edge < kEdges, "bad cell edge: ", edge);
    if (edge < 1) return 1;
    if (edge < 3) return 2;
    return 3;
}

int CellTopology::edge_predecessor(int edge) {
    return edge - edge_offset(edge_node(edge));
}

Edge::Edge(int c, int c_prime, int variant_max, bool decoupled, bool unshared, Rng& rng) {
    if (unshared)
        block_ = std::make_unique<UnsharedBlock>(c, c_prime, variant_max, rng);
    else
        block_ = std::make_unique<SharedBlock>(c, c_prime, variant_max, decoupled, rng);
}

TensorPtr Edge::forward(const TensorPtr& x, const TensorPtr& alpha) {
    const int k = block_->candidates().size();
    RSNAS_CHECK((alpha->shape == Shape4{1, k, 1, 1}), "edge alpha must be (1,", k,
                ",1,1), got ", alpha->shape.str());
    const TensorPtr xp = block_->entry_forward(x);
    const TensorPtr mixed = weighted_sum(block_->candidate_outputs(xp), softmax_channels(alpha));
    return block_->exit_forward(mixed);
}

void Edge::register_params(ParamStore& store, const std::string& prefix) const {
    block_->register_params(store, prefix);
}

std::int64_t Edge::param_count() const { return block_->param_count(); }

Cell::Cell(int c, int c_prime, int variant_max, bool decoupled, bool unshared, Rng& rng)
    : reduce_(ConvUnit::standard(3 * c, c, 1, 1, 1, /*gn=*/true, /*relu=*/true, /*bias=*/false,
                                 rng)) {
    for (int e = 0; e < CellTopology::kEdges; ++e)
        edges_.emplace_back(c, c_prime, variant_max, decoupled, unshared, rng);
}

TensorPtr Cell::forward(const TensorPtr& x, const AlphaTable& alphas, int group,
                        std::vector<TensorPtr>* nodes) {
    std::vector<TensorPtr> states{x}; // states[j] = node j output, states[0] = input
    for (int j = 1; j <= CellTopology::kNodes; ++j) {
        TensorPtr acc;
        const int off = CellTopology::edge_offset(j);
        for (int e = off; e < off + j; ++e) {
            TensorPtr y = edges_[static_cast<std::size_t>(e)].forward(
                states[static_cast<std::size_t>(CellTopology::edge_predecessor(e))],
                alphas.logits(group, e));
            acc = acc ? add(acc, y) : y;
        }
        states.push_back(acc);
        if (nodes) nodes->push_back(acc);
    }
    return reduce_.forward(concat_channels({states[1], states[2], states[3]}));
}

void Cell::register_params(ParamStore& store, const std::string& prefix) const {
    for (int e = 0; e < CellTopology::kEdges; ++e)
        edges_[static_cast<std::size_t>(e)].register_params(store, cat(prefix, "/e", e));
    reduce_.register_params(store, prefix + "/reduce");
}

std::int64_t Cell::param_count() const {
    std::int64_t n = reduce_.param_count();
    for (const Edge& e : edges_) n += e.param_count();
    return n;
}

// The class head's bias starts negative so initial foreground scores are low.
Supernet::Supernet(SupernetConfig cfg, Rng& rng)
    : cfg_(cfg),
      alphas_(CandidateSet::for_variants(cfg.variant_max).size()),
      box_head_(make_prediction_head(cfg.c, 4, 0.0f, rng)),
      ctr_head_(make_prediction_head(cfg.c, 1, 0.0f, rng)),
      cls_head_(make_prediction_head(cfg.c, cfg.num_classes, -2.0f, rng)) {
    RSNAS_CHECK(cfg.M >= 1, "supernet needs M >= 1 cells per group");
    RSNAS_CHECK(cfg.num_classes >= 1, "supernet needs at least one class");
    for (int g = 0; g < AlphaTable::kGroups; ++g)
        cells_.emplace_back(cfg.c, cfg.c_prime, cfg.variant_max, cfg.decouple,
                            cfg.unshared_blocks, rng);
}

ModuleOutput Supernet::forward(const TensorPtr& x) {
    RSNAS_CHECK(x->shape.c == cfg_.c, "module input must have ", cfg_.c, " channels, got ",
                x->shape.c);
    ModuleOutput out;
    TensorPtr g1 = x;
    for (int m = 0; m < cfg_.M; ++m) g1 = cells_[0].forward(g1, alphas_, 0);
    out.g1 = g1;
    out.box = box_head_.forward(g1);
    out.centerness = ctr_head_.forward(g1);

    TensorPtr g2 = add(g1, x); // input shortcut into the second group
    for (int m = 0; m < cfg_.M; ++m) g2 = cells_[1].forward(g2, alphas_, 1);
    out.g2 = g2;
    out.cls = cls_head_.forward(g2);
    return out;
}

void Supernet::register_params(ParamStore& store) const {
    for (int g = 0; g < AlphaTable::kGroups; ++g)
        cells_[static_cast<std::size_t>(g)].register_params(store, cat("net/g", g));
    box_head_.register_params(store, "net/head/box");
    ctr_head_.register_params(store, "net/head/ctr");
    cls_head_.register_params(store, "net/head/cls");
    alphas_.register_params(store);
}

std::int64_t Supernet::weight_param_count() const {
    std::int64_t n = box_head_.param_count() + ctr_head_.param_count() + cls_head_.param_count();
    for (const Cell& cell : cells_) n += cell.param_count();
    return n;
}

} // namespace rsnas
