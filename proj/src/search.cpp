#include "rsnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"
#include "rsnas/common.hpp"

namespace rsnas {

namespace {

// Argmax over the non-none candidates of one alpha row; returns the candidate
// index and its softmax weight. Ties fall to the lowest canonical index.
std::pair<int, float> best_conv_candidate(const TensorPtr& row, const CandidateSet& set) {
    RSNAS_CHECK(static_cast<int>(row->data.size()) == set.size(),
                "alpha row has ", row->data.size(), " logits, candidate set needs ", set.size());
    const std::vector<float> p = softmax(row->data);
    int best = 0;
    for (int k = 1; k < set.none_index(); ++k)
        if (p[static_cast<std::size_t>(k)] > p[static_cast<std::size_t>(best)]) best = k;
    return {best, p[static_cast<std::size_t>(best)]};
}

} // namespace

Genotype derive_genotype(const AlphaTable& alphas, const CandidateSet& set) {
    Genotype g;
    for (int grp = 0; grp < AlphaTable::kGroups; ++grp) {
        GenotypeGroup group;
        for (int j = 1; j <= CellTopology::kNodes; ++j) {
            struct Scored {
                int pred;
                int cand;
                float weight;
            };
            std::vector<Scored> scored;
            const int off = CellTopology::edge_offset(j);
            for (int e = off; e < off + j; ++e) {
                const auto [cand, weight] = best_conv_candidate(alphas.logits(grp, e), set);
                scored.push_back({CellTopology::edge_predecessor(e), cand, weight});
            }
            // Highest winning weight first; stable sort keeps the lowest
            // predecessor in front on ties.
            std::stable_sort(scored.begin(), scored.end(),
                             [](const Scored& a, const Scored& b) { return a.weight > b.weight; });
            scored.resize(static_cast<std::size_t>(std::min(2, j)));
            std::sort(scored.begin(), scored.end(),
                      [](const Scored& a, const Scored& b) { return a.pred < b.pred; });
            GenotypeNode node;
            for (const Scored& s : scored) node.inputs.push_back({s.pred, set.conv(s.cand)});
            group.nodes.push_back(std::move(node));
        }
        g.groups.push_back(std::move(group));
    }
    return g;
}

bool should_terminate(const std::vector<Genotype>& history) {
    const std::size_t n = history.size();
    return n >= 2 && history[n - 1] == history[n - 2];
}

Genotype random_genotype(Rng& rng, const CandidateSet& set, int nodes, int groups) {
    RSNAS_CHECK(nodes >= 1 && groups >= 1, "random genotype needs nodes/groups >= 1");
    Genotype g;
    for (int grp = 0; grp < groups; ++grp) {
        GenotypeGroup group;
        for (int j = 1; j <= nodes; ++j) {
            std::vector<int> preds(static_cast<std::size_t>(j));
            for (int i = 0; i < j; ++i) preds[static_cast<std::size_t>(i)] = i;
            // Partial Fisher-Yates: the first min(2,j) entries become the draw.
            const int keep = std::min(2, j);
            for (int i = 0; i < keep; ++i) {
                const int pick = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(j - i)));
                std::swap(preds[static_cast<std::size_t>(i)], preds[static_cast<std::size_t>(pick)]);
            }
            preds.resize(static_cast<std::size_t>(keep));
            std::sort(preds.begin(), preds.end());
            GenotypeNode node;
            for (int p : preds) {
                const int cand = static_cast<int>(rng.below(static_cast<std::uint64_t>(set.none_index())));
                node.inputs.push_back({p, set.conv(cand)});
            }
            group.nodes.push_back(std::move(node));
        }
        g.groups.push_back(std::move(group));
    }
    return g;
}

std::string serialize_genotype(const Genotype& g) {
    nlohmann::json root;
    root["version"] = 1;
    nlohmann::json groups = nlohmann::json::array();
    for (const GenotypeGroup& grp : g.groups) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const GenotypeNode& node : grp.nodes) {
            nlohmann::json inputs = nlohmann::json::array();
            for (const GenotypeInput& in : node.inputs)
                inputs.push_back({{"from", in.from}, {"trans", in.trans.name()}});
            nodes.push_back({{"inputs", inputs}});
        }
        groups.push_back({{"nodes", nodes}});
    }
    root["groups"] = groups;
    return root.dump(2) + "\n";
}

namespace {

void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                         const std::string& where) {
    for (const auto& item : obj.items()) {
        bool ok = false;
        for (const char* k : allowed) ok = ok || item.key() == k;
        if (!ok) throw ConfigError(cat("genotype ", where, ": unknown key '", item.key(), "'"));
    }
}

const nlohmann::json& require_field(const nlohmann::json& obj, const char* key,
                                    const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) throw ConfigError(cat("genotype ", where, ": missing '", key, "'"));
    return *it;
}

} // namespace

Genotype parse_genotype(const std::string& text) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(cat("genotype is not valid JSON: ", e.what()));
    }
    if (!root.is_object()) throw ConfigError("genotype: top level must be an object");
    reject_unknown_keys(root, {"version", "groups"}, "top level");
    const nlohmann::json& version = require_field(root, "version", "top level");
    if (!version.is_number_integer() || version.get<int>() != 1)
        throw ConfigError(cat("genotype: unsupported version ", version.dump(), " (expected 1)"));

    const nlohmann::json& groups = require_field(root, "groups", "top level");
    if (!groups.is_array() || groups.empty())
        throw ConfigError("genotype: 'groups' must be a non-empty array");

    Genotype g;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const std::string gwhere = cat("group ", gi);
        const nlohmann::json& jgroup = groups[gi];
        if (!jgroup.is_object()) throw ConfigError(cat("genotype ", gwhere, ": must be an object"));
        reject_unknown_keys(jgroup, {"nodes"}, gwhere);
        const nlohmann::json& nodes = require_field(jgroup, "nodes", gwhere);
        if (!nodes.is_array() || nodes.size() != static_cast<std::size_t>(CellTopology::kNodes))
            throw ConfigError(cat("genotype ", gwhere, ": 'nodes' must list exactly ",
                                  CellTopology::kNodes, " nodes"));
        GenotypeGroup group;
        for (std::size_t ni = 0; ni < nodes.size(); ++ni) {
            const int j = static_cast<int>(ni) + 1;
            const std::string nwhere = cat(gwhere, " node ", j);
            const nlohmann::json& jnode = nodes[ni];
            if (!jnode.is_object()) throw ConfigError(cat("genotype ", nwhere, ": must be an object"));
            reject_unknown_keys(jnode, {"inputs"}, nwhere);
            const nlohmann::json& inputs = require_field(jnode, "inputs", nwhere);
            const std::size_t want = static_cast<std::size_t>(std::min(2, j));
            if (!inputs.is_array() || inputs.size() != want)
                throw ConfigError(cat("genotype ", nwhere, ": needs exactly ", want, " inputs"));
            GenotypeNode node;
            int prev_from = -1;
            for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
                const std::string iwhere = cat(nwhere, " input ", ii);
                const nlohmann::json& jin = inputs[ii];
                if (!jin.is_object()) throw ConfigError(cat("genotype ", iwhere, ": must be an object"));
                reject_unknown_keys(jin, {"from", "trans"}, iwhere);
                const nlohmann::json& jfrom = require_field(jin, "from", iwhere);
                const nlohmann::json& jtrans = require_field(jin, "trans", iwhere);
                if (!jfrom.is_number_integer())
                    throw ConfigError(cat("genotype ", iwhere, ": 'from' must be an integer"));
                const int from = jfrom.get<int>();
                if (from < 0 || from >= j)
                    throw ConfigError(cat("genotype ", iwhere, ": 'from' ", from,
                                          " out of range [0,", j - 1, "]"));
                if (from <= prev_from)
                    throw ConfigError(cat("genotype ", iwhere,
                                          ": inputs must be sorted by strictly increasing 'from'"));
                prev_from = from;
                if (!jtrans.is_string())
                    throw ConfigError(cat("genotype ", iwhere, ": 'trans' must be a string"));
                TransformationId trans;
                try {
                    trans = TransformationId::from_name(jtrans.get<std::string>());
                } catch (const std::invalid_argument& e) {
                    throw ConfigError(cat("genotype ", iwhere, ": ", e.what()));
                }
                if (trans.none)
                    throw ConfigError(cat("genotype ", iwhere, ": 'none' cannot be retained"));
                node.inputs.push_back({from, trans});
            }
            group.nodes.push_back(std::move(node));
        }
        g.groups.push_back(std::move(group));
    }
    return g;
}

std::uint64_t count_discrete_paths(int nodes, int candidates, int groups) {
    RSNAS_CHECK(nodes >= 1 && candidates >= 1 && groups >= 1,
                "path count needs nodes/candidates/groups >= 1");
    std::uint64_t per_group = 1;
    for (int j = 1; j <= nodes; ++j) {
        const std::uint64_t keep = static_cast<std::uint64_t>(std::min(2, j));
        const std::uint64_t choose = keep == 2 ? static_cast<std::uint64_t>(j) * (j - 1) / 2
                                               : static_cast<std::uint64_t>(j);
        std::uint64_t assign = 1;
        for (std::uint64_t i = 0; i < keep; ++i) assign *= static_cast<std::uint64_t>(candidates);
        per_group *= choose * assign;
    }
    std::uint64_t total = 1;
    for (int i = 0; i < groups; ++i) total *= per_group;
    return total;
}

std::uint64_t enumerate_discrete_paths(int nodes, int candidates) {
    RSNAS_CHECK(nodes >= 1 && nodes <= 3 && candidates >= 1 && candidates <= 12,
                "enumeration is for reduced spaces only");
    const CandidateSet set = CandidateSet::detection();
    std::set<std::string> seen;
    std::vector<GenotypeNode> acc;

    std::function<void(int)> visit = [&](int j) {
        if (j > nodes) {
            Genotype g;
            g.groups.push_back({acc});
            seen.insert(serialize_genotype(g));
            return;
        }
        const int keep = std::min(2, j);
        // All predecessor subsets of size `keep` (j is tiny).
        std::vector<int> preds;
        std::function<void(int)> pick = [&](int start) {
            if (static_cast<int>(preds.size()) == keep) {
                // All candidate assignments over the chosen predecessors.
                std::vector<int> cand(static_cast<std::size_t>(keep), 0);
                while (true) {
                    GenotypeNode node;
                    for (int i = 0; i < keep; ++i)
                        node.inputs.push_back(
                            {preds[static_cast<std::size_t>(i)],
                             set.conv(cand[static_cast<std::size_t>(i)])});
                    acc.push_back(std::move(node));
                    visit(j + 1);
                    acc.pop_back();
                    int d = keep - 1;
                    while (d >= 0 && ++cand[static_cast<std::size_t>(d)] == candidates) {
                        cand[static_cast<std::size_t>(d)] = 0;
                        --d;
                    }
                    if (d < 0) break;
                }
                return;
            }
            for (int p = start; p < j; ++p) {
                preds.push_back(p);
                pick(p + 1);
                preds.pop_back();
            }
        };
        pick(0);
    };
    visit(1);
    return static_cast<std::uint64_t>(seen.size());
}

// ---- derived networks ----

namespace {

ConvUnit make_edge_entry(int c, int c_prime, Rng& rng) {
    return ConvUnit::standard(c, c_prime, 1, 1, 1, /*gn=*/true, /*relu=*/true, /*bias=*/false, rng);
}

ConvUnit make_edge_exit(int c_prime, int c, Rng& rng) {
    return ConvUnit::standard(c_prime, c, 1, 1, 1, /*gn=*/false, /*relu=*/false, /*bias=*/true,
                              rng);
}

} // namespace

DerivedCell::DerivedCell(const GenotypeGroup& group, int c, int c_prime, int variant_max, Rng& rng)
    : reduce_(ConvUnit::standard(static_cast<int>(group.nodes.size()) * c, c, 1, 1, 1,
                                 /*gn=*/true, /*relu=*/true, /*bias=*/false, rng)) {
    const BlockTopology topo = BlockTopology::for_variants(variant_max);
    for (std::size_t ni = 0; ni < group.nodes.size(); ++ni) {
        const int j = static_cast<int>(ni) + 1;
        const GenotypeNode& node = group.nodes[ni];
        RSNAS_CHECK(!node.inputs.empty() &&
                        static_cast<int>(node.inputs.size()) == std::min(2, j),
                    "derived cell node ", j, " needs ", std::min(2, j), " inputs");
        std::vector<DiscreteEdge> edges;
        int prev_from = -1;
        for (const GenotypeInput& in : node.inputs) {
            RSNAS_CHECK(in.from >= 0 && in.from < j, "derived cell node ", j,
                        ": bad predecessor ", in.from);
            RSNAS_CHECK(in.from > prev_from, "derived cell node ", j,
                        ": inputs must be sorted by predecessor");
            prev_from = in.from;
            RSNAS_CHECK(!in.trans.none, "derived cell node ", j, ": none is not a transformation");
            DiscreteEdge edge{in.from, make_edge_entry(c, c_prime, rng),
                              make_candidate_pipeline(in.trans.stream, topo.spec(in.trans.variant),
                                                      c_prime, rng),
                              make_edge_exit(c_prime, c, rng)};
            edges.push_back(std::move(edge));
        }
        nodes_.push_back(std::move(edges));
    }
}

TensorPtr DerivedCell::forward(const TensorPtr& x) {
    std::vector<TensorPtr> states{x};
    for (const std::vector<DiscreteEdge>& edges : nodes_) {
        TensorPtr acc;
        for (const DiscreteEdge& edge : edges) {
            TensorPtr cur = edge.entry.forward(states[static_cast<std::size_t>(edge.from)]);
            for (const ConvUnit& u : edge.pipeline) cur = u.forward(cur);
            cur = edge.exit.forward(cur);
            acc = acc ? add(acc, cur) : cur;
        }
        states.push_back(acc);
    }
    return reduce_.forward(concat_channels(std::vector<TensorPtr>(states.begin() + 1, states.end())));
}

void DerivedCell::register_params(ParamStore& store, const std::string& prefix) const {
    for (std::size_t ni = 0; ni < nodes_.size(); ++ni)
        for (std::size_t ei = 0; ei < nodes_[ni].size(); ++ei) {
            const DiscreteEdge& edge = nodes_[ni][ei];
            const std::string base = cat(prefix, "/n", ni + 1, "/in", ei);
            edge.entry.register_params(store, base + "/entry");
            for (std::size_t l = 0; l < edge.pipeline.size(); ++l)
                edge.pipeline[l].register_params(store, cat(base, "/l", l));
            edge.exit.register_params(store, base + "/exit");
        }
    reduce_.register_params(store, prefix + "/reduce");
}

std::int64_t DerivedCell::param_count() const {
    std::int64_t n = reduce_.param_count();
    for (const std::vector<DiscreteEdge>& edges : nodes_)
        for (const DiscreteEdge& edge : edges) {
            n += edge.entry.param_count() + edge.exit.param_count();
            for (const ConvUnit& u : edge.pipeline) n += u.param_count();
        }
    return n;
}

DerivedNetwork::DerivedNetwork(const Genotype& genotype, const SupernetConfig& cfg, Rng& rng)
    : cfg_(cfg),
      box_head_(make_prediction_head(cfg.c, 4, 0.0f, rng)),
      ctr_head_(make_prediction_head(cfg.c, 1, 0.0f, rng)),
      cls_head_(make_prediction_head(cfg.c, cfg.num_classes, -2.0f, rng)) {
    RSNAS_CHECK(static_cast<int>(genotype.groups.size()) == AlphaTable::kGroups,
                "derived network needs ", AlphaTable::kGroups, " groups, genotype has ",
                genotype.groups.size());
    RSNAS_CHECK(cfg.M >= 1, "derived network needs M >= 1");
    for (const GenotypeGroup& group : genotype.groups) {
        RSNAS_CHECK(static_cast<int>(group.nodes.size()) == CellTopology::kNodes,
                    "derived network cells need ", CellTopology::kNodes, " nodes");
        for (int m = 0; m < cfg.M; ++m)
            cells_.emplace_back(group, cfg.c, cfg.c_prime, cfg.variant_max, rng);
    }
}

ModuleOutput DerivedNetwork::forward(const TensorPtr& x) {
    RSNAS_CHECK(x->shape.c == cfg_.c, "module input must have ", cfg_.c, " channels, got ",
                x->shape.c);
    ModuleOutput out;
    TensorPtr g1 = x;
    for (int m = 0; m < cfg_.M; ++m) g1 = cells_[static_cast<std::size_t>(m)].forward(g1);
    out.g1 = g1;
    out.box = box_head_.forward(g1);
    out.centerness = ctr_head_.forward(g1);

    TensorPtr g2 = add(g1, x);
    for (int m = 0; m < cfg_.M; ++m)
        g2 = cells_[static_cast<std::size_t>(cfg_.M + m)].forward(g2);
    out.g2 = g2;
    out.cls = cls_head_.forward(g2);
    return out;
}

void DerivedNetwork::register_params(ParamStore& store) const {
    for (int g = 0; g < AlphaTable::kGroups; ++g)
        for (int m = 0; m < cfg_.M; ++m)
            cells_[static_cast<std::size_t>(g * cfg_.M + m)].register_params(
                store, cat("net/g", g, "/m", m));
    box_head_.register_params(store, "net/head/box");
    ctr_head_.register_params(store, "net/head/ctr");
    cls_head_.register_params(store, "net/head/cls");
}

std::int64_t DerivedNetwork::param_count() const {
    std::int64_t n = box_head_.param_count() + ctr_head_.param_count() + cls_head_.param_count();
    for (const DerivedCell& cell : cells_) n += cell.param_count();
    return n;
}

// ---- search loop ----

void ScheduleConfig::validate() const {
    RSNAS_CHECK(total_iters > 0, "schedule: total_iters must be positive");
    RSNAS_CHECK(derive_every > 0 && total_iters % derive_every == 0,
                "schedule: derive_every must divide total_iters (", derive_every, " vs ",
                total_iters, ")");
    RSNAS_CHECK(batch_size > 0, "schedule: batch_size must be positive");
    // alpha_lr 0 is allowed: it freezes the architecture so the derivation
    // history depends on init + tie-breaks alone.
    RSNAS_CHECK(w_lr > 0.0f && alpha_lr >= 0.0f, "schedule: bad learning rates");
    RSNAS_CHECK(w_lr_decay_factor >= 1.0f, "schedule: lr decay factor must be >= 1");
    RSNAS_CHECK(clip_max > 0.0f, "schedule: clip_max must be positive");
    RSNAS_CHECK(val_fraction > 0.0f && val_fraction < 1.0f,
                "schedule: val_fraction must lie in (0,1)");
}

SearchDriver::SearchDriver(Supernet& net, ScheduleConfig cfg,
                           const std::function<void(ParamStore&)>& register_extra)
    : net_(net),
      cfg_(cfg),
      set_(CandidateSet::for_variants(net.config().variant_max)),
      alpha_opt_(AdamConfig{cfg.alpha_lr, cfg.alpha_beta1, cfg.alpha_beta2, 1e-8f,
                            cfg.alpha_weight_decay},
                 ParamKind::Architecture),
      w_opt_(SgdConfig{cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay}, ParamKind::Weight) {
    cfg_.validate();
    net_.register_params(store_);
    // Task-side parameters trained alongside the supernet (e.g. an image stem
    // owned by the loss function).
    if (register_extra) register_extra(store_);
}

SearchRecord SearchDriver::step(const SearchLossFn& loss_fn) {
    w_opt_.set_lr(iter_ >= cfg_.w_lr_decay_iter ? cfg_.w_lr / cfg_.w_lr_decay_factor : cfg_.w_lr);

    SearchRecord rec;
    rec.iter = iter_;

    zero_grads(store_);
    const TensorPtr l_val = loss_fn(net_, iter_, Split::Val);
    if (!std::isfinite(l_val->data.at(0)))
        throw NumericalError(cat("validation loss not finite at iter ", iter_));
    backward(l_val, store_);
    alpha_opt_.step(store_);
    rec.l_val = l_val->data[0];

    zero_grads(store_);
    const TensorPtr l_train = loss_fn(net_, iter_, Split::Train);
    if (!std::isfinite(l_train->data.at(0)))
        throw NumericalError(cat("train loss not finite at iter ", iter_));
    backward(l_train, store_);
    rec.grad_norm_pre_clip = clip_grad_norm(store_, cfg_.clip_max, ParamKind::Weight);
    w_opt_.step(store_);
    rec.l_train = l_train->data[0];

    rec.alpha_entropy_per_edge = net_.alphas().mean_edge_entropy();
    ++iter_;
    return rec;
}

SearchResult SearchDriver::run(const SearchLossFn& loss_fn) {
    SearchResult res;
    while (iter_ < cfg_.total_iters) {
        res.records.push_back(step(loss_fn));
        if (iter_ % cfg_.derive_every == 0) {
            res.history.push_back(derive_genotype(net_.alphas(), set_));
            if (should_terminate(res.history)) break;
        }
    }
    res.iters_run = iter_;
    res.converged_early = iter_ < cfg_.total_iters;
    if (res.history.empty()) res.history.push_back(derive_genotype(net_.alphas(), set_));
    res.genotype = res.history.back();
    return res;
}

} // namespace rsnas
