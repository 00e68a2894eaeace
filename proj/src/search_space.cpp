#include "rsnas/search_space.hpp"

#include <algorithm>

#include "rsnas/common.hpp"

namespace rsnas {

const char* stream_name(Stream s) { return s == Stream::Std ? "std" : "sep"; }

TransformationId TransformationId::make(Stream s, int variant) {
    RSNAS_CHECK(variant >= 1 && variant <= 6, "variant out of range: ", variant);
    TransformationId t;
    t.stream = s;
    t.variant = variant;
    return t;
}

TransformationId TransformationId::make_none() {
    TransformationId t;
    t.none = true;
    return t;
}

std::string TransformationId::name() const {
    if (none) return "none";
    return cat(stream_name(stream), "_t", variant);
}

TransformationId TransformationId::from_name(const std::string& name) {
    if (name == "none") return make_none();
    auto sep = name.find("_t");
    RSNAS_CHECK(sep != std::string::npos, "bad transformation name: ", name);
    const std::string head = name.substr(0, sep);
    const std::string tail = name.substr(sep + 2);
    RSNAS_CHECK(head == "std" || head == "sep", "bad transformation stream: ", name);
    RSNAS_CHECK(tail.size() == 1 && tail[0] >= '1' && tail[0] <= '6',
                "bad transformation variant: ", name);
    return make(head == "std" ? Stream::Std : Stream::Sep, tail[0] - '0');
}

int TransformationId::receptive_field() const {
    RSNAS_CHECK(!none, "none has no receptive field");
    return BlockTopology::for_variants(6).spec(variant).receptive_field();
}

BlockTopology BlockTopology::for_variants(int variant_max) {
    RSNAS_CHECK(variant_max >= 1 && variant_max <= 6, "variant_max out of range: ", variant_max);
    // {depth, dilation}: t1..t3 tap the stem at depths 1..3; t4..t6 hang a
    // dilated unit off a tap (t4: rate 2 on p1, t5: rate 2 on p2, t6: rate 3
    // on p1).
    static const VariantSpec kAll[6] = {
        {1, 1, 1}, {2, 2, 1}, {3, 3, 1}, {4, 1, 2}, {5, 2, 2}, {6, 1, 3},
    };
    BlockTopology topo;
    topo.variants.assign(kAll, kAll + variant_max);
    for (const VariantSpec& v : topo.variants) topo.stem_depth = std::max(topo.stem_depth, v.depth);
    return topo;
}

const VariantSpec& BlockTopology::spec(int variant) const {
    RSNAS_CHECK(variant >= 1 && variant <= static_cast<int>(variants.size()),
                "unknown variant: ", variant);
    return variants[static_cast<std::size_t>(variant - 1)];
}

int BlockTopology::representations_per_stream() const {
    int branches = 0;
    for (const VariantSpec& v : variants)
        if (!v.is_stem_tap()) ++branches;
    return stem_depth + branches;
}

int BlockTopology::unshared_layers_per_stream() const {
    int total = 0;
    for (const VariantSpec& v : variants) total += v.depth + (v.is_stem_tap() ? 0 : 1);
    return total;
}

bool BlockTopology::needs_adapter(int variant) const {
    const VariantSpec& v = spec(variant);
    if (!v.is_stem_tap()) return false;
    if (v.depth < stem_depth) return true;
    for (const VariantSpec& other : variants)
        if (!other.is_stem_tap() && other.depth >= v.depth) return true;
    return false;
}

CandidateSet CandidateSet::for_variants(int variant_max) {
    CandidateSet set;
    for (Stream s : {Stream::Std, Stream::Sep})
        for (int v = 1; v <= variant_max; ++v) set.convs.push_back(TransformationId::make(s, v));
    return set;
}

int CandidateSet::index_of(const TransformationId& t) const {
    if (t.none) return none_index();
    auto it = std::find(convs.begin(), convs.end(), t);
    RSNAS_CHECK(it != convs.end(), "candidate not in set: ", t.name());
    return static_cast<int>(it - convs.begin());
}

std::vector<int> CandidateSet::receptive_field_multiset() const {
    std::vector<int> rfs;
    rfs.reserve(convs.size());
    for (const TransformationId& t : convs) rfs.push_back(t.receptive_field());
    std::sort(rfs.begin(), rfs.end());
    return rfs;
}

namespace {

ConvUnit make_entry(int c, int c_prime, Rng& rng) {
    return ConvUnit::standard(c, c_prime, 1, 1, 1, /*gn=*/true, /*relu=*/true, /*bias=*/false, rng);
}

// Bare 1x1 with bias: a one-hot "none" mix must still pass gradients to the
// exit bias, and its output must be exactly the bias map.
ConvUnit make_exit(int c_prime, int c, Rng& rng) {
    return ConvUnit::standard(c_prime, c, 1, 1, 1, /*gn=*/false, /*relu=*/false, /*bias=*/true,
                              rng);
}

ConvUnit make_base_unit(Stream stream, int c_prime, Rng& rng) {
    if (stream == Stream::Std)
        return ConvUnit::standard(c_prime, c_prime, 3, 1, 1, /*gn=*/true, /*relu=*/true,
                                  /*bias=*/false, rng);
    return ConvUnit::separable(c_prime, c_prime, 3, 1, /*gn=*/true, /*relu=*/true, rng);
}

ConvUnit make_dilated_unit(int c_prime, int dilation, Rng& rng) {
    return ConvUnit::separable(c_prime, c_prime, 3, dilation, /*gn=*/true, /*relu=*/true, rng);
}

ConvUnit make_adapter(int c_prime, Rng& rng) {
    return ConvUnit::standard(c_prime, c_prime, 1, 1, 1, /*gn=*/false, /*relu=*/true,
                              /*bias=*/true, rng);
}

const ConvUnit* find_in(const std::vector<std::pair<int, ConvUnit>>& list, int variant) {
    for (const auto& [v, unit] : list)
        if (v == variant) return &unit;
    return nullptr;
}

} // namespace

std::vector<ConvUnit> make_candidate_pipeline(Stream stream, const VariantSpec& spec, int c_prime,
                                              Rng& rng) {
    std::vector<ConvUnit> units;
    for (int d = 0; d < spec.depth; ++d) units.push_back(make_base_unit(stream, c_prime, rng));
    if (!spec.is_stem_tap()) units.push_back(make_dilated_unit(c_prime, spec.dilation, rng));
    return units;
}

int count_representations(const TransformBlock& block) { return block.representation_count(); }

SharedBlock::SharedBlock(int c, int c_prime, int variant_max, bool decoupled, Rng& rng)
    : topo_(BlockTopology::for_variants(variant_max)),
      set_(CandidateSet::for_variants(variant_max)),
      decoupled_(decoupled),
      entry_(make_entry(c, c_prime, rng)),
      exit_(make_exit(c_prime, c, rng)) {
    for (Stream s : {Stream::Std, Stream::Sep}) {
        StreamUnits& units = streams_[static_cast<std::size_t>(s)];
        for (int d = 0; d < topo_.stem_depth; ++d)
            units.stem.push_back(make_base_unit(s, c_prime, rng));
        for (const VariantSpec& v : topo_.variants) {
            if (!v.is_stem_tap())
                units.branches.emplace_back(v.variant, make_dilated_unit(c_prime, v.dilation, rng));
            else if (decoupled_ && topo_.needs_adapter(v.variant))
                units.adapters.emplace_back(v.variant, make_adapter(c_prime, rng));
        }
    }
}

TensorPtr SharedBlock::entry_forward(const TensorPtr& x) { return entry_.forward(x); }

std::vector<TensorPtr> SharedBlock::candidate_outputs(const TensorPtr& x_prime) {
    std::vector<TensorPtr> outs(static_cast<std::size_t>(set_.size()));
    for (Stream s : {Stream::Std, Stream::Sep}) {
        StreamUnits& units = streams_[static_cast<std::size_t>(s)];
        // Stem runs once; taps p1..p3 feed every variant of this stream.
        std::vector<TensorPtr> taps;
        TensorPtr cur = x_prime;
        for (const ConvUnit& u : units.stem) {
            cur = u.forward(cur, &repr_convs_);
            taps.push_back(cur);
        }
        for (const VariantSpec& v : topo_.variants) {
            TensorPtr out;
            if (v.is_stem_tap()) {
                out = taps[static_cast<std::size_t>(v.depth - 1)];
                if (const ConvUnit* adapter = find_in(units.adapters, v.variant))
                    out = adapter->forward(out, &adapter_convs_);
            } else {
                const ConvUnit* branch = find_in(units.branches, v.variant);
                out = branch->forward(taps[static_cast<std::size_t>(v.depth - 1)], &repr_convs_);
            }
            outs[static_cast<std::size_t>(set_.index_of(TransformationId::make(s, v.variant)))] =
                out;
        }
    }
    outs.back() = Tensor::zeros(x_prime->shape);
    return outs;
}

TensorPtr SharedBlock::exit_forward(const TensorPtr& mixed) { return exit_.forward(mixed); }

int SharedBlock::representation_count() const { return 2 * topo_.representations_per_stream(); }

void SharedBlock::register_params(ParamStore& store, const std::string& prefix) const {
    entry_.register_params(store, prefix + "/entry");
    for (Stream s : {Stream::Std, Stream::Sep}) {
        const StreamUnits& units = streams_[static_cast<std::size_t>(s)];
        const std::string sp = cat(prefix, "/", stream_name(s));
        for (std::size_t d = 0; d < units.stem.size(); ++d)
            units.stem[d].register_params(store, cat(sp, "/stem", d));
        for (const auto& [v, unit] : units.branches)
            unit.register_params(store, cat(sp, "/branch_t", v));
        for (const auto& [v, unit] : units.adapters)
            unit.register_params(store, cat(sp, "/adapter_t", v));
    }
    exit_.register_params(store, prefix + "/exit");
}

std::int64_t SharedBlock::param_count() const {
    std::int64_t n = entry_.param_count() + exit_.param_count();
    for (const StreamUnits& units : streams_) {
        for (const ConvUnit& u : units.stem) n += u.param_count();
        for (const auto& kv : units.branches) n += kv.second.param_count();
        for (const auto& kv : units.adapters) n += kv.second.param_count();
    }
    return n;
}

const ConvUnit* SharedBlock::unit(const std::string& path) const {
    if (path == "entry") return &entry_;
    if (path == "exit") return &exit_;
    for (Stream s : {Stream::Std, Stream::Sep}) {
        const std::string sp = cat(stream_name(s), "/");
        if (path.rfind(sp, 0) != 0) continue;
        const std::string rest = path.substr(sp.size());
        const StreamUnits& units = streams_[static_cast<std::size_t>(s)];
        for (std::size_t d = 0; d < units.stem.size(); ++d)
            if (rest == cat("stem", d)) return &units.stem[d];
        for (const auto& [v, unit] : units.branches)
            if (rest == cat("branch_t", v)) return &unit;
        for (const auto& [v, unit] : units.adapters)
            if (rest == cat("adapter_t", v)) return &unit;
    }
    return nullptr;
}

ConvUnit* SharedBlock::unit(const std::string& path) {
    return const_cast<ConvUnit*>(static_cast<const SharedBlock*>(this)->unit(path));
}

std::vector<std::string> SharedBlock::unit_paths() const {
    std::vector<std::string> paths{"entry"};
    for (Stream s : {Stream::Std, Stream::Sep}) {
        const StreamUnits& units = streams_[static_cast<std::size_t>(s)];
        const std::string sp = stream_name(s);
        for (std::size_t d = 0; d < units.stem.size(); ++d) paths.push_back(cat(sp, "/stem", d));
        for (const auto& kv : units.branches) paths.push_back(cat(sp, "/branch_t", kv.first));
        for (const auto& kv : units.adapters) paths.push_back(cat(sp, "/adapter_t", kv.first));
    }
    paths.push_back("exit");
    return paths;
}

UnsharedBlock::UnsharedBlock(int c, int c_prime, int variant_max, Rng& rng)
    : topo_(BlockTopology::for_variants(variant_max)),
      set_(CandidateSet::for_variants(variant_max)),
      entry_(make_entry(c, c_prime, rng)),
      exit_(make_exit(c_prime, c, rng)) {
    for (const TransformationId& t : set_.convs)
        pipelines_.push_back(make_candidate_pipeline(t.stream, topo_.spec(t.variant), c_prime, rng));
}

TensorPtr UnsharedBlock::entry_forward(const TensorPtr& x) { return entry_.forward(x); }

std::vector<TensorPtr> UnsharedBlock::candidate_outputs(const TensorPtr& x_prime) {
    std::vector<TensorPtr> outs;
    outs.reserve(static_cast<std::size_t>(set_.size()));
    for (const std::vector<ConvUnit>& pipeline : pipelines_) {
        TensorPtr cur = x_prime;
        for (const ConvUnit& u : pipeline) cur = u.forward(cur, &repr_convs_);
        outs.push_back(cur);
    }
    outs.push_back(Tensor::zeros(x_prime->shape));
    return outs;
}

TensorPtr UnsharedBlock::exit_forward(const TensorPtr& mixed) { return exit_.forward(mixed); }

int UnsharedBlock::representation_count() const { return 2 * topo_.unshared_layers_per_stream(); }

void UnsharedBlock::register_params(ParamStore& store, const std::string& prefix) const {
    entry_.register_params(store, prefix + "/entry");
    for (std::size_t i = 0; i < pipelines_.size(); ++i) {
        const std::string base = cat(prefix, "/", set_.conv(static_cast<int>(i)).name());
        for (std::size_t l = 0; l < pipelines_[i].size(); ++l)
            pipelines_[i][l].register_params(store, cat(base, "/l", l));
    }
    exit_.register_params(store, prefix + "/exit");
}

std::int64_t UnsharedBlock::param_count() const {
    std::int64_t n = entry_.param_count() + exit_.param_count();
    for (const std::vector<ConvUnit>& pipeline : pipelines_)
        for (const ConvUnit& u : pipeline) n += u.param_count();
    return n;
}

const ConvUnit* UnsharedBlock::unit(const std::string& path) const {
    if (path == "entry") return &entry_;
    if (path == "exit") return &exit_;
    for (std::size_t i = 0; i < pipelines_.size(); ++i) {
        const std::string base = set_.conv(static_cast<int>(i)).name() + "/l";
        if (path.rfind(base, 0) != 0) continue;
        const std::string rest = path.substr(base.size());
        for (std::size_t l = 0; l < pipelines_[i].size(); ++l)
            if (rest == cat(l)) return &pipelines_[i][l];
    }
    return nullptr;
}

ConvUnit* UnsharedBlock::unit(const std::string& path) {
    return const_cast<ConvUnit*>(static_cast<const UnsharedBlock*>(this)->unit(path));
}

std::vector<std::string> UnsharedBlock::unit_paths() const {
    std::vector<std::string> paths{"entry"};
    for (std::size_t i = 0; i < pipelines_.size(); ++i)
        for (std::size_t l = 0; l < pipelines_[i].size(); ++l)
            paths.push_back(cat(set_.conv(static_cast<int>(i)).name(), "/l", l));
    paths.push_back("exit");
    return paths;
}

} // namespace rsnas
