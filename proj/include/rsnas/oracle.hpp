#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rsnas/search_space.hpp"
#include "rsnas/supernet.hpp"

namespace rsnas {

// Weight-tying map: unshared pipeline layer path -> the shared unit it must
// copy. Stem units fan out (a stream's first conv is the first layer of all
// six candidates); dilated branch units bind one-to-one.
struct TieMap {
    std::map<std::string, std::string> bindings;

    std::size_t size() const { return bindings.size(); }
    int fan_out(const std::string& shared_path) const;
};

// Structural map for one topology, independent of any block instance.
TieMap make_tie_map(const BlockTopology& topo);

// Overwrites every unshared pipeline layer from its shared counterpart and
// returns the map used. The shared block must be coupled (adapters have no
// unshared counterpart); unit structure mismatches are rejected naming both
// paths.
TieMap tie_weights(const SharedBlock& shared, UnsharedBlock& unshared);

// Copies every parameter of `unshared` (a supernet store built with
// unshared_blocks=true) from `shared`: names present in both stores copy
// directly, block pipeline layers are rerouted through `block_map`. Returns
// the number of tensors copied.
std::size_t tie_supernet_weights(const ParamStore& shared, ParamStore& unshared,
                                 const TieMap& block_map);

struct EquivalenceReport {
    int trials = 0;
    std::vector<std::string> candidate_names; // conv candidates, canonical order
    std::vector<double> per_candidate;        // max abs diff per conv candidate
    double max_abs_diff = 0.0;
};

// Feeds `trials` random post-entry inputs to both blocks and compares the
// conv candidate outputs elementwise.
EquivalenceReport equivalence_check(SharedBlock& shared, UnsharedBlock& unshared, int trials,
                                    std::uint64_t seed, int height = 8, int width = 8);

// Forwards two tied supernets on `trials` random images and returns the max
// abs diff across all five module outputs.
double module_equivalence_check(Supernet& a, Supernet& b, int trials, std::uint64_t seed,
                                int height = 8, int width = 8);

struct GradProbeResult {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradAuditReport {
    int probes = 0;
    int weight_probes = 0;
    int alpha_probes = 0;
    double worst_rel_err = 0.0;
    GradProbeResult worst;
    std::vector<GradProbeResult> results;

    bool passed(double tol = 2e-2) const { return worst_rel_err < tol; }
};

// Central finite differences on sampled parameter entries through a full
// forward + smooth readout of all module outputs. Probes alternate between
// weight and architecture parameters unless `alpha_only` restricts them.
GradAuditReport grad_check_supernet(Supernet& net, ParamStore& store, int probes, double eps,
                                    std::uint64_t seed, bool alpha_only = false, int height = 8,
                                    int width = 8);

} // namespace rsnas
