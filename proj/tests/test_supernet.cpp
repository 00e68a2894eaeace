#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "oracle_ref.hpp"
#include "rsnas/supernet.hpp"

using namespace rsnas;

namespace {

float max_abs_diff(const TensorPtr& a, const TensorPtr& b) {
    REQUIRE(a->shape == b->shape);
    float m = 0.0f;
    for (std::size_t i = 0; i < a->data.size(); ++i)
        m = std::max(m, std::abs(a->data[i] - b->data[i]));
    return m;
}

SupernetConfig tiny_config() {
    SupernetConfig cfg;
    cfg.M = 1;
    cfg.c = 6;
    cfg.c_prime = 4;
    cfg.decouple = true;
    cfg.num_classes = 3;
    return cfg;
}

} // namespace

TEST_CASE("alpha table: zero init, uniform softmax, deterministic") {
    AlphaTable a(13), b(13);
    CHECK(a.num_candidates() == 13);
    for (int g = 0; g < AlphaTable::kGroups; ++g)
        for (int e = 0; e < AlphaTable::kEdges; ++e) {
            const TensorPtr& row = a.logits(g, e);
            CHECK(row->shape == (Shape4{1, 13, 1, 1}));
            for (float v : row->data) CHECK(v == 0.0f);
            CHECK(max_abs_diff(row, b.logits(g, e)) == 0.0f);
            const std::vector<float> p = softmax(row->data);
            for (float v : p) CHECK(v == doctest::Approx(1.0f / 13.0f).epsilon(1e-6));
        }
    CHECK(a.mean_edge_entropy() == doctest::Approx(std::log(13.0)).epsilon(1e-6));
    CHECK_THROWS_AS((void)a.logits(2, 0), std::invalid_argument);
    CHECK_THROWS_AS((void)a.logits(0, 6), std::invalid_argument);

    ParamStore store;
    a.register_params(store);
    CHECK(store.size() == 12);
    CHECK(store.contains("alpha/g0/e0"));
    CHECK(store.contains("alpha/g1/e5"));
    CHECK(store.param_count(ParamKind::Architecture) == 12 * 13);
    CHECK(store.param_count(ParamKind::Weight) == 0);
}

TEST_CASE("cell topology: edge numbering") {
    CHECK(CellTopology::edge_offset(1) == 0);
    CHECK(CellTopology::edge_offset(2) == 1);
    CHECK(CellTopology::edge_offset(3) == 3);
    const int want_node[6] = {1, 2, 2, 3, 3, 3};
    const int want_pred[6] = {0, 0, 1, 0, 1, 2};
    for (int e = 0; e < 6; ++e) {
        CHECK(CellTopology::edge_node(e) == want_node[e]);
        CHECK(CellTopology::edge_predecessor(e) == want_pred[e]);
    }
}

TEST_CASE("edge: none dominance gives the exit-bias map") {
    Rng rng(101);
    Edge edge(6, 4, 6, /*decoupled=*/true, /*unshared=*/false, rng);
    // Give the exit conv a recognizable bias.
    TensorPtr exit_b = edge.block().unit("exit")->conv.b;
    for (int i = 0; i < 6; ++i) exit_b->data[static_cast<std::size_t>(i)] = 0.25f * (i + 1);

    TensorPtr alpha = Tensor::zeros({1, 13, 1, 1});
    alpha->data[12] = 1000.0f; // none
    Rng data_rng(1);
    const TensorPtr x = refimpl::random_tensor({2, 6, 5, 5}, data_rng);
    NoGradGuard ng;
    const TensorPtr y = edge.forward(x, alpha);
    REQUIRE(y->shape == (Shape4{2, 6, 5, 5}));
    float worst = 0.0f;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 6; ++c) {
            const float want = 0.25f * (c + 1);
            const float* plane = y->data.data() + ((n * 6 + c) * 25);
            for (int i = 0; i < 25; ++i) worst = std::max(worst, std::abs(plane[i] - want));
        }
    CHECK(worst <= 1e-5f);

    TensorPtr bad = Tensor::zeros({1, 12, 1, 1});
    CHECK_THROWS_AS((void)edge.forward(x, bad), std::invalid_argument);
}

TEST_CASE("edge: uniform alpha mixes to the candidate mean") {
    Rng rng(102);
    Edge edge(6, 4, 6, /*decoupled=*/false, /*unshared=*/false, rng);
    Rng data_rng(2);
    const TensorPtr x = refimpl::random_tensor({1, 6, 6, 6}, data_rng);
    const TensorPtr alpha = Tensor::zeros({1, 13, 1, 1});

    NoGradGuard ng;
    const TensorPtr got = edge.forward(x, alpha);

    TransformBlock& block = edge.block();
    const TensorPtr xp = block.entry_forward(x);
    const std::vector<TensorPtr> cand = block.candidate_outputs(xp);
    TensorPtr acc = cand[0];
    for (std::size_t i = 1; i < cand.size(); ++i) acc = add(acc, cand[i]);
    const TensorPtr want = block.exit_forward(scale(acc, 1.0f / 13.0f));
    CHECK(max_abs_diff(got, want) <= 1e-5f);
}

TEST_CASE("relaxed mix stays inside the candidate convex hull per element") {
    Rng rng(103);
    Edge edge(6, 4, 6, /*decoupled=*/true, /*unshared=*/false, rng);
    Rng data_rng(3);
    const TensorPtr x = refimpl::random_tensor({1, 6, 5, 5}, data_rng);
    TensorPtr alpha = Tensor::zeros({1, 13, 1, 1});
    for (float& v : alpha->data) v = static_cast<float>(data_rng.normal(0.0, 2.0));

    NoGradGuard ng;
    TransformBlock& block = edge.block();
    const TensorPtr xp = block.entry_forward(x);
    const std::vector<TensorPtr> cand = block.candidate_outputs(xp);
    const TensorPtr mixed = weighted_sum(cand, softmax_channels(alpha));
    for (std::size_t i = 0; i < mixed->data.size(); ++i) {
        float hull = 0.0f;
        for (const TensorPtr& c : cand) hull = std::max(hull, std::abs(c->data[i]));
        CHECK(std::abs(mixed->data[i]) <= hull + 1e-6f);
    }
}

TEST_CASE("cell: DAG acyclicity and output contract") {
    Rng rng(104);
    Cell cell(6, 4, 6, /*decoupled=*/true, /*unshared=*/false, rng);
    AlphaTable alphas(13);
    Rng data_rng(4);
    const TensorPtr x = refimpl::random_tensor({1, 6, 5, 5}, data_rng);

    NoGradGuard ng;
    std::vector<TensorPtr> nodes;
    const TensorPtr y = cell.forward(x, alphas, 0, &nodes);
    CHECK(y->shape == (Shape4{1, 6, 5, 5}));
    REQUIRE(nodes.size() == 3);

    // Zero every parameter of the three edges feeding node 3.
    for (int e = 3; e < 6; ++e) {
        ParamStore store;
        cell.edge(e).register_params(store, "z");
        for (const auto& [name, entry] : store.entries())
            std::fill(entry.tensor->data.begin(), entry.tensor->data.end(), 0.0f);
    }
    std::vector<TensorPtr> nodes2;
    cell.forward(x, alphas, 0, &nodes2);
    CHECK(max_abs_diff(nodes[0], nodes2[0]) == 0.0f);
    CHECK(max_abs_diff(nodes[1], nodes2[1]) == 0.0f);
    CHECK(max_abs_diff(nodes[2], nodes2[2]) > 0.0f);
}

TEST_CASE("module: shapes, shortcut wiring, zeroed second group") {
    Rng rng(105);
    Supernet net(tiny_config(), rng);
    ParamStore store;
    net.register_params(store);

    Rng data_rng(5);
    const TensorPtr x = refimpl::random_tensor({2, 6, 7, 7}, data_rng);
    NoGradGuard ng;
    ModuleOutput out = net.forward(x);
    CHECK(out.g1->shape == (Shape4{2, 6, 7, 7}));
    CHECK(out.g2->shape == (Shape4{2, 6, 7, 7}));
    CHECK(out.box->shape == (Shape4{2, 4, 7, 7}));
    CHECK(out.centerness->shape == (Shape4{2, 1, 7, 7}));
    CHECK(out.cls->shape == (Shape4{2, 3, 7, 7}));

    // The class head's bias starts at -2.
    const TensorPtr cls_b = store.get("net/head/cls/b");
    for (float v : cls_b->data) CHECK(v == -2.0f);

    // g2 equals group-2 run on (g1 + input); dropping the shortcut changes it.
    const TensorPtr with_shortcut = net.group_cell(1).forward(add(out.g1, x), net.alphas(), 1);
    CHECK(max_abs_diff(with_shortcut, out.g2) == 0.0f);
    const TensorPtr without = net.group_cell(1).forward(out.g1, net.alphas(), 1);
    CHECK(max_abs_diff(without, out.g2) > 0.0f);

    // Channel mismatch is rejected.
    const TensorPtr bad = Tensor::zeros({1, 5, 7, 7});
    CHECK_THROWS_AS((void)net.forward(bad), std::invalid_argument);

    // Zeroing all group-2 weights pins class logits to the head bias.
    for (const auto& [name, entry] : store.entries())
        if (name.rfind("net/g1/", 0) == 0)
            std::fill(entry.tensor->data.begin(), entry.tensor->data.end(), 0.0f);
    ModuleOutput zeroed = net.forward(x);
    for (float v : zeroed.cls->data) CHECK(v == -2.0f);
    // Group 1 and its heads are untouched.
    CHECK(max_abs_diff(zeroed.box, out.box) == 0.0f);
}

TEST_CASE("module: per-edge constant alpha shifts do not change outputs") {
    Rng rng(106);
    Supernet net(tiny_config(), rng);
    Rng data_rng(6);
    const TensorPtr x = refimpl::random_tensor({1, 6, 6, 6}, data_rng);

    // Generic alpha values.
    Rng arng(7);
    for (int g = 0; g < 2; ++g)
        for (int e = 0; e < 6; ++e)
            for (float& v : net.alphas().logits(g, e)->data)
                v = static_cast<float>(arng.normal(0.0, 1.0));

    NoGradGuard ng;
    const ModuleOutput before = net.forward(x);
    const float shifts[3] = {7.25f, -3.5f, 0.125f};
    int si = 0;
    for (int g = 0; g < 2; ++g)
        for (int e = 0; e < 6; ++e) {
            const float s = shifts[si++ % 3];
            for (float& v : net.alphas().logits(g, e)->data) v += s;
        }
    const ModuleOutput after = net.forward(x);
    CHECK(max_abs_diff(before.box, after.box) <= 1e-6f);
    CHECK(max_abs_diff(before.centerness, after.centerness) <= 1e-6f);
    CHECK(max_abs_diff(before.cls, after.cls) <= 1e-6f);
}

TEST_CASE("module: every alpha logit receives gradient") {
    Rng rng(107);
    Supernet net(tiny_config(), rng);
    ParamStore store;
    net.register_params(store);

    Rng data_rng(8);
    const TensorPtr x = refimpl::random_tensor({1, 6, 5, 5}, data_rng);
    ModuleOutput out = net.forward(x);

    auto readout = [&](const TensorPtr& t, int salt) {
        auto coeffs = std::make_shared<std::vector<float>>(t->numel());
        Rng crng(100 + salt);
        for (float& c : *coeffs) c = static_cast<float>(crng.uniform(-1.0, 1.0));
        return linear_readout(t, coeffs);
    };
    const TensorPtr loss =
        add(add(readout(out.box, 0), readout(out.centerness, 1)), readout(out.cls, 2));
    backward(loss, store);

    for (int g = 0; g < 2; ++g)
        for (int e = 0; e < 6; ++e) {
            const TensorPtr& row = net.alphas().logits(g, e);
            REQUIRE(row->has_grad());
            for (int k = 0; k < 13; ++k) {
                INFO("g" << g << " e" << e << " k" << k);
                CHECK(std::abs(row->grad[static_cast<std::size_t>(k)]) > 0.0f);
            }
        }

    // Finite-difference spot check on a few alpha entries.
    auto eval_loss = [&]() {
        NoGradGuard ng;
        ModuleOutput o = net.forward(x);
        return readout(o.box, 0)->data[0] + readout(o.centerness, 1)->data[0] +
               readout(o.cls, 2)->data[0];
    };
    const int probes[][2] = {{0, 0}, {0, 5}, {1, 2}, {1, 3}};
    for (const auto& pr : probes) {
        const TensorPtr& row = net.alphas().logits(pr[0], pr[1]);
        const int k = (pr[0] * 7 + pr[1] * 3) % 13;
        const double fd = refimpl::fd_grad(eval_loss, *row, static_cast<std::size_t>(k), 1e-3);
        const double an = row->grad[static_cast<std::size_t>(k)];
        INFO("g" << pr[0] << " e" << pr[1] << " k" << k << " an=" << an << " fd=" << fd);
        CHECK(refimpl::rel_err(an, fd) < 2e-2f);
    }
}

TEST_CASE("module: M repeats alias one parameter set per group") {
    SupernetConfig cfg = tiny_config();
    Rng rng1(108);
    Supernet m1(cfg, rng1);
    cfg.M = 3;
    Rng rng2(108);
    Supernet m3(cfg, rng2);

    CHECK(m1.weight_param_count() == m3.weight_param_count());
    ParamStore s1, s3;
    m1.register_params(s1);
    m3.register_params(s3);
    CHECK(s1.size() == s3.size());
    CHECK(s1.param_count(ParamKind::Weight) == s3.param_count(ParamKind::Weight));

    Rng data_rng(9);
    const TensorPtr x = refimpl::random_tensor({1, 6, 6, 6}, data_rng);
    NoGradGuard ng;
    const ModuleOutput o1 = m1.forward(x);
    const ModuleOutput o3 = m3.forward(x);
    CHECK(o3.box->shape == o1.box->shape);
    CHECK(max_abs_diff(o1.g1, o3.g1) > 0.0f); // more depth, different features

    // Perturbing the single shared cell changes the M=3 output (all repeats
    // read the same storage).
    const TensorPtr before = m3.forward(x).g1;
    s3.get("net/g0/e0/entry/conv/w")->data[0] += 0.25f;
    const TensorPtr after = m3.forward(x).g1;
    CHECK(max_abs_diff(before, after) > 0.0f);
}

TEST_CASE("module: optimizer partitions do not cross") {
    Rng rng(109);
    Supernet net(tiny_config(), rng);
    ParamStore store;
    net.register_params(store);

    Rng data_rng(10);
    const TensorPtr x = refimpl::random_tensor({1, 6, 5, 5}, data_rng);
    ModuleOutput out = net.forward(x);
    auto coeffs = std::make_shared<std::vector<float>>(out.cls->numel(), 0.5f);
    backward(linear_readout(out.cls, coeffs), store);

    auto snapshot = [&](ParamKind kind) {
        std::vector<float> all;
        for (const auto& [name, entry] : store.entries())
            if (entry.kind == kind)
                all.insert(all.end(), entry.tensor->data.begin(), entry.tensor->data.end());
        return all;
    };

    const std::vector<float> w_before = snapshot(ParamKind::Weight);
    AdamOptimizer alpha_opt(AdamConfig{}, ParamKind::Architecture);
    alpha_opt.step(store);
    CHECK(snapshot(ParamKind::Weight) == w_before);

    const std::vector<float> a_before = snapshot(ParamKind::Architecture);
    SgdOptimizer w_opt(SgdConfig{}, ParamKind::Weight);
    w_opt.step(store);
    CHECK(snapshot(ParamKind::Architecture) == a_before);
    CHECK(snapshot(ParamKind::Weight) != w_before);
}
