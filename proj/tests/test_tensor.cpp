#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "oracle_ref.hpp"
#include "rsnas/kernels.hpp"
#include "rsnas/tensor.hpp"

using namespace rsnas;
using refimpl::fd_grad;
using refimpl::rel_err;

TEST_CASE("conv2d: 3x3 ones kernel on 4x4 ones image") {
    auto x = Tensor::full({1, 1, 4, 4}, 1.0f);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0f);
    auto y = conv2d(x, w, nullptr, 1, 1, 1);
    CHECK(y->shape == (Shape4{1, 1, 4, 4}));
    // interior taps see 9 ones, corners 4, edges 6
    CHECK(y->at(0, 0, 1, 1) == 9.0f);
    CHECK(y->at(0, 0, 1, 2) == 9.0f);
    CHECK(y->at(0, 0, 0, 0) == 4.0f);
    CHECK(y->at(0, 0, 0, 3) == 4.0f);
    CHECK(y->at(0, 0, 0, 1) == 6.0f);
    CHECK(y->at(0, 0, 2, 0) == 6.0f);
}

TEST_CASE("conv2d: delta kernel is identity at any dilation") {
    Rng rng(1);
    auto x = refimpl::random_tensor({2, 3, 6, 7}, rng);
    for (int dil : {1, 2, 3}) {
        auto w = Tensor::zeros({3, 3, 3, 3});
        for (int c = 0; c < 3; ++c) w->data[(c * 3 + c) * 9 + 4] = 1.0f; // center tap
        auto y = conv2d(x, w, nullptr, 1, dil, 1);
        REQUIRE(y->shape == x->shape);
        for (std::size_t i = 0; i < x->data.size(); ++i) CHECK(y->data[i] == x->data[i]);
    }
}

TEST_CASE("conv2d matches the naive loop oracle") {
    Rng rng(17);
    struct Case {
        int N, Cin, Cout, k, stride, dil, groups, H, W;
        bool bias;
    };
    std::vector<Case> cases = {
        {1, 1, 1, 3, 1, 1, 1, 5, 5, false},  {2, 3, 4, 3, 1, 2, 1, 8, 9, true},
        {1, 4, 4, 3, 1, 3, 4, 7, 7, false},  {2, 6, 8, 1, 1, 1, 2, 6, 5, true},
        {1, 5, 7, 3, 2, 1, 1, 9, 11, true},  {2, 4, 4, 3, 2, 2, 4, 10, 8, false},
        {1, 8, 8, 3, 1, 2, 8, 4, 4, true},   {1, 2, 6, 1, 2, 1, 1, 8, 8, false},
    };
    for (const auto& c : cases) {
        CAPTURE(c.Cin);
        CAPTURE(c.k);
        CAPTURE(c.stride);
        CAPTURE(c.dil);
        CAPTURE(c.groups);
        auto x = refimpl::random_tensor({c.N, c.Cin, c.H, c.W}, rng);
        auto w = refimpl::random_tensor({c.Cout, c.Cin / c.groups, c.k, c.k}, rng);
        auto b = c.bias ? refimpl::random_tensor({1, c.Cout, 1, 1}, rng) : nullptr;
        auto got = conv2d(x, w, b, c.stride, c.dil, c.groups);
        auto want = refimpl::naive_conv2d(x, w, b, c.stride, c.dil, c.groups);
        REQUIRE(got->shape == want->shape);
        for (std::size_t i = 0; i < got->data.size(); ++i)
            CHECK(got->data[i] == doctest::Approx(want->data[i]).epsilon(1e-5).scale(1.0));
    }
}

TEST_CASE("conv2d rejects invalid arguments") {
    auto x = Tensor::zeros({1, 4, 4, 4});
    auto w22 = Tensor::zeros({4, 4, 2, 2});
    CHECK_THROWS_AS(conv2d(x, w22, nullptr, 1, 1, 1), std::invalid_argument);
    auto w = Tensor::zeros({4, 4, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w, nullptr, 1, 4, 1), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(x, w, nullptr, 3, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(x, w, nullptr, 1, 1, 3), std::invalid_argument);
    auto wg = Tensor::zeros({4, 4, 3, 3}); // groups=2 expects 2 in-channels per group
    CHECK_THROWS_AS(conv2d(x, wg, nullptr, 1, 1, 2), std::invalid_argument);
    auto bbad = Tensor::zeros({1, 3, 1, 1});
    CHECK_THROWS_AS(conv2d(x, w, bbad, 1, 1, 1), std::invalid_argument);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(23);
    auto x = refimpl::random_tensor({2, 3, 5, 6}, rng);
    auto w = refimpl::random_tensor({4, 3, 3, 3}, rng, 0.5f);
    auto b = refimpl::random_tensor({1, 4, 1, 1}, rng, 0.5f);
    ParamStore store;
    store.add("x", x, ParamKind::Weight);
    store.add("w", w, ParamKind::Weight);
    store.add("b", b, ParamKind::Weight);
    auto coeffs = std::make_shared<std::vector<float>>();
    {
        auto probe = conv2d(x, w, b, 1, 2, 1);
        for (std::int64_t i = 0; i < probe->numel(); ++i)
            coeffs->push_back(static_cast<float>(rng.normal(0.0, 1.0)));
    }
    auto eval = [&]() {
        NoGradGuard ng;
        return static_cast<double>(linear_readout(conv2d(x, w, b, 1, 2, 1), coeffs)->item());
    };
    zero_grads(store);
    auto loss = linear_readout(conv2d(x, w, b, 1, 2, 1), coeffs);
    backward(loss, store);
    Rng pick(99);
    for (const auto& name : {"x", "w", "b"}) {
        auto t = store.get(name);
        for (int trial = 0; trial < 8; ++trial) {
            const std::size_t idx = static_cast<std::size_t>(pick.below(t->data.size()));
            const double fd = fd_grad(eval, *t, idx, 1e-3);
            CHECK(rel_err(t->grad[idx], fd) < 2e-2);
        }
    }
}

TEST_CASE("group_norm: constant input maps to beta") {
    auto x = Tensor::full({2, 4, 3, 3}, 5.0f);
    auto gamma = Tensor::full({1, 4, 1, 1}, 1.0f);
    auto beta = Tensor::zeros({1, 4, 1, 1});
    auto y = group_norm(x, 2, gamma, beta);
    for (float v : y->data) CHECK(v == 0.0f); // zero variance handled by eps
    beta = Tensor::full({1, 4, 1, 1}, 0.75f);
    y = group_norm(x, 2, gamma, beta);
    for (float v : y->data) CHECK(v == 0.75f);
}

TEST_CASE("group_norm normalizes each (sample, group) slice") {
    Rng rng(5);
    auto x = refimpl::random_tensor({2, 8, 5, 5}, rng, 3.0f);
    auto gamma = Tensor::full({1, 8, 1, 1}, 1.0f);
    auto beta = Tensor::zeros({1, 8, 1, 1});
    const int G = 4, cpg = 2;
    auto y = group_norm(x, G, gamma, beta);
    // direct group statistics, computed independently in double
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < G; ++g) {
            double s = 0.0, ss = 0.0;
            int count = 0;
            for (int cl = 0; cl < cpg; ++cl)
                for (int yy = 0; yy < 5; ++yy)
                    for (int xx = 0; xx < 5; ++xx) {
                        const double v = y->at(n, g * cpg + cl, yy, xx);
                        s += v;
                        ss += v * v;
                        ++count;
                    }
            const double mean = s / count;
            const double var = ss / count - mean * mean;
            CHECK(std::fabs(mean) < 1e-5);
            CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        }
}

TEST_CASE("group_norm gradients match finite differences") {
    Rng rng(31);
    auto x = refimpl::random_tensor({2, 4, 4, 4}, rng);
    auto gamma = refimpl::random_tensor({1, 4, 1, 1}, rng, 0.3f);
    for (auto& v : gamma->data) v += 1.0f;
    auto beta = refimpl::random_tensor({1, 4, 1, 1}, rng, 0.3f);
    ParamStore store;
    store.add("x", x, ParamKind::Weight);
    store.add("gamma", gamma, ParamKind::Weight);
    store.add("beta", beta, ParamKind::Weight);
    auto coeffs = std::make_shared<std::vector<float>>();
    for (std::int64_t i = 0; i < x->numel(); ++i)
        coeffs->push_back(static_cast<float>(rng.normal(0.0, 1.0)));
    auto eval = [&]() {
        NoGradGuard ng;
        return static_cast<double>(linear_readout(group_norm(x, 2, gamma, beta), coeffs)->item());
    };
    zero_grads(store);
    backward(linear_readout(group_norm(x, 2, gamma, beta), coeffs), store);
    Rng pick(7);
    for (const auto& name : {"x", "gamma", "beta"}) {
        auto t = store.get(name);
        for (int trial = 0; trial < 8; ++trial) {
            const std::size_t idx = static_cast<std::size_t>(pick.below(t->data.size()));
            const double fd = fd_grad(eval, *t, idx, 1e-3);
            CHECK(rel_err(t->grad[idx], fd) < 2e-2);
        }
    }
}

TEST_CASE("elementwise and structural ops with finite-difference gradients") {
    Rng rng(11);
    auto a = refimpl::random_tensor({1, 3, 4, 4}, rng);
    auto b = refimpl::random_tensor({1, 3, 4, 4}, rng);
    for (auto& v : a->data) v += 2.5f; // keep relu inputs away from the kink
    ParamStore store;
    store.add("a", a, ParamKind::Weight);
    store.add("b", b, ParamKind::Weight);

    auto coeffs = std::make_shared<std::vector<float>>();
    for (int i = 0; i < 3 * 4 * 4 * 3; ++i)
        coeffs->push_back(static_cast<float>(rng.normal(0.0, 1.0)));

    auto build = [&]() {
        auto r = relu(a);
        auto s = add(scale(r, 0.5f), b);
        auto m = mul(s, b);
        return concat_channels({r, s, m});
    };
    auto eval = [&]() {
        NoGradGuard ng;
        return static_cast<double>(linear_readout(build(), coeffs)->item());
    };
    zero_grads(store);
    backward(linear_readout(build(), coeffs), store);
    Rng pick(3);
    for (const auto& name : {"a", "b"}) {
        auto t = store.get(name);
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t idx = static_cast<std::size_t>(pick.below(t->data.size()));
            const double fd = fd_grad(eval, *t, idx, 1e-3);
            CHECK(rel_err(t->grad[idx], fd) < 2e-2);
        }
    }
}

TEST_CASE("pooling ops: values and gradients") {
    auto x = Tensor::from_vector({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto mx = max_pool2(x);
    CHECK(mx->shape == (Shape4{1, 1, 1, 2}));
    CHECK(mx->data[0] == 6.0f);
    CHECK(mx->data[1] == 8.0f);
    auto av = avg_pool2(x);
    CHECK(av->data[0] == 3.5f);
    CHECK(av->data[1] == 5.5f);
    auto ss = subsample2(x);
    CHECK(ss->data[0] == 1.0f);
    CHECK(ss->data[1] == 3.0f);
    auto gp = global_avg_pool(x);
    CHECK(gp->shape == (Shape4{1, 1, 1, 1}));
    CHECK(gp->data[0] == doctest::Approx(4.5f));

    Rng rng(13);
    auto p = refimpl::random_tensor({2, 2, 4, 4}, rng);
    ParamStore store;
    store.add("p", p, ParamKind::Weight);
    auto coeffs = std::make_shared<std::vector<float>>();
    for (int i = 0; i < 2 * 2 * (4 + 4 + 4) + 2 * 2; ++i)
        coeffs->push_back(static_cast<float>(rng.normal(0.0, 1.0)));
    auto build = [&]() {
        auto parts = concat_channels({max_pool2(p), avg_pool2(p), subsample2(p)});
        // readout over pooled maps plus global pool, concatenated flat
        auto flat_a = linear_readout(parts, std::make_shared<std::vector<float>>(
                                                coeffs->begin(), coeffs->begin() + 48));
        auto flat_b = linear_readout(global_avg_pool(p),
                                     std::make_shared<std::vector<float>>(coeffs->begin() + 48,
                                                                          coeffs->begin() + 52));
        return add(flat_a, flat_b);
    };
    auto eval = [&]() {
        NoGradGuard ng;
        return static_cast<double>(build()->item());
    };
    zero_grads(store);
    backward(build(), store);
    Rng pick(29);
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t idx = static_cast<std::size_t>(pick.below(p->data.size()));
        const double fd = fd_grad(eval, *p, idx, 1e-3);
        CHECK(rel_err(p->grad[idx], fd) < 2e-2);
    }
}

TEST_CASE("softmax utility and tape op") {
    auto sm = softmax({0.0f, 0.0f, 0.0f});
    for (float v : sm) CHECK(v == doctest::Approx(1.0f / 3.0f));
    sm = softmax({1000.0f, 0.0f});
    CHECK(sm[0] == doctest::Approx(1.0f));
    CHECK(sm[1] == doctest::Approx(0.0f));
    // shift invariance
    auto s1 = softmax({0.3f, -1.2f, 2.0f, 0.0f});
    auto s2 = softmax({0.3f + 7.0f, -1.2f + 7.0f, 2.0f + 7.0f, 7.0f});
    for (std::size_t i = 0; i < s1.size(); ++i)
        CHECK(s1[i] == doctest::Approx(s2[i]).epsilon(1e-6));

    Rng rng(19);
    auto logits = refimpl::random_tensor({1, 5, 1, 1}, rng);
    ParamStore store;
    store.add("logits", logits, ParamKind::Architecture);
    auto coeffs = std::make_shared<std::vector<float>>(std::vector<float>{0.9f, -0.3f, 0.4f, 1.7f, -1.1f});
    auto eval = [&]() {
        NoGradGuard ng;
        return static_cast<double>(linear_readout(softmax_channels(logits), coeffs)->item());
    };
    zero_grads(store);
    backward(linear_readout(softmax_channels(logits), coeffs), store);
    for (std::size_t idx = 0; idx < 5; ++idx) {
        const double fd = fd_grad(eval, *logits, idx, 1e-3);
        CHECK(rel_err(logits->grad[idx], fd, 0.001) < 2e-2);
    }
}

TEST_CASE("weighted_sum mixes items and routes gradients") {
    Rng rng(37);
    auto t0 = refimpl::random_tensor({1, 2, 3, 3}, rng);
    auto t1 = refimpl::random_tensor({1, 2, 3, 3}, rng);
    auto t2 = Tensor::zeros({1, 2, 3, 3}); // 'none'-style constant zero item
    auto wts = Tensor::from_vector({1, 3, 1, 1}, {0.5f, 0.25f, 0.25f});
    ParamStore store;
    store.add("t0", t0, ParamKind::Weight);
    store.add("t1", t1, ParamKind::Weight);
    store.add("w", wts, ParamKind::Architecture);

    auto out = weighted_sum({t0, t1, t2}, wts);
    for (std::size_t i = 0; i < out->data.size(); ++i)
        CHECK(out->data[i] == doctest::Approx(0.5f * t0->data[i] + 0.25f * t1->data[i]));

    auto coeffs = std::make_shared<std::vector<float>>();
    for (int i = 0; i < 18; ++i) coeffs->push_back(static_cast<float>(rng.normal(0.0, 1.0)));
    auto eval = [&]() {
        NoGradGuard ng;
        return static_cast<double>(
            linear_readout(weighted_sum({t0, t1, t2}, wts), coeffs)->item());
    };
    zero_grads(store);
    backward(linear_readout(weighted_sum({t0, t1, t2}, wts), coeffs), store);
    for (const auto& name : {"t0", "t1", "w"}) {
        auto t = store.get(name);
        for (std::size_t idx = 0; idx < std::min<std::size_t>(t->data.size(), 6); ++idx) {
            const double fd = fd_grad(eval, *t, idx, 1e-3);
            CHECK(rel_err(t->grad[idx], fd, 0.01) < 2e-2);
        }
    }
}

TEST_CASE("backward: off-path parameters receive exactly zero gradient") {
    auto used = Tensor::full({1, 1, 2, 2}, 1.0f);
    auto unused = Tensor::full({1, 1, 2, 2}, 1.0f);
    ParamStore store;
    store.add("used", used, ParamKind::Weight);
    store.add("unused", unused, ParamKind::Weight);
    auto loss = sum_all(relu(used));
    backward(loss, store);
    REQUIRE(unused->has_grad());
    for (float g : unused->grad) CHECK(g == 0.0f);
    for (float g : used->grad) CHECK(g == 1.0f);
}

TEST_CASE("backward: NaN gradients are flagged with the offending node") {
    auto x = Tensor::full({1, 1, 2, 2}, 1.0f);
    ParamStore store;
    store.add("x", x, ParamKind::Weight);
    auto y = relu(x);
    auto loss = sum_all(y);
    y->grad_buffer()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(backward(loss, store), NumericalError);

    auto bad = Tensor::full({1, 1, 1, 1}, std::numeric_limits<float>::quiet_NaN());
    CHECK_THROWS_AS(backward(sum_all(bad), store), NumericalError);
}

TEST_CASE("clip_grad_norm scales the weight partition globally") {
    auto p = Tensor::zeros({1, 1, 1, 2});
    auto q = Tensor::zeros({1, 1, 1, 1});
    ParamStore store;
    store.add("p", p, ParamKind::Weight);
    store.add("alpha", q, ParamKind::Architecture);
    p->grad_buffer()[0] = 3.0f;
    p->grad_buffer()[1] = 4.0f;
    q->grad_buffer()[0] = 100.0f;

    const float pre = clip_grad_norm(store, 1.0f, ParamKind::Weight);
    CHECK(pre == doctest::Approx(5.0f));
    CHECK(p->grad[0] == doctest::Approx(0.6f));
    CHECK(p->grad[1] == doctest::Approx(0.8f));
    CHECK(q->grad[0] == 100.0f); // other partition untouched

    const float pre2 = clip_grad_norm(store, 10.0f, ParamKind::Weight);
    CHECK(pre2 == doctest::Approx(1.0f));
    CHECK(p->grad[0] == doctest::Approx(0.6f)); // below threshold: unchanged
}

TEST_CASE("sgd with momentum follows the textbook recurrence") {
    auto w = Tensor::from_vector({1, 1, 1, 1}, {1.0f});
    ParamStore store;
    store.add("w", w, ParamKind::Weight);
    SgdOptimizer opt({0.1f, 0.9f, 0.0f}, ParamKind::Weight);
    w->grad_buffer()[0] = 0.5f;
    opt.step(store);
    CHECK(w->data[0] == doctest::Approx(0.95f));
    w->grad[0] = 0.5f;
    opt.step(store);
    CHECK(w->data[0] == doctest::Approx(0.855f));
}

TEST_CASE("adam drives a quadratic to zero") {
    auto w = Tensor::from_vector({1, 1, 1, 1}, {1.0f});
    ParamStore store;
    store.add("w", w, ParamKind::Weight);
    AdamOptimizer opt({0.1f, 0.9f, 0.999f, 1e-8f, 0.0f}, ParamKind::Weight);
    for (int i = 0; i < 100; ++i) {
        zero_grads(store);
        w->grad_buffer()[0] = 2.0f * w->data[0];
        opt.step(store);
    }
    CHECK(std::fabs(w->data[0]) < 1e-2);
}

TEST_CASE("optimizers touch only their partition") {
    Rng rng(41);
    auto w = refimpl::random_tensor({1, 2, 2, 2}, rng);
    auto alpha = refimpl::random_tensor({1, 13, 1, 1}, rng);
    ParamStore store;
    store.add("w", w, ParamKind::Weight);
    store.add("alpha", alpha, ParamKind::Architecture);
    const auto w0 = w->data;
    const auto a0 = alpha->data;
    for (auto& [name, e] : store.entries()) {
        (void)name;
        auto& g = e.tensor->grad_buffer();
        std::fill(g.begin(), g.end(), 1.0f);
    }
    SgdOptimizer sgd({0.1f, 0.9f, 0.0f}, ParamKind::Weight);
    sgd.step(store);
    CHECK(alpha->data == a0); // bitwise: other partition untouched
    CHECK(w->data != w0);

    AdamOptimizer adam({0.1f, 0.9f, 0.999f, 1e-8f, 0.0f}, ParamKind::Architecture);
    const auto w1 = w->data;
    adam.step(store);
    CHECK(w->data == w1);
    CHECK(alpha->data != a0);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    Rng rng(53);
    auto w = refimpl::random_tensor({2, 3, 3, 3}, rng);
    auto alpha = refimpl::random_tensor({1, 13, 1, 1}, rng);
    ParamStore store;
    store.add("module/w", w, ParamKind::Weight);
    store.add("alpha/g0/e0", alpha, ParamKind::Architecture);

    const auto path = (std::filesystem::temp_directory_path() / "rsnas_ckpt_test.bin").string();
    save_checkpoint(path, store, R"({"note":"test"})");

    const auto w_bits = w->data;
    const auto a_bits = alpha->data;
    for (auto& v : w->data) v = 0.0f;
    for (auto& v : alpha->data) v = 0.0f;
    load_checkpoint(path, store);
    CHECK(w->data == w_bits);
    CHECK(alpha->data == a_bits);

    std::string meta;
    auto raw = read_checkpoint(path, &meta);
    CHECK(raw.size() == 2);
    CHECK(raw.at("alpha/g0/e0").kind == ParamKind::Architecture);
    CHECK(raw.at("module/w").shape == (Shape4{2, 3, 3, 3}));
    CHECK(meta.find("note") != std::string::npos);

    // corrupt magic
    {
        std::ofstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(0);
        f.write("XX", 2);
    }
    CHECK_THROWS(read_checkpoint(path));
    std::filesystem::remove(path);
    CHECK_THROWS(read_checkpoint(path));
}

TEST_CASE("param store enforces unique names and reports counts") {
    auto t = Tensor::zeros({1, 2, 1, 1});
    ParamStore store;
    store.add("a", t, ParamKind::Weight);
    CHECK_THROWS_AS(store.add("a", t, ParamKind::Weight), std::invalid_argument);
    store.add("b", Tensor::zeros({1, 3, 1, 1}), ParamKind::Architecture);
    CHECK(store.param_count() == 5);
    CHECK(store.param_count(ParamKind::Weight) == 2);
    CHECK(store.param_count(ParamKind::Architecture) == 3);
    CHECK_THROWS_AS(store.get("zzz"), std::invalid_argument);
}

TEST_CASE("forward determinism: same seed, same bits") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = refimpl::random_tensor({1, 4, 6, 6}, rng);
        auto w = refimpl::random_tensor({4, 4, 3, 3}, rng, 0.4f);
        auto gamma = Tensor::full({1, 4, 1, 1}, 1.0f);
        auto beta = Tensor::zeros({1, 4, 1, 1});
        auto y = relu(group_norm(conv2d(x, w, nullptr, 1, 1, 1), 2, gamma, beta));
        return y->data;
    };
    CHECK(run(1234) == run(1234));
    CHECK(run(1234) != run(1235));
}

TEST_CASE("loss-side elementwise ops: forward values") {
    auto z = Tensor::from_vector({1, 1, 1, 4}, {-30.0f, 0.0f, 2.0f, 30.0f});
    auto s = sigmoid(z);
    CHECK(s->data[0] < 1e-12f);
    CHECK(s->data[1] == 0.5f);
    CHECK(s->data[2] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-6));
    CHECK(s->data[3] >= 1.0f - 1e-6f);
    for (float v : s->data) CHECK(std::isfinite(v));

    auto e = exp(Tensor::from_vector({1, 1, 1, 3}, {0.0f, 1.0f, -1.0f}));
    CHECK(e->data[0] == 1.0f);
    CHECK(e->data[1] == doctest::Approx(std::exp(1.0)).epsilon(1e-6));
    CHECK(e->data[2] == doctest::Approx(std::exp(-1.0)).epsilon(1e-6));

    auto lg = log(Tensor::from_vector({1, 1, 1, 3}, {1.0f, std::exp(2.0f), 0.0f}));
    CHECK(lg->data[0] == 0.0f);
    CHECK(lg->data[1] == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(lg->data[2] == doctest::Approx(std::log(1e-12)).epsilon(1e-6)); // floored, not -inf

    auto cl = clamp(Tensor::from_vector({1, 1, 1, 3}, {-2.0f, 0.5f, 9.0f}), 0.0f, 1.0f);
    CHECK(cl->data[0] == 0.0f);
    CHECK(cl->data[1] == 0.5f);
    CHECK(cl->data[2] == 1.0f);

    auto q = div(Tensor::from_vector({1, 1, 1, 2}, {6.0f, -1.0f}),
                 Tensor::from_vector({1, 1, 1, 2}, {2.0f, 4.0f}));
    CHECK(q->data[0] == 3.0f);
    CHECK(q->data[1] == -0.25f);

    auto d = sub(Tensor::from_vector({1, 1, 1, 2}, {5.0f, 1.0f}),
                 Tensor::from_vector({1, 1, 1, 2}, {2.0f, 3.0f}));
    CHECK(d->data[0] == 3.0f);
    CHECK(d->data[1] == -2.0f);

    auto x = Tensor::from_vector({1, 3, 1, 2}, {0, 1, 10, 11, 20, 21});
    auto mid = channel_slice(x, 1, 3);
    CHECK(mid->shape == (Shape4{1, 2, 1, 2}));
    CHECK(mid->data == std::vector<float>{10, 11, 20, 21});
    auto stitched = concat_channels({channel_slice(x, 0, 1), mid});
    CHECK(stitched->data == x->data);
    CHECK_THROWS_AS(channel_slice(x, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(channel_slice(x, 0, 4), std::invalid_argument);
}

TEST_CASE("loss-side elementwise ops: gradients match finite differences") {
    Rng rng(23);
    auto a = refimpl::random_tensor({1, 3, 4, 4}, rng, 0.3f);
    auto b = refimpl::random_tensor({1, 3, 4, 4}, rng, 0.2f);
    for (auto& v : a->data) v += 1.2f; // keep log/div/clamp inputs in smooth territory
    for (auto& v : b->data) v += 1.1f;
    ParamStore store;
    store.add("a", a, ParamKind::Weight);
    store.add("b", b, ParamKind::Weight);

    auto coeffs = std::make_shared<std::vector<float>>();
    for (int i = 0; i < 3 * 4 * 4 + 2 * 4 * 4; ++i)
        coeffs->push_back(static_cast<float>(rng.normal(0.0, 1.0)));

    auto build = [&]() {
        auto y = div(exp(clamp(a, -3.0f, 3.0f)), b);
        auto z = log(add(mul(y, sigmoid(b)), Tensor::full(y->shape, 1.0f)));
        return concat_channels({sub(z, sigmoid(a)), channel_slice(mul(z, z), 0, 2)});
    };
    auto eval = [&]() {
        NoGradGuard ng;
        return static_cast<double>(linear_readout(build(), coeffs)->item());
    };
    zero_grads(store);
    backward(linear_readout(build(), coeffs), store);
    Rng pick(7);
    for (const auto& name : {"a", "b"}) {
        auto t = store.get(name);
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t idx = static_cast<std::size_t>(pick.below(t->data.size()));
            const double fd = fd_grad(eval, *t, idx, 1e-3);
            CHECK(rel_err(t->grad[idx], fd) < 2e-2);
        }
    }

    // The log floor kills gradients below it instead of exploding them.
    auto z0 = Tensor::zeros({1, 1, 1, 2});
    ParamStore s2;
    s2.add("z0", z0, ParamKind::Weight);
    zero_grads(s2);
    backward(sum_all(log(z0)), s2);
    CHECK(z0->grad[0] == 0.0f);
    CHECK(z0->grad[1] == 0.0f);

    // clamp gates gradient outside the window.
    auto c = Tensor::from_vector({1, 1, 1, 3}, {-2.0f, 0.25f, 3.0f});
    ParamStore s3;
    s3.add("c", c, ParamKind::Weight);
    zero_grads(s3);
    backward(sum_all(clamp(c, 0.0f, 1.0f)), s3);
    CHECK(c->grad[0] == 0.0f);
    CHECK(c->grad[1] == 1.0f);
    CHECK(c->grad[2] == 0.0f);
}
