#include <doctest.h>

#include <cmath>
#include <vector>

#include "rsnas/common.hpp"
#include "rsnas/kernels.hpp"

using namespace rsnas;

namespace {

std::vector<float> random_vec(std::size_t n, Rng& rng, float scale = 1.0f) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, scale));
    return v;
}

// Sizes chosen to cover SIMD main loops plus every remainder length.
const std::vector<std::size_t> kSizes = {1, 2, 3, 5, 7, 8, 9, 15, 16, 17, 31, 32, 33, 100, 257};

} // namespace

TEST_CASE("backend dispatch and forcing") {
    CHECK(kern::backend_available(kern::Backend::Scalar));
    const auto detected = kern::detect_backend();
    CHECK(kern::backend_available(detected));

    kern::set_backend(kern::Backend::Scalar);
    CHECK(kern::active_backend() == kern::Backend::Scalar);
    kern::set_backend(detected);
    CHECK(kern::active_backend() == detected);

    CHECK(std::string(kern::backend_name(kern::Backend::Scalar)) == "scalar");
    CHECK(std::string(kern::backend_name(kern::Backend::Avx2)) == "avx2");
    CHECK(kern::backend_from_name("scalar") == kern::Backend::Scalar);
    CHECK(kern::backend_from_name("auto") == detected);
    CHECK_THROWS_AS(kern::backend_from_name("sse9"), std::invalid_argument);
}

TEST_CASE("scalar vs simd kernel equivalence") {
    if (!kern::backend_available(kern::Backend::Avx2)) {
        MESSAGE("AVX2 unavailable on this machine; equivalence suite skipped");
        return;
    }
    const auto& ks = kern::table_for(kern::Backend::Scalar);
    const auto& kv = kern::table_for(kern::Backend::Avx2);
    Rng rng(42);

    for (std::size_t n : kSizes) {
        auto x = random_vec(n, rng);
        auto y = random_vec(n, rng);
        const float a = static_cast<float>(rng.normal(0.0, 1.0));

        SUBCASE("") {} // keep doctest quiet about empty body
        {
            auto y1 = y, y2 = y;
            ks.axpy(y1.data(), x.data(), a, n);
            kv.axpy(y2.data(), x.data(), a, n);
            for (std::size_t i = 0; i < n; ++i)
                CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-6));
        }
        {
            auto x1 = x, x2 = x;
            ks.scale(x1.data(), a, n);
            kv.scale(x2.data(), a, n);
            CHECK(x1 == x2); // pure multiply, no reassociation
        }
        {
            std::vector<float> o1(n), o2(n);
            ks.vadd(o1.data(), x.data(), y.data(), n);
            kv.vadd(o2.data(), x.data(), y.data(), n);
            CHECK(o1 == o2);
            ks.vmul(o1.data(), x.data(), y.data(), n);
            kv.vmul(o2.data(), x.data(), y.data(), n);
            CHECK(o1 == o2);
        }
        {
            std::vector<float> o1(n), o2(n);
            ks.relu_fwd(o1.data(), x.data(), n);
            kv.relu_fwd(o2.data(), x.data(), n);
            CHECK(o1 == o2);
            auto d1 = y, d2 = y;
            ks.relu_bwd(d1.data(), x.data(), o1.data(), n);
            kv.relu_bwd(d2.data(), x.data(), o2.data(), n);
            CHECK(d1 == d2);
        }
        {
            std::vector<float> o1(n), o2(n);
            const float bshift = static_cast<float>(rng.normal(0.0, 1.0));
            ks.affine(o1.data(), x.data(), a, bshift, n);
            kv.affine(o2.data(), x.data(), a, bshift, n);
            for (std::size_t i = 0; i < n; ++i)
                CHECK(o1[i] == doctest::Approx(o2[i]).epsilon(1e-6));
            auto c1 = x, c2 = x;
            ks.addc(c1.data(), a, n);
            kv.addc(c2.data(), a, n);
            CHECK(c1 == c2);
            auto m1 = y, m2 = y;
            ks.vmac(m1.data(), x.data(), o1.data(), n);
            kv.vmac(m2.data(), x.data(), o2.data(), n);
            for (std::size_t i = 0; i < n; ++i)
                CHECK(m1[i] == doctest::Approx(m2[i]).epsilon(1e-6));
        }
        {
            const float tol = 1e-5f * static_cast<float>(n);
            CHECK(ks.dot(x.data(), y.data(), n) ==
                  doctest::Approx(kv.dot(x.data(), y.data(), n)).epsilon(1e-5).scale(tol));
            CHECK(ks.sum(x.data(), n) ==
                  doctest::Approx(kv.sum(x.data(), n)).epsilon(1e-5).scale(tol));
            CHECK(ks.sumsq(x.data(), n) ==
                  doctest::Approx(kv.sumsq(x.data(), n)).epsilon(1e-5).scale(tol));
        }
    }
}

TEST_CASE("strided variants agree with dense loops") {
    Rng rng(7);
    const std::size_t n = 33;
    auto x = random_vec(3 * n, rng);
    auto y = random_vec(2 * n, rng);

    auto y_ref = y;
    for (std::size_t i = 0; i < n; ++i) y_ref[i * 2] += 0.5f * x[i * 3];
    auto y_got = y;
    kern::axpy_strided(y_got.data(), 2, x.data(), 3, 0.5f, n);
    for (std::size_t i = 0; i < y.size(); ++i)
        CHECK(y_got[i] == doctest::Approx(y_ref[i]).epsilon(1e-6));

    double dref = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        dref += static_cast<double>(x[i * 3]) * y[i * 2];
    CHECK(kern::dot_strided(x.data(), 3, y.data(), 2, n) ==
          doctest::Approx(dref).epsilon(1e-5));

    // stride-1 path must route through the active table
    auto y1 = y, y2 = y;
    kern::axpy_strided(y1.data(), 1, x.data(), 1, 0.25f, n);
    kern::table().axpy(y2.data(), x.data(), 0.25f, n);
    CHECK(y1 == y2);
}
