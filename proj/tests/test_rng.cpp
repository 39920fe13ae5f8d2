#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pfd2m/pfd2m.hpp"

using namespace pfd2m;

TEST_CASE("rng streams are reproducible") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng c(124);
    REQUIRE(Rng(123).next_u64() != c.next_u64());
}

TEST_CASE("mix_u64 is the splitmix64 finalizer") {
    // canonical splitmix64 first output for state 0
    REQUIRE(mix_u64(0) == 0xe220a8397b1dcdafULL);
}

TEST_CASE("derive_seed separates streams") {
    REQUIRE(derive_seed(1, 0) != derive_seed(1, 1));
    REQUIRE(derive_seed(1, 0) != derive_seed(2, 0));
    REQUIRE(derive_seed(5, 7) == derive_seed(5, 7));
}

TEST_CASE("uniform stays in range and fills the unit interval") {
    Rng rng(5);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        sum += u;
    }
    CHECK(lo < 0.01);
    CHECK(hi > 0.99);
    CHECK(sum / n == Catch::Approx(0.5).margin(0.01));

    const double x = rng.uniform(-3.0, 7.0);
    REQUIRE(x >= -3.0);
    REQUIRE(x < 7.0);
}

TEST_CASE("below is bounded and covers small ranges") {
    Rng rng(6);
    bool seen[5] = {};
    for (int i = 0; i < 1000; ++i) {
        const uint64_t k = rng.below(5);
        REQUIRE(k < 5);
        seen[k] = true;
    }
    for (bool s : seen) REQUIRE(s);
}

TEST_CASE("gaussian moments") {
    Rng rng(7);
    const int n = 50000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double g = rng.gaussian();
        sum += g;
        sq += g * g;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(mean == Catch::Approx(0.0).margin(0.02));
    CHECK(var == Catch::Approx(1.0).margin(0.03));
}
