#include <doctest.h>

#include <cmath>

#include "gradmem/common.hpp"
#include "gradmem/costmodel.hpp"
#include "gradmem/rng.hpp"

using namespace gradmem;

TEST_CASE("worked example: c=1024 q=128 m=32 R=3 K=1 breaks even at 19") {
    CostParams p{1024, 128, 32, 0, 3, 1};
    CHECK(break_even_threshold(p) == doctest::Approx(18.097).epsilon(1e-3));
    CHECK(break_even(p) == 19);
}

TEST_CASE("RK=1 with m=0: any reuse wins") {
    CostParams p{512, 64, 0, 0, 1, 1};
    CHECK(break_even(p) == 1);
}

TEST_CASE("cost formulas at a point") {
    CostParams p{100, 10, 4, 7, 2, 3};
    const auto s = cost_model(p);
    CHECK(s.t_full == doctest::Approx(100.0 * 100 + 100 * 10 * 7));
    CHECK(s.t_gradmem == doctest::Approx(2.0 * 104 * 104 * 3 + 16 + 4 * 10 * 7));
    CHECK(s.ratio == doctest::Approx(s.t_full / s.t_gradmem));
}

TEST_CASE("validation: c <= m and bad parameters are rejected") {
    CHECK_THROWS_AS((void)cost_model(CostParams{32, 8, 32, 1, 3, 1}), ConfigError);
    CHECK_THROWS_AS((void)cost_model(CostParams{32, 0, 8, 1, 3, 1}), ConfigError);
    CHECK_THROWS_AS((void)cost_model(CostParams{32, 8, 8, 1, 0, 1}), ConfigError);
}

TEST_CASE("break_even agrees with a brute-force scan on 1000 random draws") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        CostParams p;
        p.c = 8.0 + static_cast<double>(rng.uniform_below(1017));
        p.m = static_cast<double>(rng.uniform_below(static_cast<uint64_t>(p.c / 2)));
        p.q = 16.0 + static_cast<double>(rng.uniform_below(241));
        p.r = 0.5 + 3.5 * rng.uniform01();
        p.k = static_cast<double>(rng.uniform_below(6));

        // brute force: evaluate both costs directly, walk up from N=1
        int64_t expected = -1;
        for (int64_t n = 1; n < 2'000'000; ++n) {
            const double tf = p.c * p.c + p.c * p.q * static_cast<double>(n);
            const double tg =
                p.r * (p.c + p.m) * (p.c + p.m) * p.k + p.m * p.m + p.m * p.q * static_cast<double>(n);
            if (tf > tg) {
                expected = n;
                break;
            }
        }
        REQUIRE(expected > 0);
        CHECK(break_even(p) == expected);
    }
}

TEST_CASE("heuristic threshold is within 20% of exact when m << c") {
    CostParams p{4096, 64, 8, 0, 3, 2};
    const double exact = break_even_threshold(p);
    const double heur = break_even_heuristic(p);
    CHECK(std::abs(heur - exact) / exact <= 0.2);
}
