#include "gradmem/costmodel.hpp"

#include <cmath>
#include <string>

#include "gradmem/common.hpp"

namespace gradmem {

void CostParams::validate() const {
    if (!(c > m)) throw ConfigError("cost model: context length c must exceed memory size m");
    if (m < 0) throw ConfigError("cost model: m must be >= 0");
    if (q < 1) throw ConfigError("cost model: q must be >= 1");
    if (!(r > 0)) throw ConfigError("cost model: R must be > 0");
    if (k < 0) throw ConfigError("cost model: K must be >= 0");
}

namespace {

double t_full_at(const CostParams& p, double n) { return p.c * p.c + p.c * p.q * n; }

double t_gradmem_at(const CostParams& p, double n) {
    return p.r * (p.c + p.m) * (p.c + p.m) * p.k + p.m * p.m + p.m * p.q * n;
}

}  // namespace

CostSummary cost_model(const CostParams& p) {
    p.validate();
    CostSummary s;
    s.t_full = t_full_at(p, p.n);
    s.t_gradmem = t_gradmem_at(p, p.n);
    s.ratio = s.t_full / s.t_gradmem;
    return s;
}

double break_even_threshold(const CostParams& p) {
    p.validate();
    const double rk = p.r * p.k;
    return (p.c * p.c * (rk - 1.0) + (1.0 + rk) * p.m * p.m + 2.0 * p.c * p.m * rk) / (p.q * (p.c - p.m));
}

double break_even_heuristic(const CostParams& p) {
    p.validate();
    return p.c * (p.r * p.k - 1.0) / p.q;
}

int64_t break_even(const CostParams& p) {
    p.validate();
    // t_full - t_gradmem is linear in N with positive slope q(c-m), so the
    // scan terminates at the first crossing.
    const double threshold = break_even_threshold(p);
    int64_t n = 1;
    constexpr int64_t kScanCap = 1'000'000'000;
    while (n < kScanCap && !(t_full_at(p, static_cast<double>(n)) > t_gradmem_at(p, static_cast<double>(n)))) ++n;
    if (n >= kScanCap) throw ConfigError("break_even: threshold beyond scan cap");

    const int64_t closed = static_cast<int64_t>(std::floor(threshold)) + 1;
    const int64_t closed_min = closed < 1 ? 1 : closed;
    if (closed_min != n)
        throw TapeError("break_even: closed form (" + std::to_string(closed_min) + ") disagrees with scan (" +
                        std::to_string(n) + ")");
    return n;
}

}  // namespace gradmem
