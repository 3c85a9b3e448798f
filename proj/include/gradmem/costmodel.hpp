#pragma once

#include <cstdint>

namespace gradmem {

// Abstract compute-cost model comparing full-context inference against a
// one-time gradient WRITE plus memory-only READs, in units of one context
// forward pass. R is the cost ratio of one memory-update step to one forward.
struct CostParams {
    double c = 0;   // context tokens
    double q = 0;   // query tokens
    double m = 0;   // memory tokens
    double n = 0;   // queries per context
    double r = 0;   // update-step / forward cost ratio
    double k = 0;   // write steps

    void validate() const;  // throws ConfigError (requires c > m >= 0, q >= 1, r > 0, k >= 0)
};

struct CostSummary {
    double t_full = 0;     // c^2 + c*q*N
    double t_gradmem = 0;  // R*(c+m)^2*K + m^2 + m*q*N
    double ratio = 0;      // t_full / t_gradmem
};

CostSummary cost_model(const CostParams& p);

// Exact break-even threshold: N > (c^2(RK-1) + (1+RK)m^2 + 2cmRK) / (q(c-m)).
double break_even_threshold(const CostParams& p);

// Heuristic threshold c(RK-1)/q for the m << c regime.
double break_even_heuristic(const CostParams& p);

// Least integer N with t_full > t_gradmem, found by scanning N upward and
// cross-checked against the closed form (throws TapeError on disagreement).
int64_t break_even(const CostParams& p);

}  // namespace gradmem
