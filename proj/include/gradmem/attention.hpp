#pragma once

#include "gradmem/tape.hpp"

namespace gradmem {

enum class AttnStrategy { Generic, Manual };

inline constexpr NodeId kInvalidNode = -1;

inline const char* attn_strategy_name(AttnStrategy s) {
    return s == AttnStrategy::Generic ? "generic" : "manual";
}

// Scaled dot-product attention over [H*S, hd] inputs (head h at rows
// h*S..(h+1)*S). Two double-backward strategies: Generic composes tape
// primitives, so backwards-over-backwards comes from the recorded tape;
// Manual records one fused node whose derivative rules are the analytic
// backward and double backward. Both produce identical values and first-
// and second-order gradients up to 64-bit roundoff.
template <class Real>
NodeId attention(Tape<Real>& tp, NodeId q, NodeId k, NodeId v, int64_t heads, bool causal, AttnStrategy strategy) {
    const auto& tq = tp.value(q);
    if (tq.rows() == 0 || heads <= 0 || tq.rows() % heads != 0)
        throw TapeError("attention: rows must be a positive multiple of heads");
    if (!tp.value(k).same_shape(tq) || !tp.value(v).same_shape(tq))
        throw TapeError("attention: q/k/v shapes must match");
    if (strategy == AttnStrategy::Manual) return tp.attention_fused(q, k, v, heads, causal);

    const int64_t s = tq.rows() / heads;
    const int64_t hd = tq.cols();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    NodeId mask = kInvalidNode;
    if (causal && s > 1) {
        Tensor<Real> m{Dims{s, s}};
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = i + 1; j < s; ++j) m.at(i, j) = Real(-1e30);
        mask = tp.constant(std::move(m));
    }

    std::vector<NodeId> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int64_t h = 0; h < heads; ++h) {
        const NodeId qh = heads == 1 ? q : tp.slice_rows(q, h * s, (h + 1) * s);
        const NodeId kh = heads == 1 ? k : tp.slice_rows(k, h * s, (h + 1) * s);
        const NodeId vh = heads == 1 ? v : tp.slice_rows(v, h * s, (h + 1) * s);
        NodeId scores = tp.scale(tp.matmul(qh, tp.transpose(kh)), inv_sqrt);
        if (mask != kInvalidNode) scores = tp.add(scores, mask);
        outs.push_back(tp.matmul(tp.softmax(scores), vh));
    }
    return outs.size() == 1 ? outs[0] : tp.concat_rows(outs);
}

}  // namespace gradmem
