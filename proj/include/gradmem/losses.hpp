#pragma once

#include <memory>
#include <vector>

#include "gradmem/tape.hpp"

namespace gradmem {

enum class Reduction { Mean, Sum };

template <class Real>
struct CrossEntropyNodes {
    NodeId loss;     // rank-0
    NodeId per_pos;  // [S,1] NLL per row (unmasked rows included)
};

// Masked softmax cross entropy. The row max enters as a constant shift; the
// loss is exactly invariant to it, so gradients of every order are unaffected
// while the exp stays in range.
template <class Real>
CrossEntropyNodes<Real> softmax_cross_entropy_nodes(Tape<Real>& tp, NodeId logits,
                                                    const std::vector<int32_t>& targets,
                                                    const std::vector<uint8_t>& position_mask,
                                                    Reduction reduction = Reduction::Mean) {
    const auto& lg = tp.value(logits);
    const int64_t s = lg.rows(), vocab = lg.cols();
    if (static_cast<int64_t>(targets.size()) != s || static_cast<int64_t>(position_mask.size()) != s)
        throw TapeError("softmax_cross_entropy: targets/mask length must equal rows");
    int64_t n_active = 0;
    for (uint8_t m : position_mask) n_active += m ? 1 : 0;
    if (n_active == 0) throw TapeError("softmax_cross_entropy: empty position mask");

    Tensor<Real> shift{Dims{s, 1}};
    Tensor<Real> onehot{Dims{s, vocab}};
    Tensor<Real> mask{Dims{s, 1}};
    for (int64_t i = 0; i < s; ++i) {
        const int32_t t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= vocab) throw TapeError("softmax_cross_entropy: target id out of vocabulary");
        Real mx = lg.at(i, 0);
        for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, lg.at(i, j));
        shift.data[static_cast<size_t>(i)] = mx;
        onehot.at(i, t) = Real(1);
        mask.data[static_cast<size_t>(i)] = position_mask[static_cast<size_t>(i)] ? Real(1) : Real(0);
    }

    const NodeId z = tp.sub(logits, tp.row_bcast(tp.constant(std::move(shift)), vocab));
    const NodeId lse = tp.log_(tp.row_sum(tp.exp_(z)));
    const NodeId picked = tp.row_sum(tp.mul(z, tp.constant(std::move(onehot))));
    const NodeId per_pos = tp.sub(lse, picked);
    const NodeId masked = tp.mul(per_pos, tp.constant(std::move(mask)));
    NodeId loss = tp.reduce_sum(masked);
    if (reduction == Reduction::Mean) loss = tp.scale(loss, 1.0 / static_cast<double>(n_active));
    return {loss, per_pos};
}

template <class Real>
NodeId softmax_cross_entropy(Tape<Real>& tp, NodeId logits, const std::vector<int32_t>& targets,
                             const std::vector<uint8_t>& position_mask, Reduction reduction = Reduction::Mean) {
    return softmax_cross_entropy_nodes(tp, logits, targets, position_mask, reduction).loss;
}

// Differentiable global-norm clipping: g <- g * min(1, clip / ||g||).
template <class Real>
struct ClipResult {
    NodeId clipped;
    double norm_before;
    double norm_after;
};

template <class Real>
ClipResult<Real> clip_by_global_norm(Tape<Real>& tp, NodeId g, double clip_norm) {
    const double norm = tp.value(g).norm2();
    if (clip_norm <= 0.0) return {g, norm, norm};
    const NodeId sq = tp.reduce_sum(tp.pow_c(g, 2.0));
    const NodeId nrm = tp.pow_c(tp.affine(sq, 1.0, 1e-12), 0.5);
    const NodeId factor = tp.min_c(tp.scale(tp.pow_c(nrm, -1.0), clip_norm), 1.0);
    const NodeId clipped = tp.mul(g, tp.full_bcast(factor, tp.dims(g)));
    return {clipped, norm, tp.value(clipped).norm2()};
}

}  // namespace gradmem
