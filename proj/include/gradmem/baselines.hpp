#pragma once

#include "gradmem/engine.hpp"

namespace gradmem {

// Forward-only memory writer (recurrent-memory style). Each repeat runs one
// forward over [read-memory prefix; context; write-memory suffix] and takes
// the final hidden states at the suffix positions as the next memory.
struct RmtConfig {
    int repeats = 1;

    void validate() const {
        if (repeats < 1 || repeats > 8) throw ConfigError("rmt: repeats must be in [1, 8]");
    }
};

template <class Real>
NodeId build_rmt_write(Tape<Real>& tp, const ParamNodes<Real>& pn, std::span<const int32_t> context_ids,
                       const RmtConfig& cfg) {
    cfg.validate();
    if (!pn.params->cfg.rmt_write_mem)
        throw ConfigError("rmt_write: model was built without write-memory suffix vectors");
    if (context_ids.empty()) throw TapeError("rmt_write: empty context");
    const int64_t m = pn.params->cfg.mem_tokens;
    const int64_t n = static_cast<int64_t>(context_ids.size());

    auto ids = std::make_shared<const std::vector<int32_t>>(context_ids.begin(), context_ids.end());
    NodeId mem = apply_mem_projection(tp, pn, pn.at("mem.init"), MemDirection::In);
    for (int rep = 0; rep < cfg.repeats; ++rep) {
        const NodeId emb = tp.lookup_rows(pn.at("tok_emb"), ids);
        const NodeId segs[3] = {mem, emb, pn.at("mem.write_suffix")};
        const NodeId hidden = build_hidden(tp, pn, std::span<const NodeId>(segs, 3));
        mem = tp.slice_rows(hidden, m + n, m + n + m);
    }
    return apply_mem_projection(tp, pn, mem, MemDirection::Out);
}

template <class Real>
MemoryState<Real> rmt_write(const ModelParams<Real>& params, std::span<const int32_t> context_ids,
                            const RmtConfig& cfg) {
    Tape<Real> tp;
    const auto pn = push_params(tp, params);
    const NodeId mem = build_rmt_write(tp, pn, context_ids, cfg);
    return {tp.value(mem), cfg.repeats};
}

// Full-attention upper bound: standard causal LM loss of the target after
// [context; query], no memory involved.
template <class Real>
NodeId build_full_attention_loss(Tape<Real>& tp, const ParamNodes<Real>& pn, std::span<const int32_t> context_ids,
                                 std::span<const int32_t> query_ids, std::span<const int32_t> target_ids) {
    if (target_ids.empty()) throw TapeError("full_attention_loss: empty target");
    if (context_ids.empty() && query_ids.empty())
        throw TapeError("full_attention_loss: need at least one conditioning token");
    std::vector<int32_t> tokens(context_ids.begin(), context_ids.end());
    tokens.insert(tokens.end(), query_ids.begin(), query_ids.end());
    tokens.insert(tokens.end(), target_ids.begin(), target_ids.end());
    const NodeId full = build_full_logits(tp, pn, kInvalidNode, tokens, Head::Read);
    const int64_t base = static_cast<int64_t>(context_ids.size() + query_ids.size()) - 1;
    const NodeId rows = tp.slice_rows(full, base, base + static_cast<int64_t>(target_ids.size()));
    const std::vector<int32_t> targets(target_ids.begin(), target_ids.end());
    const std::vector<uint8_t> mask(target_ids.size(), uint8_t{1});
    return softmax_cross_entropy(tp, rows, targets, mask, Reduction::Mean);
}

template <class Real>
double full_attention_loss(const ModelParams<Real>& params, std::span<const int32_t> context_ids,
                           std::span<const int32_t> query_ids, std::span<const int32_t> target_ids) {
    Tape<Real> tp;
    const auto pn = push_params(tp, params);
    return static_cast<double>(
        tp.value(build_full_attention_loss(tp, pn, context_ids, query_ids, target_ids)).data[0]);
}

}  // namespace gradmem
