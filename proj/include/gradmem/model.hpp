#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradmem/attention.hpp"
#include "gradmem/checkpoint.hpp"
#include "gradmem/rng.hpp"
#include "gradmem/tape.hpp"

namespace gradmem {

enum class Head { Write, Read };

// Miniature Llama-style decoder: pre-RMSNorm, rotary positions, SwiGLU MLP,
// no biases. A writable memory prefix occupies rotary positions 0..m-1;
// tokens follow at m.. in every phase.
struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int vocab_size = 66;
    int max_seq = 1024;
    int mem_tokens = 8;
    bool mem_projection = true;
    bool dual_heads = true;
    bool rmt_write_mem = false;  // adds the learned write-memory suffix vectors
    AttnStrategy attn = AttnStrategy::Manual;

    int head_dim() const { return d_model / n_heads; }
    int mlp_hidden() const { return ((4 * d_model + 7) / 8) * 8; }

    void validate() const {
        if (n_layers < 1 || d_model < 2 || n_heads < 1) throw ConfigError("model: bad layer/width config");
        if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
        if (head_dim() % 2 != 0) throw ConfigError("model: head_dim must be even for rotary positions");
        if (mem_tokens < 1) throw ConfigError("model: mem_tokens must be >= 1");
        if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
        if (max_seq < mem_tokens + 2) throw ConfigError("model: max_seq too small");
    }
};

template <class Real>
struct ModelParams {
    ModelConfig cfg;
    std::vector<std::string> names;
    std::vector<Tensor<Real>> tensors;

    int index(const std::string& name) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        throw ConfigError("model params: unknown tensor '" + name + "'");
    }
    const Tensor<Real>& at(const std::string& name) const { return tensors[static_cast<size_t>(index(name))]; }
    Tensor<Real>& at(const std::string& name) { return tensors[static_cast<size_t>(index(name))]; }
    bool has(const std::string& name) const {
        for (const auto& n : names)
            if (n == name) return true;
        return false;
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& t : tensors) n += t.numel();
        return n;
    }

    void push(std::string name, Tensor<Real> t) {
        names.push_back(std::move(name));
        tensors.push_back(std::move(t));
    }
};

// Deterministic initialization: scaled normals (std 0.02), residual output
// projections downscaled by 1/sqrt(2*n_layers), norms at one, memory
// projections at identity. Per-tensor streams are derived from the name, so
// the same (config, seed) is bit-identical regardless of flag combinations.
template <class Real>
ModelParams<Real> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams<Real> p;
    p.cfg = cfg;
    const Real base_std = Real(0.02);
    const Real out_std = static_cast<Real>(0.02 / std::sqrt(2.0 * cfg.n_layers));

    auto normal = [&](const std::string& name, Dims d, Real std_dev) {
        Rng rng(mix64(seed, fnv1a(name)));
        p.push(name, Tensor<Real>::randn(std::move(d), rng, std_dev));
    };

    const int64_t d = cfg.d_model, h = cfg.mlp_hidden(), v = cfg.vocab_size;
    normal("tok_emb", {v, d}, base_std);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        p.push(pre + "attn_norm", Tensor<Real>::full({d}, Real(1)));
        normal(pre + "wq", {d, d}, base_std);
        normal(pre + "wk", {d, d}, base_std);
        normal(pre + "wv", {d, d}, base_std);
        normal(pre + "wo", {d, d}, out_std);
        p.push(pre + "mlp_norm", Tensor<Real>::full({d}, Real(1)));
        normal(pre + "w_gate", {d, h}, base_std);
        normal(pre + "w_up", {d, h}, base_std);
        normal(pre + "w_down", {h, d}, out_std);
    }
    p.push("final_norm", Tensor<Real>::full({d}, Real(1)));
    if (cfg.dual_heads) {
        normal("head.write", {d, v}, base_std);
        normal("head.read", {d, v}, base_std);
    } else {
        normal("head.out", {d, v}, base_std);
    }
    if (cfg.mem_projection) {
        p.push("mem.in_proj", Tensor<Real>::identity(d));
        p.push("mem.out_proj", Tensor<Real>::identity(d));
    }
    normal("mem.init", {cfg.mem_tokens, d}, base_std);
    if (cfg.rmt_write_mem) normal("mem.write_suffix", {cfg.mem_tokens, d}, base_std);
    return p;
}

// Tape leaves for every parameter tensor (borrowed; params must outlive the
// tape and stay unmutated while it runs).
template <class Real>
struct ParamNodes {
    const ModelParams<Real>* params = nullptr;
    std::vector<NodeId> ids;

    NodeId at(const std::string& name) const { return ids[static_cast<size_t>(params->index(name))]; }
    NodeId head(Head which) const {
        if (!params->cfg.dual_heads) return at("head.out");
        return at(which == Head::Write ? "head.write" : "head.read");
    }
};

template <class Real>
ParamNodes<Real> push_params(Tape<Real>& tp, const ModelParams<Real>& params) {
    ParamNodes<Real> pn;
    pn.params = &params;
    pn.ids.reserve(params.tensors.size());
    for (const auto& t : params.tensors) pn.ids.push_back(tp.input_borrowed(&t));
    return pn;
}

namespace detail {

template <class Real>
NodeId rmsnorm(Tape<Real>& tp, NodeId x, NodeId weight) {
    const int64_t c = tp.value(x).cols();
    const NodeId ms = tp.scale(tp.row_sum(tp.pow_c(x, 2.0)), 1.0 / static_cast<double>(c));
    const NodeId r = tp.pow_c(tp.affine(ms, 1.0, 1e-6), -0.5);
    const NodeId normed = tp.mul(x, tp.row_bcast(r, c));
    return tp.mul(normed, tp.col_bcast(weight, tp.value(x).rows()));
}

template <class Real>
NodeId fold_heads(Tape<Real>& tp, NodeId x, int heads) {
    if (heads == 1) return x;
    const int64_t c = tp.value(x).cols();
    const int64_t hd = c / heads;
    std::vector<NodeId> parts;
    parts.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) parts.push_back(tp.slice_cols(x, h * hd, (h + 1) * hd));
    return tp.concat_rows(parts);
}

template <class Real>
NodeId unfold_heads(Tape<Real>& tp, NodeId x, int heads) {
    if (heads == 1) return x;
    const int64_t rows = tp.value(x).rows() / heads;
    std::vector<NodeId> parts;
    parts.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) parts.push_back(tp.slice_rows(x, h * rows, (h + 1) * rows));
    return tp.concat_cols(parts);
}

}  // namespace detail

// Decoder over a row-contiguous sequence of embedding segments; rotary
// position equals the row index. Returns the final-norm hidden states [T,d].
template <class Real>
NodeId build_hidden(Tape<Real>& tp, const ParamNodes<Real>& pn, std::span<const NodeId> segments) {
    const ModelConfig& cfg = pn.params->cfg;
    NodeId x = segments.size() == 1 ? segments[0] : tp.concat_rows(segments);
    const int64_t t = tp.value(x).rows();
    if (t > cfg.max_seq) throw TapeError("model: sequence overflow (" + std::to_string(t) + " > max_seq)");

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        const NodeId hn = detail::rmsnorm(tp, x, pn.at(pre + "attn_norm"));
        const NodeId q = tp.rope(tp.matmul(hn, pn.at(pre + "wq")), 0, cfg.head_dim());
        const NodeId k = tp.rope(tp.matmul(hn, pn.at(pre + "wk")), 0, cfg.head_dim());
        const NodeId v = tp.matmul(hn, pn.at(pre + "wv"));
        NodeId merged;
        if (cfg.attn == AttnStrategy::Manual) {
            // fused kernels consume the packed [T, H*hd] layout directly
            merged = tp.attention_fused(q, k, v, cfg.n_heads, /*causal=*/true, attnk::Layout::PackedCols);
        } else {
            const NodeId att = attention(tp, detail::fold_heads(tp, q, cfg.n_heads),
                                         detail::fold_heads(tp, k, cfg.n_heads),
                                         detail::fold_heads(tp, v, cfg.n_heads), cfg.n_heads,
                                         /*causal=*/true, AttnStrategy::Generic);
            merged = detail::unfold_heads(tp, att, cfg.n_heads);
        }
        x = tp.add(x, tp.matmul(merged, pn.at(pre + "wo")));

        const NodeId mn = detail::rmsnorm(tp, x, pn.at(pre + "mlp_norm"));
        const NodeId gate = tp.matmul(mn, pn.at(pre + "w_gate"));
        const NodeId up = tp.matmul(mn, pn.at(pre + "w_up"));
        const NodeId act = tp.mul(tp.mul(gate, tp.sigmoid(gate)), up);
        x = tp.add(x, tp.matmul(act, pn.at(pre + "w_down")));
    }
    return detail::rmsnorm(tp, x, pn.at("final_norm"));
}

// Full-sequence logits [m + n_tokens, vocab] for [memory?; tokens] under the
// selected output head. Memory may be absent (plain transformer mode).
template <class Real>
NodeId build_full_logits(Tape<Real>& tp, const ParamNodes<Real>& pn, NodeId memory,
                         std::span<const int32_t> token_ids, Head head) {
    if (token_ids.empty()) throw TapeError("model: empty token sequence");
    auto ids = std::make_shared<const std::vector<int32_t>>(token_ids.begin(), token_ids.end());
    for (int32_t id : *ids)
        if (id < 0 || id >= pn.params->cfg.vocab_size) throw TapeError("model: token id out of vocabulary");
    const NodeId emb = tp.lookup_rows(pn.at("tok_emb"), std::move(ids));
    NodeId hidden;
    if (memory != kInvalidNode) {
        const NodeId segs[2] = {memory, emb};
        hidden = build_hidden(tp, pn, std::span<const NodeId>(segs, 2));
    } else {
        const NodeId segs[1] = {emb};
        hidden = build_hidden(tp, pn, std::span<const NodeId>(segs, 1));
    }
    return tp.matmul(hidden, pn.head(head));
}

// Logits restricted to token positions (memory rows dropped).
template <class Real>
NodeId build_token_logits(Tape<Real>& tp, const ParamNodes<Real>& pn, NodeId memory,
                          std::span<const int32_t> token_ids, Head head) {
    const NodeId full = build_full_logits(tp, pn, memory, token_ids, head);
    if (memory == kInvalidNode) return full;
    const int64_t m = tp.value(memory).rows();
    return tp.slice_rows(full, m, m + static_cast<int64_t>(token_ids.size()));
}

enum class MemDirection { In, Out };

// Learned linear map on the memory: In before the write loop, Out after it.
// Identity passthrough when the projection flag is off.
template <class Real>
NodeId apply_mem_projection(Tape<Real>& tp, const ParamNodes<Real>& pn, NodeId memory, MemDirection dir) {
    if (!pn.params->cfg.mem_projection) return memory;
    return tp.matmul(memory, pn.at(dir == MemDirection::In ? "mem.in_proj" : "mem.out_proj"));
}

// Value-level convenience: logits at token positions for [memory?; tokens].
template <class Real>
Tensor<Real> forward(const ModelParams<Real>& params, const Tensor<Real>* memory,
                     std::span<const int32_t> token_ids, Head head) {
    Tape<Real> tp;
    const ParamNodes<Real> pn = push_params(tp, params);
    const NodeId mem = memory ? tp.input(*memory) : kInvalidNode;
    return tp.value(build_token_logits(tp, pn, mem, token_ids, head));
}

// ----- checkpoint glue -----

template <class Real>
NamedTensorFile params_to_file(const ModelParams<Real>& p) {
    NamedTensorFile f;
    for (size_t i = 0; i < p.names.size(); ++i)
        f.entries.push_back(NamedTensorFile::Entry::make(p.names[i], p.tensors[i]));
    return f;
}

template <class Real>
void load_params_from_file(ModelParams<Real>& p, const NamedTensorFile& f) {
    for (size_t i = 0; i < p.names.size(); ++i) {
        const auto& e = f.require(p.names[i]);
        if (e.dims != p.tensors[i].dims)
            throw IoError("checkpoint: shape mismatch for '" + p.names[i] + "': file " + dims_str(e.dims) +
                          " vs model " + dims_str(p.tensors[i].dims));
        p.tensors[i] = e.template as<Real>();
    }
}

}  // namespace gradmem
