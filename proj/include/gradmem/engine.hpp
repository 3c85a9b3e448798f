#pragma once

#include <cmath>
#include <exception>
#include <functional>
#include <thread>

#include "gradmem/kvdata.hpp"
#include "gradmem/losses.hpp"
#include "gradmem/model.hpp"

namespace gradmem {

// Inner-loop controls for the gradient WRITE.
struct WriteConfig {
    int k = 1;                 // gradient steps on the memory
    double alpha = 0.4;        // inner learning rate
    double clip_norm = 1.0;    // global-norm cap on the memory gradient; 0 disables
    bool first_order = false;  // stop-gradient through inner gradients
    Reduction reduction = Reduction::Mean;  // write-loss reduction over context positions

    void validate() const {
        if (k < 0) throw ConfigError("write config: K must be >= 0");
        if (alpha < 0) throw ConfigError("write config: alpha must be >= 0");
        if (clip_norm < 0) throw ConfigError("write config: clip_norm must be >= 0");
    }
};

// Memory vectors after k write steps.
template <class Real>
struct MemoryState {
    Tensor<Real> values;  // [m, d]
    int step = 0;
};

// Per-step diagnostics of one WRITE. Losses have K+1 entries (step 0 through
// K); gradient norms have K (one per update).
struct InnerTrace {
    std::vector<double> loss;
    std::vector<double> key_loss, value_loss, delim_loss;
    std::vector<double> grad_norm_pre, grad_norm_post;

    void accumulate(const InnerTrace& o) {
        auto acc = [](std::vector<double>& a, const std::vector<double>& b) {
            if (a.empty()) a.assign(b.size(), 0.0);
            for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
        };
        acc(loss, o.loss);
        acc(key_loss, o.key_loss);
        acc(value_loss, o.value_loss);
        acc(delim_loss, o.delim_loss);
        acc(grad_norm_pre, o.grad_norm_pre);
        acc(grad_norm_post, o.grad_norm_post);
    }
    void scale(double s) {
        for (auto* v : {&loss, &key_loss, &value_loss, &delim_loss, &grad_norm_pre, &grad_norm_post})
            for (double& x : *v) x *= s;
    }
};

template <class Real>
struct WriteLossNodes {
    NodeId loss;
    NodeId per_pos;  // [N,1] NLL of t_i given [M; t_<i]
};

// Autoregressive reconstruction loss of the context under the WRITE head:
// mean NLL of t_i given [M; t_<i]; t_1 is predicted from the last memory row.
template <class Real>
WriteLossNodes<Real> build_write_loss(Tape<Real>& tp, const ParamNodes<Real>& pn, NodeId memory,
                                      std::span<const int32_t> context_ids,
                                      Reduction reduction = Reduction::Mean) {
    if (context_ids.empty()) throw TapeError("write_loss: empty context");
    const int64_t m = tp.value(memory).rows();
    const int64_t n = static_cast<int64_t>(context_ids.size());
    const NodeId full = build_full_logits(tp, pn, memory, context_ids, Head::Write);
    const NodeId pred = tp.slice_rows(full, m - 1, m + n - 1);
    const std::vector<int32_t> targets(context_ids.begin(), context_ids.end());
    const std::vector<uint8_t> mask(static_cast<size_t>(n), uint8_t{1});
    const auto ce = softmax_cross_entropy_nodes(tp, pred, targets, mask, reduction);
    return {ce.loss, ce.per_pos};
}

namespace detail {

inline void add_class_means(InnerTrace& trace, const std::vector<double>& per_pos,
                            std::span<const TokenClass> classes) {
    double sums[3] = {0, 0, 0};
    int64_t counts[3] = {0, 0, 0};
    for (size_t i = 0; i < per_pos.size(); ++i) {
        const int c = static_cast<int>(classes.empty() ? TokenClass::Delim : classes[i]);
        sums[c] += per_pos[i];
        ++counts[c];
    }
    auto mean = [&](TokenClass c) {
        const int i = static_cast<int>(c);
        return counts[i] ? sums[i] / static_cast<double>(counts[i]) : 0.0;
    };
    trace.key_loss.push_back(classes.empty() ? 0.0 : mean(TokenClass::Key));
    trace.value_loss.push_back(classes.empty() ? 0.0 : mean(TokenClass::Value));
    trace.delim_loss.push_back(classes.empty() ? 0.0 : mean(TokenClass::Delim));
}

template <class Real>
void record_trace_step(Tape<Real>& tp, InnerTrace& trace, const WriteLossNodes<Real>& wl,
                       std::span<const TokenClass> classes) {
    trace.loss.push_back(static_cast<double>(tp.value(wl.loss).data[0]));
    const auto& pp = tp.value(wl.per_pos);
    std::vector<double> per_pos(pp.data.begin(), pp.data.end());
    add_class_means(trace, per_pos, classes);
}

}  // namespace detail

template <class Real>
struct WriteNodes {
    NodeId mem_hat;  // out-projected M_K
    InnerTrace trace;
};

// The WRITE encoder on an existing tape: M0 -> in-projection -> K clipped
// gradient steps -> out-projection. With first_order=false the whole
// trajectory stays differentiable (the inner grad() records its backward as
// primitives); with first_order=true inner gradients re-enter as constants.
template <class Real>
WriteNodes<Real> build_write(Tape<Real>& tp, const ParamNodes<Real>& pn, std::span<const int32_t> context_ids,
                             const WriteConfig& cfg, std::span<const TokenClass> classes = {}) {
    cfg.validate();
    WriteNodes<Real> out;
    NodeId mem = apply_mem_projection(tp, pn, pn.at("mem.init"), MemDirection::In);
    for (int k = 0; k < cfg.k; ++k) {
        const auto wl = build_write_loss(tp, pn, mem, context_ids, cfg.reduction);
        detail::record_trace_step(tp, out.trace, wl, classes);
        NodeId g;
        try {
            g = tp.grad1(wl.loss, mem, /*keep_graph=*/!cfg.first_order);
        } catch (const TapeError& e) {
            throw TapeError("write step " + std::to_string(k) + ": " + e.what());
        }
        const auto clip = clip_by_global_norm(tp, g, cfg.clip_norm);
        out.trace.grad_norm_pre.push_back(clip.norm_before);
        out.trace.grad_norm_post.push_back(clip.norm_after);
        mem = tp.sub(mem, tp.scale(clip.clipped, cfg.alpha));
    }
    // final reconstruction quality at M_K (diagnostic; receives no gradient)
    const auto final_wl = build_write_loss(tp, pn, mem, context_ids, cfg.reduction);
    detail::record_trace_step(tp, out.trace, final_wl, classes);
    out.mem_hat = apply_mem_projection(tp, pn, mem, MemDirection::Out);
    return out;
}

// Value-level WRITE with one short-lived tape per step, for evaluation and
// the forward-only callers: peak memory stays at a single step's graph.
template <class Real>
std::pair<MemoryState<Real>, InnerTrace> write(const ModelParams<Real>& params,
                                               std::span<const int32_t> context_ids, const WriteConfig& cfg,
                                               std::span<const TokenClass> classes = {}) {
    cfg.validate();
    InnerTrace trace;
    Tensor<Real> mem_val;
    {
        Tape<Real> tp;
        const auto pn = push_params(tp, params);
        mem_val = tp.value(apply_mem_projection(tp, pn, pn.at("mem.init"), MemDirection::In));
    }
    for (int k = 0; k < cfg.k; ++k) {
        Tape<Real> tp;
        const auto pn = push_params(tp, params);
        const NodeId mem = tp.input(mem_val);
        const auto wl = build_write_loss(tp, pn, mem, context_ids, cfg.reduction);
        detail::record_trace_step(tp, trace, wl, classes);
        NodeId g;
        try {
            g = tp.grad1(wl.loss, mem, /*keep_graph=*/false);
        } catch (const TapeError& e) {
            throw TapeError("write step " + std::to_string(k) + ": " + e.what());
        }
        const auto clip = clip_by_global_norm(tp, g, cfg.clip_norm);
        trace.grad_norm_pre.push_back(clip.norm_before);
        trace.grad_norm_post.push_back(clip.norm_after);
        mem_val = tp.value(tp.sub(mem, tp.scale(clip.clipped, cfg.alpha)));
    }
    Tensor<Real> mem_hat;
    {
        Tape<Real> tp;
        const auto pn = push_params(tp, params);
        const NodeId mem = tp.input(mem_val);
        const auto wl = build_write_loss(tp, pn, mem, context_ids, cfg.reduction);
        detail::record_trace_step(tp, trace, wl, classes);
        mem_hat = tp.value(apply_mem_projection(tp, pn, mem, MemDirection::Out));
    }
    return {MemoryState<Real>{std::move(mem_hat), cfg.k}, std::move(trace)};
}

// READ loss: mean NLL of the target given [M_hat; Q; teacher-forced Y
// prefix] under the READ head. The context is not an input; predictions can
// depend on it only through the memory state. Memory may be absent for the
// plain full-attention route.
template <class Real>
NodeId build_read_loss(Tape<Real>& tp, const ParamNodes<Real>& pn, NodeId memory,
                       std::span<const int32_t> query_ids, std::span<const int32_t> target_ids) {
    if (target_ids.empty()) throw TapeError("read_loss: empty target");
    if (memory == kInvalidNode && query_ids.empty()) throw TapeError("read_loss: no memory and empty query");
    std::vector<int32_t> tokens(query_ids.begin(), query_ids.end());
    tokens.insert(tokens.end(), target_ids.begin(), target_ids.end());
    const NodeId full = build_full_logits(tp, pn, memory, tokens, Head::Read);
    const int64_t m = memory == kInvalidNode ? 0 : tp.value(memory).rows();
    const int64_t base = m + static_cast<int64_t>(query_ids.size()) - 1;
    const NodeId rows = tp.slice_rows(full, base, base + static_cast<int64_t>(target_ids.size()));
    const std::vector<int32_t> targets(target_ids.begin(), target_ids.end());
    const std::vector<uint8_t> mask(target_ids.size(), uint8_t{1});
    return softmax_cross_entropy(tp, rows, targets, mask, Reduction::Mean);
}

template <class Real>
double read_loss(const ModelParams<Real>& params, const Tensor<Real>* memory,
                 std::span<const int32_t> query_ids, std::span<const int32_t> target_ids) {
    Tape<Real> tp;
    const auto pn = push_params(tp, params);
    const NodeId mem = memory ? tp.input(*memory) : kInvalidNode;
    return static_cast<double>(tp.value(build_read_loss(tp, pn, mem, query_ids, target_ids)).data[0]);
}

// Greedy decoding under the READ head; EM requires every token to match.
template <class Real>
std::vector<int32_t> predict(const ModelParams<Real>& params, const Tensor<Real>* memory,
                             std::span<const int32_t> query_ids, int answer_len = 2) {
    if (answer_len < 1) throw ConfigError("predict: answer_len must be >= 1");
    std::vector<int32_t> tokens(query_ids.begin(), query_ids.end());
    std::vector<int32_t> answer;
    for (int i = 0; i < answer_len; ++i) {
        Tape<Real> tp;
        const auto pn = push_params(tp, params);
        const NodeId mem = memory ? tp.input(*memory) : kInvalidNode;
        const NodeId full = build_full_logits(tp, pn, mem, tokens, Head::Read);
        const auto& logits = tp.value(full);
        const int64_t last = logits.rows() - 1;
        int32_t best = 0;
        for (int64_t j = 1; j < logits.cols(); ++j)
            if (logits.at(last, j) > logits.at(last, best)) best = static_cast<int32_t>(j);
        answer.push_back(best);
        tokens.push_back(best);
    }
    return answer;
}

inline bool exact_match(const std::vector<int32_t>& prediction, const std::vector<int32_t>& target) {
    return prediction == target;
}

// ----- outer loop -----

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;  // decoupled; rank-1 tensors (norms) excluded
    double clip = 1.0;           // global norm on outer grads; 0 disables
};

template <class Real>
struct AdamState {
    std::vector<Tensor<Real>> m, v;
    int64_t t = 0;

    static AdamState init(const ModelParams<Real>& params) {
        AdamState s;
        for (const auto& p : params.tensors) {
            s.m.push_back(Tensor<Real>::zeros(p.dims));
            s.v.push_back(Tensor<Real>::zeros(p.dims));
        }
        return s;
    }
};

struct MetaMetrics {
    double outer_loss = 0;
    double outer_grad_norm_pre = 0;
    double outer_grad_norm_post = 0;
    InnerTrace trace;  // batch mean
};

template <class Real>
struct SampleGrads {
    double loss = 0;
    std::vector<Tensor<Real>> grads;
    InnerTrace trace;
};

// One sample's task loss and gradients wrt every parameter (theta and M0),
// differentiated through the unrolled WRITE.
template <class Real>
SampleGrads<Real> sample_grads(const ModelParams<Real>& params, const Sample& s, const WriteConfig& cfg) {
    Tape<Real> tp;
    const auto pn = push_params(tp, params);
    const auto w = build_write(tp, pn, s.context_ids, cfg, s.token_class);
    const NodeId loss = build_read_loss(tp, pn, w.mem_hat, s.query_ids, s.target_ids);
    SampleGrads<Real> out;
    out.loss = static_cast<double>(tp.value(loss).data[0]);
    out.trace = w.trace;
    const auto gs = tp.grad(loss, pn.ids, /*keep_graph=*/false);
    out.grads.reserve(gs.size());
    for (NodeId g : gs) out.grads.push_back(tp.value(g));
    return out;
}

template <class Real>
using SampleGradFn = std::function<SampleGrads<Real>(const Sample&)>;

// One AdamW step on the batch-mean task loss. Per-sample tapes run on
// independent threads; the reduction is a fixed-order sum over sample
// indices, so results do not depend on the thread count.
template <class Real>
MetaMetrics meta_step_with(ModelParams<Real>& params, AdamState<Real>& opt, std::span<const Sample> batch,
                           const SampleGradFn<Real>& fn, const OptimConfig& oc, double lr_now,
                           int n_threads = 1) {
    if (batch.empty()) throw ConfigError("meta_step: empty batch");
    for (const auto& s : batch)
        if (s.n_pairs != batch[0].n_pairs) throw ConfigError("meta_step: batch must share n_pairs");

    const size_t b = batch.size();
    std::vector<SampleGrads<Real>> results(b);
    const int workers = std::max(1, std::min<int>(n_threads, static_cast<int>(b)));
    if (workers == 1) {
        for (size_t i = 0; i < b; ++i) results[i] = fn(batch[i]);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (size_t i = static_cast<size_t>(w); i < b; i += static_cast<size_t>(workers))
                        results[i] = fn(batch[i]);
                } catch (...) {
                    errors[static_cast<size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    MetaMetrics metrics;
    const double inv_b = 1.0 / static_cast<double>(b);
    std::vector<Tensor<Real>> grads;
    grads.reserve(params.tensors.size());
    for (const auto& p : params.tensors) grads.push_back(Tensor<Real>::zeros(p.dims));
    for (size_t i = 0; i < b; ++i) {
        metrics.outer_loss += results[i].loss;
        metrics.trace.accumulate(results[i].trace);
        for (size_t j = 0; j < grads.size(); ++j)
            for (size_t e = 0; e < grads[j].data.size(); ++e)
                grads[j].data[e] += results[i].grads[j].data[e];
    }
    metrics.outer_loss *= inv_b;
    metrics.trace.scale(inv_b);
    for (auto& g : grads)
        for (auto& v : g.data) v = static_cast<Real>(static_cast<double>(v) * inv_b);
    if (!std::isfinite(metrics.outer_loss)) throw TapeError("meta_step: non-finite outer loss");

    double sq = 0;
    for (const auto& g : grads)
        for (Real v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    metrics.outer_grad_norm_pre = std::sqrt(sq);
    double scale = 1.0;
    if (oc.clip > 0 && metrics.outer_grad_norm_pre > oc.clip) scale = oc.clip / metrics.outer_grad_norm_pre;
    metrics.outer_grad_norm_post = metrics.outer_grad_norm_pre * scale;

    opt.t += 1;
    const double bc1 = 1.0 - std::pow(oc.beta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(oc.beta2, static_cast<double>(opt.t));
    for (size_t j = 0; j < params.tensors.size(); ++j) {
        auto& p = params.tensors[j];
        auto& m = opt.m[j];
        auto& v = opt.v[j];
        const bool decay = p.rank() > 1 && oc.weight_decay > 0;
        for (size_t e = 0; e < p.data.size(); ++e) {
            const double g = static_cast<double>(grads[j].data[e]) * scale;
            const double mn = oc.beta1 * static_cast<double>(m.data[e]) + (1.0 - oc.beta1) * g;
            const double vn = oc.beta2 * static_cast<double>(v.data[e]) + (1.0 - oc.beta2) * g * g;
            m.data[e] = static_cast<Real>(mn);
            v.data[e] = static_cast<Real>(vn);
            double upd = (mn / bc1) / (std::sqrt(vn / bc2) + oc.eps);
            if (decay) upd += oc.weight_decay * static_cast<double>(p.data[e]);
            p.data[e] = static_cast<Real>(static_cast<double>(p.data[e]) - lr_now * upd);
        }
    }
    return metrics;
}

template <class Real>
MetaMetrics meta_step(ModelParams<Real>& params, AdamState<Real>& opt, std::span<const Sample> batch,
                      const WriteConfig& cfg, const OptimConfig& oc, double lr_now, int n_threads = 1) {
    const SampleGradFn<Real> fn = [&](const Sample& s) { return sample_grads(params, s, cfg); };
    return meta_step_with(params, opt, batch, fn, oc, lr_now, n_threads);
}

}  // namespace gradmem
