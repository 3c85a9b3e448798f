#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "gradmem/baselines.hpp"
#include "gradmem/costmodel.hpp"
#include "gradmem/engine.hpp"
#include "gradmem/gradcheck.hpp"

namespace gradmem {

using json = nlohmann::json;

enum class Writer { GradMem, Rmt, None };

inline const char* writer_name(Writer w) {
    switch (w) {
        case Writer::GradMem: return "gradmem";
        case Writer::Rmt: return "rmt";
        case Writer::None: return "none";
    }
    return "?";
}

inline Writer writer_from_name(const std::string& s) {
    if (s == "gradmem") return Writer::GradMem;
    if (s == "rmt") return Writer::Rmt;
    if (s == "none") return Writer::None;
    throw ConfigError("unknown writer '" + s + "' (expected gradmem|rmt|none)");
}

struct CurriculumStage {
    int n_pairs = 4;
    int64_t max_steps = 1000;
    double target_em = 0.99;
};

struct EvalConfig {
    int64_t every = 250;
    int count = 512;
    int k_eval = -1;  // -1: use the training K
};

struct RunConfig {
    ModelConfig model;
    Writer writer = Writer::GradMem;
    WriteConfig write;
    int rmt_repeats = 1;
    std::vector<CurriculumStage> curriculum{CurriculumStage{}};
    int batch_size = 16;
    OptimConfig optim;
    double lr_final = 1e-4;
    int64_t warmup = 200;
    EvalConfig eval;
    uint64_t seed = 1;
    int threads = 0;  // 0: hardware concurrency
    std::string precision = "f32";
    std::string out_dir = "runs/run";

    void normalize() {
        if (writer == Writer::Rmt) model.rmt_write_mem = true;
        if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    }

    void validate() const {
        model.validate();
        write.validate();
        if (writer == Writer::Rmt) RmtConfig{rmt_repeats}.validate();
        if (curriculum.empty()) throw ConfigError("config: curriculum must have at least one stage");
        for (size_t i = 1; i < curriculum.size(); ++i)
            if (curriculum[i].n_pairs <= curriculum[i - 1].n_pairs)
                throw ConfigError("config: curriculum n_pairs must be strictly increasing");
        if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
        if (precision != "f32" && precision != "f64") throw ConfigError("config: precision must be f32|f64");
        if (eval.count < 1) throw ConfigError("config: eval.count must be >= 1");
    }
};

// ----- config <-> json (keys mirror RunConfig; absent keys keep defaults) -----

inline void config_from_json(const json& j, RunConfig& rc) {
    if (j.contains("model")) {
        const auto& m = j.at("model");
        auto& c = rc.model;
        c.n_layers = m.value("n_layers", c.n_layers);
        c.d_model = m.value("d_model", c.d_model);
        c.n_heads = m.value("n_heads", c.n_heads);
        c.vocab_size = m.value("vocab_size", c.vocab_size);
        c.max_seq = m.value("max_seq", c.max_seq);
        c.mem_tokens = m.value("mem_tokens", c.mem_tokens);
        c.mem_projection = m.value("mem_projection", c.mem_projection);
        c.dual_heads = m.value("dual_heads", c.dual_heads);
        c.rmt_write_mem = m.value("rmt_write_mem", c.rmt_write_mem);
        if (m.contains("attn")) {
            const std::string a = m.at("attn");
            if (a != "manual" && a != "generic") throw ConfigError("config: model.attn must be manual|generic");
            c.attn = a == "manual" ? AttnStrategy::Manual : AttnStrategy::Generic;
        }
    }
    if (j.contains("writer")) rc.writer = writer_from_name(j.at("writer"));
    if (j.contains("write")) {
        const auto& w = j.at("write");
        rc.write.k = w.value("k", rc.write.k);
        rc.write.alpha = w.value("alpha", rc.write.alpha);
        rc.write.clip_norm = w.value("clip_norm", rc.write.clip_norm);
        rc.write.first_order = w.value("first_order", rc.write.first_order);
        if (w.value("sum_reduction", false)) rc.write.reduction = Reduction::Sum;
    }
    rc.rmt_repeats = j.value("rmt_repeats", rc.rmt_repeats);
    if (j.contains("curriculum")) {
        rc.curriculum.clear();
        for (const auto& s : j.at("curriculum")) {
            CurriculumStage st;
            st.n_pairs = s.value("n_pairs", st.n_pairs);
            st.max_steps = s.value("max_steps", st.max_steps);
            st.target_em = s.value("target_em", st.target_em);
            rc.curriculum.push_back(st);
        }
    }
    rc.batch_size = j.value("batch_size", rc.batch_size);
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        rc.optim.lr = o.value("lr", rc.optim.lr);
        rc.optim.beta1 = o.value("beta1", rc.optim.beta1);
        rc.optim.beta2 = o.value("beta2", rc.optim.beta2);
        rc.optim.eps = o.value("eps", rc.optim.eps);
        rc.optim.weight_decay = o.value("weight_decay", rc.optim.weight_decay);
        rc.optim.clip = o.value("clip", rc.optim.clip);
        rc.lr_final = o.value("lr_final", rc.lr_final);
        rc.warmup = o.value("warmup", rc.warmup);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        rc.eval.every = e.value("every", rc.eval.every);
        rc.eval.count = e.value("count", rc.eval.count);
        rc.eval.k_eval = e.value("k_eval", rc.eval.k_eval);
    }
    rc.seed = j.value("seed", rc.seed);
    rc.threads = j.value("threads", rc.threads);
    rc.precision = j.value("precision", rc.precision);
    rc.out_dir = j.value("out_dir", rc.out_dir);
}

inline json config_to_json(const RunConfig& rc) {
    json j;
    j["model"] = {{"n_layers", rc.model.n_layers},
                  {"d_model", rc.model.d_model},
                  {"n_heads", rc.model.n_heads},
                  {"vocab_size", rc.model.vocab_size},
                  {"max_seq", rc.model.max_seq},
                  {"mem_tokens", rc.model.mem_tokens},
                  {"mem_projection", rc.model.mem_projection},
                  {"dual_heads", rc.model.dual_heads},
                  {"rmt_write_mem", rc.model.rmt_write_mem},
                  {"attn", rc.model.attn == AttnStrategy::Manual ? "manual" : "generic"}};
    j["writer"] = writer_name(rc.writer);
    j["write"] = {{"k", rc.write.k},
                  {"alpha", rc.write.alpha},
                  {"clip_norm", rc.write.clip_norm},
                  {"first_order", rc.write.first_order},
                  {"sum_reduction", rc.write.reduction == Reduction::Sum}};
    j["rmt_repeats"] = rc.rmt_repeats;
    j["curriculum"] = json::array();
    for (const auto& s : rc.curriculum)
        j["curriculum"].push_back(
            {{"n_pairs", s.n_pairs}, {"max_steps", s.max_steps}, {"target_em", s.target_em}});
    j["batch_size"] = rc.batch_size;
    j["optim"] = {{"lr", rc.optim.lr},           {"beta1", rc.optim.beta1},
                  {"beta2", rc.optim.beta2},     {"eps", rc.optim.eps},
                  {"weight_decay", rc.optim.weight_decay}, {"clip", rc.optim.clip},
                  {"lr_final", rc.lr_final},     {"warmup", rc.warmup}};
    j["eval"] = {{"every", rc.eval.every}, {"count", rc.eval.count}, {"k_eval", rc.eval.k_eval}};
    j["seed"] = rc.seed;
    j["threads"] = rc.threads;
    j["precision"] = rc.precision;
    j["out_dir"] = rc.out_dir;
    return j;
}

inline uint64_t config_hash(const RunConfig& rc) {
    json j = config_to_json(rc);
    j.erase("out_dir");
    j.erase("threads");  // results are thread-count independent
    return fnv1a(j.dump());
}

// Warmup then cosine decay, applied per curriculum stage.
inline double lr_at(int64_t step, int64_t max_steps, int64_t warmup, double peak, double final_lr) {
    if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (max_steps <= warmup) return peak;
    const double t = static_cast<double>(step - warmup) / static_cast<double>(max_steps - warmup);
    return final_lr + 0.5 * (peak - final_lr) * (1.0 + std::cos(3.141592653589793 * std::min(1.0, t)));
}

// Independent deterministic sample streams.
inline uint64_t train_stream_seed(uint64_t seed) { return mix64(seed, fnv1a("train")); }
inline uint64_t eval_stream_seed(uint64_t seed) { return mix64(seed, fnv1a("eval")); }

// ----- per-sample gradients by writer -----

template <class Real>
SampleGrads<Real> writer_sample_grads(const ModelParams<Real>& params, const Sample& s, Writer writer,
                                      const WriteConfig& wc, const RmtConfig& rmt) {
    Tape<Real> tp;
    const auto pn = push_params(tp, params);
    SampleGrads<Real> out;
    NodeId loss = kInvalidNode;
    switch (writer) {
        case Writer::GradMem: {
            const auto w = build_write(tp, pn, s.context_ids, wc, s.token_class);
            out.trace = w.trace;
            loss = build_read_loss(tp, pn, w.mem_hat, s.query_ids, s.target_ids);
            break;
        }
        case Writer::Rmt: {
            const NodeId mem = build_rmt_write(tp, pn, s.context_ids, rmt);
            loss = build_read_loss(tp, pn, mem, s.query_ids, s.target_ids);
            break;
        }
        case Writer::None:
            loss = build_full_attention_loss(tp, pn, s.context_ids, s.query_ids, s.target_ids);
            break;
    }
    out.loss = static_cast<double>(tp.value(loss).data[0]);
    const auto gs = tp.grad(loss, pn.ids, /*keep_graph=*/false);
    out.grads.reserve(gs.size());
    for (NodeId g : gs) out.grads.push_back(tp.value(g));
    return out;
}

// ----- evaluation -----

struct EvalResult {
    double em = 0;
    int count = 0;
    InnerTrace trace;  // mean across samples (gradmem writer only)
};

template <class Real>
bool eval_one_em(const ModelParams<Real>& params, const Sample& s, Writer writer, const WriteConfig& wc,
                 const RmtConfig& rmt, InnerTrace* trace_out) {
    std::vector<int32_t> pred;
    switch (writer) {
        case Writer::GradMem: {
            auto [mem, trace] = write(params, s.context_ids, wc, s.token_class);
            if (trace_out) *trace_out = std::move(trace);
            pred = predict(params, &mem.values, s.query_ids, static_cast<int>(s.target_ids.size()));
            break;
        }
        case Writer::Rmt: {
            const auto mem = rmt_write(params, s.context_ids, rmt);
            pred = predict(params, &mem.values, s.query_ids, static_cast<int>(s.target_ids.size()));
            break;
        }
        case Writer::None: {
            std::vector<int32_t> cq(s.context_ids.begin(), s.context_ids.end());
            cq.insert(cq.end(), s.query_ids.begin(), s.query_ids.end());
            pred = predict<Real>(params, nullptr, cq, static_cast<int>(s.target_ids.size()));
            break;
        }
    }
    return exact_match(pred, s.target_ids);
}

// EM plus mean inner trace over `count` held-out samples (indices
// [first, first+count) of the eval stream). Per-sample work is independent;
// the accumulation order is fixed, so partitioning cannot change the result.
template <class Real>
EvalResult evaluate(const ModelParams<Real>& params, uint64_t seed, int n_pairs, int count, Writer writer,
                    const WriteConfig& wc, const RmtConfig& rmt, int n_threads = 1, uint64_t first = 0) {
    const uint64_t stream = eval_stream_seed(seed);
    std::vector<uint8_t> hits(static_cast<size_t>(count), 0);
    std::vector<InnerTrace> traces(static_cast<size_t>(count));
    const bool want_trace = writer == Writer::GradMem;
    const int workers = std::max(1, std::min(n_threads, count));
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    auto body = [&](int w) {
        try {
            for (int i = w; i < count; i += workers) {
                const Sample s = generate_sample(stream, first + static_cast<uint64_t>(i), n_pairs);
                hits[static_cast<size_t>(i)] = eval_one_em(params, s, writer, wc, rmt,
                                                           want_trace ? &traces[static_cast<size_t>(i)] : nullptr);
            }
        } catch (...) {
            errors[static_cast<size_t>(w)] = std::current_exception();
        }
    };
    if (workers == 1) {
        body(0);
    } else {
        for (int w = 0; w < workers; ++w) pool.emplace_back(body, w);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    EvalResult r;
    r.count = count;
    int64_t hit = 0;
    for (int i = 0; i < count; ++i) {
        hit += hits[static_cast<size_t>(i)];
        if (want_trace) r.trace.accumulate(traces[static_cast<size_t>(i)]);
    }
    if (want_trace) r.trace.scale(1.0 / count);
    r.em = static_cast<double>(hit) / static_cast<double>(count);
    return r;
}

struct SweepRow {
    int k_eval = 0;
    double em = 0;
    double final_loss = 0;
    double final_key_loss = 0;
    double final_value_loss = 0;
};

// One evaluate() per K on the identical sample set.
template <class Real>
std::vector<SweepRow> sweep_k(const ModelParams<Real>& params, uint64_t seed, int n_pairs, int count,
                              const WriteConfig& wc_base, std::span<const int> k_list, int n_threads = 1) {
    if (k_list.empty()) throw ConfigError("sweep_k: empty K list");
    std::vector<SweepRow> rows;
    for (int k : k_list) {
        WriteConfig wc = wc_base;
        wc.k = k;
        const auto r =
            evaluate<Real>(params, seed, n_pairs, count, Writer::GradMem, wc, RmtConfig{}, n_threads);
        SweepRow row;
        row.k_eval = k;
        row.em = r.em;
        row.final_loss = r.trace.loss.empty() ? 0 : r.trace.loss.back();
        row.final_key_loss = r.trace.key_loss.empty() ? 0 : r.trace.key_loss.back();
        row.final_value_loss = r.trace.value_loss.empty() ? 0 : r.trace.value_loss.back();
        rows.push_back(row);
    }
    return rows;
}

// ----- checkpoints with optimizer state -----

template <class Real>
void save_run_checkpoint(const std::string& path, const ModelParams<Real>& params, const AdamState<Real>& opt,
                         int64_t global_step) {
    NamedTensorFile f = params_to_file(params);
    for (size_t i = 0; i < params.names.size(); ++i) {
        f.entries.push_back(NamedTensorFile::Entry::make("opt.m." + params.names[i], opt.m[i]));
        f.entries.push_back(NamedTensorFile::Entry::make("opt.v." + params.names[i], opt.v[i]));
    }
    f.entries.push_back(NamedTensorFile::Entry::make("opt.t", Tensor<double>::scalar(static_cast<double>(opt.t))));
    f.entries.push_back(
        NamedTensorFile::Entry::make("train.step", Tensor<double>::scalar(static_cast<double>(global_step))));
    save_checkpoint(path, f);
}

template <class Real>
void load_run_checkpoint(const std::string& path, ModelParams<Real>& params, AdamState<Real>* opt) {
    const NamedTensorFile f = load_checkpoint(path);
    load_params_from_file(params, f);
    if (opt) {
        for (size_t i = 0; i < params.names.size(); ++i) {
            const auto* m = f.find("opt.m." + params.names[i]);
            const auto* v = f.find("opt.v." + params.names[i]);
            if (m && v) {
                opt->m[i] = m->template as<Real>();
                opt->v[i] = v->template as<Real>();
            }
        }
        if (const auto* t = f.find("opt.t")) opt->t = static_cast<int64_t>(t->as<double>().data[0]);
    }
}

// ----- training driver -----

struct StageOutcome {
    int n_pairs = 0;
    int64_t steps = 0;
    double em = 0;
    std::string checkpoint;
};

struct TrainOutcome {
    std::vector<StageOutcome> stages;
    std::string final_checkpoint;
    double final_em = 0;
    int64_t global_steps = 0;
};

inline void write_manifest(const RunConfig& rc) {
    json m;
    m["code_version"] = kVersion;
    m["config"] = config_to_json(rc);
    m["config_hash"] = config_hash(rc);
    m["seed"] = rc.seed;
    m["threads"] = rc.threads;
    m["precision"] = rc.precision;
    std::ofstream f(rc.out_dir + "/manifest.json", std::ios::binary);
    if (!f) throw IoError("cannot write manifest in " + rc.out_dir);
    f << m.dump(2) << "\n";
}

inline json trace_json(const InnerTrace& t) {
    json j;
    j["inner_loss"] = t.loss;
    j["key_loss"] = t.key_loss;
    j["value_loss"] = t.value_loss;
    j["delim_loss"] = t.delim_loss;
    j["grad_norm_pre"] = t.grad_norm_pre;
    j["grad_norm_post"] = t.grad_norm_post;
    return j;
}

// Curriculum trainer. Each stage runs until its eval EM reaches the target
// or the step budget is exhausted; later stages start from the current
// parameters. Divergence aborts with the last periodic checkpoint on disk.
template <class Real>
TrainOutcome train(const RunConfig& rc_in, std::ostream* progress = nullptr) {
    RunConfig rc = rc_in;
    rc.normalize();
    rc.validate();
    std::filesystem::create_directories(rc.out_dir);
    write_manifest(rc);
    std::ofstream metrics(rc.out_dir + "/metrics.jsonl", std::ios::binary);
    if (!metrics) throw IoError("cannot write metrics.jsonl in " + rc.out_dir);

    ModelParams<Real> params = init_params<Real>(rc.model, rc.seed);
    AdamState<Real> opt = AdamState<Real>::init(params);
    const RmtConfig rmt{rc.rmt_repeats};
    const uint64_t tstream = train_stream_seed(rc.seed);
    const int k_eval = rc.eval.k_eval >= 0 ? rc.eval.k_eval : rc.write.k;
    WriteConfig wc_eval = rc.write;
    wc_eval.k = k_eval;

    const SampleGradFn<Real> fn = [&](const Sample& s) {
        return writer_sample_grads(params, s, rc.writer, rc.write, rmt);
    };

    TrainOutcome out;
    int64_t global_step = 0;
    const std::string latest = rc.out_dir + "/latest.gmem";
    for (size_t stage_idx = 0; stage_idx < rc.curriculum.size(); ++stage_idx) {
        const auto& stage = rc.curriculum[stage_idx];
        double stage_em = 0;
        int64_t step = 0;
        for (; step < stage.max_steps; ++step, ++global_step) {
            const double lr = lr_at(step, stage.max_steps, rc.warmup, rc.optim.lr, rc.lr_final);
            std::vector<Sample> batch;
            batch.reserve(static_cast<size_t>(rc.batch_size));
            for (int b = 0; b < rc.batch_size; ++b)
                batch.push_back(generate_sample(
                    tstream, static_cast<uint64_t>(global_step) * static_cast<uint64_t>(rc.batch_size) +
                                 static_cast<uint64_t>(b),
                    stage.n_pairs));

            MetaMetrics mm;
            try {
                mm = meta_step_with(params, opt, std::span<const Sample>(batch), fn, rc.optim, lr, rc.threads);
            } catch (const TapeError& e) {
                metrics << json{{"step", global_step}, {"event", "divergence"}, {"error", e.what()}}.dump()
                        << "\n";
                throw TapeError("training diverged at step " + std::to_string(global_step) + " (" + e.what() +
                                "); last good checkpoint: " + latest);
            }

            json line;
            line["step"] = global_step;
            line["stage"] = stage_idx;
            line["n_pairs"] = stage.n_pairs;
            line["lr"] = lr;
            line["outer_loss"] = mm.outer_loss;
            line["outer_grad_norm"] = mm.outer_grad_norm_pre;
            line["outer_grad_norm_clipped"] = mm.outer_grad_norm_post;
            line.update(trace_json(mm.trace));

            const bool eval_now = (step + 1) % rc.eval.every == 0 || step + 1 == stage.max_steps;
            if (eval_now) {
                const auto ev = evaluate<Real>(params, rc.seed, stage.n_pairs, rc.eval.count, rc.writer,
                                               wc_eval, rmt, rc.threads);
                stage_em = ev.em;
                line["em"] = ev.em;
                save_run_checkpoint(latest, params, opt, global_step);
            }
            metrics << line.dump() << "\n";
            if (progress && (global_step % 50 == 0 || eval_now)) {
                (*progress) << "step " << global_step << " stage " << stage_idx << " loss " << mm.outer_loss;
                if (eval_now) (*progress) << " em " << stage_em;
                (*progress) << "\n";
                progress->flush();
            }
            if (eval_now && stage_em >= stage.target_em) {
                ++step;
                ++global_step;
                break;
            }
        }
        StageOutcome so;
        so.n_pairs = stage.n_pairs;
        so.steps = step;
        so.em = stage_em;
        so.checkpoint = rc.out_dir + "/ckpt_stage" + std::to_string(stage_idx) + ".gmem";
        save_run_checkpoint(so.checkpoint, params, opt, global_step);
        out.stages.push_back(so);
        out.final_em = stage_em;
    }
    out.global_steps = global_step;
    out.final_checkpoint = rc.out_dir + "/final.gmem";
    save_run_checkpoint(out.final_checkpoint, params, opt, global_step);
    metrics.flush();
    return out;
}

// ----- double-backward microbenchmark -----

struct BenchRow {
    std::string strategy;
    int64_t seq = 0;
    double median_ms = 0;
    int64_t peak_bytes = 0;
};

namespace detail {

// One attention-block HVP at f64; returns flattened HVP values for the
// cross-strategy agreement check.
inline std::vector<double> bench_hvp_once(int64_t heads, int64_t seq, int64_t head_dim, uint64_t seed,
                                          AttnStrategy strat, int64_t* peak_out) {
    Rng rng(seed);
    auto rand_t = [&](Dims d) {
        Tensor<double> t{std::move(d)};
        for (auto& v : t.data) v = rng.uniform01() * 2.0 - 1.0;
        return t;
    };
    const Tensor<double> q = rand_t({heads * seq, head_dim});
    const Tensor<double> k = rand_t({heads * seq, head_dim});
    const Tensor<double> v = rand_t({heads * seq, head_dim});
    const Tensor<double> w = rand_t({heads * seq, head_dim});
    const Tensor<double> u0 = rand_t({heads * seq, head_dim});
    const Tensor<double> u1 = rand_t({heads * seq, head_dim});
    const Tensor<double> u2 = rand_t({heads * seq, head_dim});

    const int64_t before = membytes::live().load();
    membytes::reset_peak();
    std::vector<double> flat;
    {
        Tape<double> tp;
        const NodeId qi = tp.input(q), ki = tp.input(k), vi = tp.input(v);
        const NodeId o = attention(tp, qi, ki, vi, heads, true, strat);
        const NodeId loss = tp.reduce_sum(tp.mul(o, tp.constant(w)));
        const NodeId wrt[3] = {qi, ki, vi};
        const auto gs = tp.grad(loss, std::span<const NodeId>(wrt, 3), true);
        NodeId h = tp.reduce_sum(tp.mul(gs[0], tp.constant(u0)));
        h = tp.add(h, tp.reduce_sum(tp.mul(gs[1], tp.constant(u1))));
        h = tp.add(h, tp.reduce_sum(tp.mul(gs[2], tp.constant(u2))));
        const auto hv = tp.grad(h, std::span<const NodeId>(wrt, 3), false);
        for (const NodeId n : hv) {
            const auto& t = tp.value(n);
            flat.insert(flat.end(), t.data.begin(), t.data.end());
        }
        if (peak_out) *peak_out = membytes::peak().load() - before;
    }
    return flat;
}

}  // namespace detail

// Wall time (median of `reps`) and peak allocation of one attention-block
// HVP per (strategy, seq). Strategies are cross-checked for agreement on
// each shape before timing. Single-threaded.
inline std::vector<BenchRow> bench_double_backward(std::span<const int64_t> seqs,
                                                   std::span<const AttnStrategy> strategies, int batch = 16,
                                                   int64_t heads = 4, int64_t head_dim = 32, int reps = 5,
                                                   std::ostream* log = nullptr) {
    std::vector<BenchRow> rows;
    for (const int64_t seq : seqs) {
        const auto a = detail::bench_hvp_once(heads, seq, head_dim, 1234, AttnStrategy::Generic, nullptr);
        const auto b = detail::bench_hvp_once(heads, seq, head_dim, 1234, AttnStrategy::Manual, nullptr);
        double max_diff = 0;
        for (size_t i = 0; i < a.size(); ++i) max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
        if (max_diff >= 1e-8)
            throw TapeError("bench: strategies disagree at seq " + std::to_string(seq) + " (max diff " +
                            std::to_string(max_diff) + ")");
        for (const AttnStrategy strat : strategies) {
            BenchRow row;
            row.strategy = attn_strategy_name(strat);
            row.seq = seq;
            (void)detail::bench_hvp_once(heads, seq, head_dim, 99, strat, &row.peak_bytes);
            std::vector<double> times;
            for (int r = 0; r < reps; ++r) {
                const auto t0 = std::chrono::steady_clock::now();
                for (int bi = 0; bi < batch; ++bi)
                    (void)detail::bench_hvp_once(heads, seq, head_dim, 7000 + static_cast<uint64_t>(bi), strat,
                                                 nullptr);
                const auto t1 = std::chrono::steady_clock::now();
                times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
            std::sort(times.begin(), times.end());
            row.median_ms = times[times.size() / 2];
            rows.push_back(row);
            if (log)
                (*log) << row.strategy << " L=" << row.seq << " " << row.median_ms << " ms, peak "
                       << row.peak_bytes << " bytes\n";
        }
    }
    return rows;
}

// ----- finite-difference suite (the oracle for the loss/engine pipeline) -----

struct CheckRow {
    std::string name;
    double max_rel_err = 0;
    double tol = 0;
    bool pass = false;
};

enum class CheckPart { FirstOrder, SecondOrder, All };

std::vector<CheckRow> gradcheck_suite(uint64_t seed, CheckPart part = CheckPart::All);

inline bool gradcheck_all_pass(const std::vector<CheckRow>& rows) {
    for (const auto& r : rows)
        if (!r.pass) return false;
    return true;
}

}  // namespace gradmem
