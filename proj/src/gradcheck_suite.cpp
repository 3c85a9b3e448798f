#include <functional>

#include "gradmem/harness.hpp"

namespace gradmem {

namespace {

Tensor<double> rand_tensor(Dims d, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t{std::move(d)};
    for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform01();
    return t;
}

using Builder = std::function<NodeId(Tape<double>&, NodeId)>;

// max rel err of d/dx sum(build(x) . W) against central differences
double graph_fd_err(const Builder& build, const Tensor<double>& x, double eps) {
    Rng wrng(7);
    Tensor<double> w;
    {
        Tape<double> tp;
        w = rand_tensor(tp.dims(build(tp, tp.input(x))), wrng);
    }
    auto f = [&](const Tensor<double>& probe) {
        Tape<double> tp;
        return tp.value(tp.reduce_sum(tp.mul(build(tp, tp.input(probe)), tp.constant(w)))).data[0];
    };
    Tape<double> tp;
    const NodeId xin = tp.input(x);
    const NodeId g = tp.grad1(tp.reduce_sum(tp.mul(build(tp, xin), tp.constant(w))), xin);
    return finite_diff_check<double>(f, x, tp.value(g), eps).max_rel_err;
}

ModelConfig check_model_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.vocab_size = 66;
    cfg.max_seq = 64;
    cfg.mem_tokens = 2;
    return cfg;
}

double pipeline_loss(const ModelParams<double>& params, const Sample& s, const WriteConfig& wc) {
    Tape<double> tp;
    const auto pn = push_params(tp, params);
    const auto w = build_write(tp, pn, s.context_ids, wc, s.token_class);
    return tp.value(build_read_loss(tp, pn, w.mem_hat, s.query_ids, s.target_ids)).data[0];
}

// FD of the full unrolled pipeline wrt one named parameter tensor.
double pipeline_fd_err(const ModelParams<double>& params, const Sample& s, const WriteConfig& wc,
                       const std::string& name, double eps) {
    const size_t idx = static_cast<size_t>(params.index(name));
    const auto analytic = sample_grads(params, s, wc).grads[idx];
    auto f = [&](const Tensor<double>& probe) {
        ModelParams<double> p2 = params;
        p2.tensors[idx] = probe;
        return pipeline_loss(p2, s, wc);
    };
    return finite_diff_check<double>(f, params.tensors[idx], analytic, eps, name).max_rel_err;
}

}  // namespace

std::vector<CheckRow> gradcheck_suite(uint64_t seed, CheckPart part) {
    std::vector<CheckRow> rows;
    auto add = [&](std::string name, double err, double tol) {
        rows.push_back({std::move(name), err, tol, err < tol});
    };
    const bool first = part != CheckPart::SecondOrder;
    const bool second = part != CheckPart::FirstOrder;
    Rng rng(seed);
    const Tensor<double> x34 = rand_tensor({3, 4}, rng);
    const Tensor<double> pos34 = rand_tensor({3, 4}, rng, 0.5, 1.5);
    const Tensor<double> x31 = rand_tensor({3, 1}, rng);
    const Tensor<double> x14 = rand_tensor({1, 4}, rng);
    const auto ids = std::make_shared<const std::vector<int32_t>>(std::vector<int32_t>{2, 0, 2, 1});

    // fixed constants: every builder must be the same function on each call
    const Tensor<double> c34 = rand_tensor({3, 4}, rng);
    const Tensor<double> c43 = rand_tensor({4, 3}, rng);
    const Tensor<double> c24 = rand_tensor({2, 4}, rng);
    const Tensor<double> c31 = rand_tensor({3, 1}, rng);
    const Tensor<double> c46a = rand_tensor({4, 6}, rng);
    const Tensor<double> c46b = rand_tensor({4, 6}, rng);
    const Tensor<double> c64k = rand_tensor({6, 4}, rng);
    const Tensor<double> c64v = rand_tensor({6, 4}, rng);

    if (first) {
    const std::pair<const char*, Builder> prims_x34[] = {
        {"add", [&](Tape<double>& tp, NodeId x) { return tp.add(x, tp.constant(c34)); }},
        {"sub", [&](Tape<double>& tp, NodeId x) { return tp.sub(tp.constant(c34), x); }},
        {"mul", [&](Tape<double>& tp, NodeId x) { return tp.mul(x, tp.constant(c34)); }},
        {"scale", [&](Tape<double>& tp, NodeId x) { return tp.affine(x, 2.5, -0.1); }},
        {"matmul", [&](Tape<double>& tp, NodeId x) { return tp.matmul(x, tp.constant(c43)); }},
        {"transpose", [&](Tape<double>& tp, NodeId x) { return tp.transpose(x); }},
        {"square", [&](Tape<double>& tp, NodeId x) { return tp.pow_c(x, 2.0); }},
        {"exp", [&](Tape<double>& tp, NodeId x) { return tp.exp_(x); }},
        {"sigmoid", [&](Tape<double>& tp, NodeId x) { return tp.sigmoid(x); }},
        {"row_sum", [&](Tape<double>& tp, NodeId x) { return tp.row_sum(x); }},
        {"col_sum", [&](Tape<double>& tp, NodeId x) { return tp.col_sum(x); }},
        {"reduce_sum", [&](Tape<double>& tp, NodeId x) { return tp.reduce_sum(x); }},
        {"slice_rows", [&](Tape<double>& tp, NodeId x) { return tp.slice_rows(x, 1, 3); }},
        {"slice_cols", [&](Tape<double>& tp, NodeId x) { return tp.slice_cols(x, 0, 2); }},
        {"concat_rows", [&](Tape<double>& tp, NodeId x) { return tp.concat_rows({x, tp.constant(c24)}); }},
        {"concat_cols", [&](Tape<double>& tp, NodeId x) { return tp.concat_cols({tp.constant(c31), x}); }},
        {"lookup_rows", [&](Tape<double>& tp, NodeId x) { return tp.lookup_rows(x, ids); }},
        {"softmax", [&](Tape<double>& tp, NodeId x) { return tp.softmax(x); }},
        {"rope_rotate", [&](Tape<double>& tp, NodeId x) { return tp.rope(x, 5, 4, false); }},
        {"swiglu",
         [&](Tape<double>& tp, NodeId x) {
             const NodeId gate = tp.matmul(x, tp.constant(c46a));
             const NodeId up = tp.matmul(x, tp.constant(c46b));
             return tp.mul(tp.mul(gate, tp.sigmoid(gate)), up);
         }},
        {"attention_generic",
         [&](Tape<double>& tp, NodeId x) {
             return attention(tp, tp.concat_rows({x, tp.constant(c34)}), tp.constant(c64k), tp.constant(c64v),
                              1, true, AttnStrategy::Generic);
         }},
        {"attention_manual",
         [&](Tape<double>& tp, NodeId x) {
             return attention(tp, tp.concat_rows({x, tp.constant(c34)}), tp.constant(c64k), tp.constant(c64v),
                              1, true, AttnStrategy::Manual);
         }},
    };
    for (const auto& [name, b] : prims_x34) add(std::string("primitive/") + name, graph_fd_err(b, x34, 1e-5), 1e-6);
    add("primitive/log", graph_fd_err([&](Tape<double>& tp, NodeId x) { return tp.log_(x); }, pos34, 1e-5), 1e-6);
    add("primitive/rsqrt", graph_fd_err([&](Tape<double>& tp, NodeId x) { return tp.pow_c(x, -0.5); }, pos34, 1e-5),
        1e-6);
    add("primitive/row_bcast", graph_fd_err([&](Tape<double>& tp, NodeId x) { return tp.row_bcast(x, 5); }, x31, 1e-5),
        1e-6);
    add("primitive/col_bcast", graph_fd_err([&](Tape<double>& tp, NodeId x) { return tp.col_bcast(x, 5); }, x14, 1e-5),
        1e-6);
    add("primitive/embedding_scatter",
        graph_fd_err([&](Tape<double>& tp, NodeId x) { return tp.scatter_rows(x, ids, 5); },
                     rand_tensor({4, 4}, rng), 1e-5),
        1e-6);

    add("composite/rmsnorm",
        graph_fd_err(
            [&](Tape<double>& tp, NodeId x) {
                const int64_t c = tp.value(x).cols();
                const NodeId ms = tp.scale(tp.row_sum(tp.pow_c(x, 2.0)), 1.0 / static_cast<double>(c));
                return tp.mul(x, tp.row_bcast(tp.pow_c(tp.affine(ms, 1.0, 1e-6), -0.5), c));
            },
            rand_tensor({4, 8}, rng), 1e-5),
        1e-7);

    }  // first-order part

    // engine composites on the 2-layer d=16 model
    const ModelConfig cfg = check_model_config();
    const auto params = init_params<double>(cfg, mix64(seed, 1));
    const Sample sample = generate_sample(mix64(seed, 2), 0, 2);

    if (first) {
        Tensor<double> mem = rand_tensor({cfg.mem_tokens, cfg.d_model}, rng, -0.1, 0.1);
        auto f = [&](const Tensor<double>& probe) {
            Tape<double> tp;
            const auto pn = push_params(tp, params);
            return tp.value(build_write_loss(tp, pn, tp.input(probe), sample.context_ids).loss).data[0];
        };
        Tape<double> tp;
        const auto pn = push_params(tp, params);
        const NodeId m = tp.input(mem);
        const NodeId g = tp.grad1(build_write_loss(tp, pn, m, sample.context_ids).loss, m, false);
        add("engine/write_loss_wrt_memory", finite_diff_check<double>(f, mem, tp.value(g), 1e-4).max_rel_err,
            1e-4);
    }
    if (first) {
        Tensor<double> mem = rand_tensor({cfg.mem_tokens, cfg.d_model}, rng, -0.1, 0.1);
        auto f = [&](const Tensor<double>& probe) {
            Tape<double> tp;
            const auto pn = push_params(tp, params);
            return tp.value(build_read_loss(tp, pn, tp.input(probe), sample.query_ids, sample.target_ids))
                .data[0];
        };
        Tape<double> tp;
        const auto pn = push_params(tp, params);
        const NodeId m = tp.input(mem);
        const NodeId g = tp.grad1(build_read_loss(tp, pn, m, sample.query_ids, sample.target_ids), m, false);
        add("engine/read_loss_wrt_memory", finite_diff_check<double>(f, mem, tp.value(g), 1e-4).max_rel_err,
            1e-4);
    }
    if (first) {
        // READ loss through the out-projection, wrt the projection weights
        const Tensor<double> mem_raw = rand_tensor({cfg.mem_tokens, cfg.d_model}, rng, -0.1, 0.1);
        const size_t idx = static_cast<size_t>(params.index("mem.out_proj"));
        auto loss_of = [&](const ModelParams<double>& p) {
            Tape<double> tp;
            const auto pn = push_params(tp, p);
            const NodeId mem = apply_mem_projection(tp, pn, tp.input(mem_raw), MemDirection::Out);
            return tp.value(build_read_loss(tp, pn, mem, sample.query_ids, sample.target_ids)).data[0];
        };
        auto f = [&](const Tensor<double>& probe) {
            ModelParams<double> p2 = params;
            p2.tensors[idx] = probe;
            return loss_of(p2);
        };
        Tape<double> tp;
        const auto pn = push_params(tp, params);
        const NodeId mem = apply_mem_projection(tp, pn, tp.input(mem_raw), MemDirection::Out);
        const NodeId loss = build_read_loss(tp, pn, mem, sample.query_ids, sample.target_ids);
        const NodeId g = tp.grad(loss, std::span<const NodeId>(&pn.ids[idx], 1), false)[0];
        add("engine/read_loss_wrt_out_projection",
            finite_diff_check<double>(f, params.tensors[idx], tp.value(g), 1e-4).max_rel_err, 1e-4);
    }

    // second-order: task loss through K=2 unrolled write steps
    if (second) {
        WriteConfig wc;
        wc.k = 2;
        wc.alpha = 0.4;
        wc.clip_norm = 1.0;
        add("pipeline/task_loss_wrt_mem_init_k2", pipeline_fd_err(params, sample, wc, "mem.init", 1e-4), 1e-3);
        for (const char* name : {"layers.0.wq", "layers.1.w_down", "head.write", "head.read", "mem.in_proj",
                                 "mem.out_proj", "final_norm"})
            add(std::string("pipeline/task_loss_wrt_") + name + "_k2",
                pipeline_fd_err(params, sample, wc, name, 1e-4), 1e-3);
    }

    return rows;
}

}  // namespace gradmem
