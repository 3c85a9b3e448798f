// Command-line front end: data generation, training, evaluation, K sweeps,
// the compute cost model, the double-backward microbenchmark, and the
// finite-difference check suite.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "gradmem/harness.hpp"

using namespace gradmem;

namespace {

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    json j;
    f >> j;
    return j;
}

// Accepts either a raw run config or a run manifest (with a "config" key).
RunConfig load_run_config(const std::string& path) {
    json j = read_json_file(path);
    if (j.contains("config") && j.contains("config_hash")) j = j.at("config");
    RunConfig rc;
    config_from_json(j, rc);
    return rc;
}

uint64_t env_seed_fallback() {
    if (const char* s = std::getenv("GRADMEM_SEED")) return std::strtoull(s, nullptr, 10);
    return 1;
}

template <class Real>
ModelParams<Real> load_model(const RunConfig& rc, const std::string& ckpt) {
    ModelParams<Real> params = init_params<Real>(rc.model, rc.seed);
    load_params_from_file(params, load_checkpoint(ckpt));
    return params;
}

json trace_summary(const InnerTrace& t) {
    json j = trace_json(t);
    return j;
}

template <class Real>
int run_eval(const RunConfig& rc, const std::string& ckpt, int n_pairs, int count, int k_eval, int threads) {
    const auto params = load_model<Real>(rc, ckpt);
    WriteConfig wc = rc.write;
    if (k_eval >= 0) {
        if (rc.writer != Writer::GradMem && k_eval != rc.write.k)
            std::cerr << "warning: writer '" << writer_name(rc.writer) << "' ignores k_eval\n";
        wc.k = k_eval;
    }
    const auto r = evaluate<Real>(params, rc.seed, n_pairs, count, rc.writer, wc, RmtConfig{rc.rmt_repeats},
                                  threads);
    json out;
    out["em"] = r.em;
    out["count"] = r.count;
    out["n_pairs"] = n_pairs;
    out["k_eval"] = rc.writer == Writer::GradMem ? wc.k : 0;
    out["writer"] = writer_name(rc.writer);
    out.update(trace_summary(r.trace));
    std::cout << out.dump(2) << "\n";
    return 0;
}

template <class Real>
int run_sweep(const RunConfig& rc, const std::string& ckpt, int n_pairs, int count, const std::vector<int>& ks,
              int threads, const std::string& out_csv) {
    if (rc.writer != Writer::GradMem) throw ConfigError("sweep-k requires a gradmem run");
    const auto params = load_model<Real>(rc, ckpt);
    const auto rows = sweep_k<Real>(params, rc.seed, n_pairs, count, rc.write, ks, threads);
    std::ostream* os = &std::cout;
    std::ofstream f;
    if (!out_csv.empty()) {
        f.open(out_csv, std::ios::binary);
        if (!f) throw IoError("cannot write " + out_csv);
        os = &f;
    }
    (*os) << "k_eval,em,final_inner_loss,final_key_loss,final_value_loss\n";
    for (const auto& r : rows)
        (*os) << r.k_eval << "," << r.em << "," << r.final_loss << "," << r.final_key_loss << ","
              << r.final_value_loss << "\n";
    return 0;
}

std::vector<int64_t> parse_i64_list(const std::string& csv) {
    std::vector<int64_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoll(item));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gradmem: test-time gradient-descent memory for a tiny decoder"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "materialize KV-retrieval samples as a TSV file");
    int gen_pairs = 4;
    uint64_t gen_count = 100, gen_seed = env_seed_fallback();
    std::string gen_out = "data.tsv";
    gen->add_option("--pairs", gen_pairs, "key-value pairs per sample")->required();
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output file")->required();

    // train
    auto* tr = app.add_subcommand("train", "run the curriculum trainer");
    std::string tr_config;
    std::string tr_out, tr_writer, tr_precision;
    int64_t tr_seed = -1;
    int tr_threads = -1, tr_batch = -1, tr_k = -1;
    bool tr_first_order = false, tr_quiet = false;
    tr->add_option("--config", tr_config, "run config JSON")->required();
    tr->add_option("--out", tr_out, "override out_dir");
    tr->add_option("--seed", tr_seed, "override seed");
    tr->add_option("--threads", tr_threads, "override worker threads");
    tr->add_option("--batch", tr_batch, "override batch size");
    tr->add_option("--writer", tr_writer, "override writer (gradmem|rmt|none)");
    tr->add_option("--k", tr_k, "override write steps K");
    tr->add_option("--precision", tr_precision, "override precision (f32|f64)");
    tr->add_flag("--first-order", tr_first_order, "stop-gradient through inner gradients");
    tr->add_flag("--quiet", tr_quiet, "suppress progress lines");

    // eval
    auto* ev = app.add_subcommand("eval", "EM and inner-trace statistics on fresh samples");
    std::string ev_config, ev_ckpt;
    int ev_pairs = 4, ev_count = 512, ev_k = -1, ev_threads = 0;
    ev->add_option("--config", ev_config, "run config or manifest JSON")->required();
    ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--pairs", ev_pairs, "key-value pairs")->required();
    ev->add_option("--count", ev_count, "number of eval samples");
    ev->add_option("--k", ev_k, "K_eval (default: training K)");
    ev->add_option("--threads", ev_threads, "worker threads (0: auto)");

    // sweep-k
    auto* sw = app.add_subcommand("sweep-k", "evaluate a checkpoint across K_eval values");
    std::string sw_config, sw_ckpt, sw_klist = "1,2,4", sw_out;
    int sw_pairs = 16, sw_count = 512, sw_threads = 0;
    sw->add_option("--config", sw_config)->required();
    sw->add_option("--ckpt", sw_ckpt)->required();
    sw->add_option("--pairs", sw_pairs)->required();
    sw->add_option("--count", sw_count);
    sw->add_option("--k-list", sw_klist, "comma-separated K_eval values");
    sw->add_option("--threads", sw_threads);
    sw->add_option("--out", sw_out, "CSV output (default: stdout)");

    // cost-model
    auto* cm = app.add_subcommand("cost-model", "WRITE/READ compute trade-off and break-even queries");
    CostParams cp{1024, 128, 32, 0, 3, 1};
    std::string cm_sweep, cm_out;
    cm->add_option("--context", cp.c, "context tokens c");
    cm->add_option("--query", cp.q, "query tokens q");
    cm->add_option("--mem", cp.m, "memory tokens m");
    cm->add_option("--queries", cp.n, "queries per context N (for the cost printout)");
    cm->add_option("--ratio", cp.r, "cost ratio R of one update step to one forward");
    cm->add_option("--steps", cp.k, "write steps K");
    cm->add_option("--sweep-context", cm_sweep, "c0:c1:step sweep written as CSV");
    cm->add_option("--out", cm_out, "CSV output for the sweep");

    // bench
    auto* be = app.add_subcommand("bench", "attention double-backward microbenchmark");
    std::string be_seqs = "64,256,1024", be_out;
    int be_batch = 16, be_reps = 5;
    int64_t be_heads = 4, be_hd = 32;
    be->add_option("--seqs", be_seqs, "comma-separated sequence lengths");
    be->add_option("--batch", be_batch, "HVPs per timed repetition");
    be->add_option("--reps", be_reps, "repetitions (median reported)");
    be->add_option("--heads", be_heads);
    be->add_option("--head-dim", be_hd);
    be->add_option("--out", be_out, "CSV output (default: stdout)");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference checks at 64-bit; nonzero exit on failure");
    uint64_t gc_seed = env_seed_fallback();
    gc->add_option("--seed", gc_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            write_dataset_tsv(gen_out, gen_seed, gen_count, gen_pairs);
            std::cout << "wrote " << gen_count << " samples (" << gen_pairs << " pairs) to " << gen_out << "\n";
            return 0;
        }
        if (*tr) {
            json raw = read_json_file(tr_config);
            RunConfig rc;
            if (!raw.contains("seed")) rc.seed = env_seed_fallback();
            config_from_json(raw, rc);
            if (tr_seed >= 0) rc.seed = static_cast<uint64_t>(tr_seed);
            if (!tr_out.empty()) rc.out_dir = tr_out;
            if (tr_threads >= 0) rc.threads = tr_threads;
            if (tr_batch > 0) rc.batch_size = tr_batch;
            if (!tr_writer.empty()) rc.writer = writer_from_name(tr_writer);
            if (tr_k >= 0) rc.write.k = tr_k;
            if (!tr_precision.empty()) rc.precision = tr_precision;
            if (tr_first_order) rc.write.first_order = true;
            std::ostream* progress = tr_quiet ? nullptr : &std::cerr;
            const auto run = [&]() {
                return rc.precision == "f64" ? train<double>(rc, progress).final_em
                                             : train<float>(rc, progress).final_em;
            };
            const double em = run();
            std::cout << "final em " << em << " (outputs in " << rc.out_dir << ")\n";
            return 0;
        }
        if (*ev) {
            RunConfig rc = load_run_config(ev_config);
            rc.normalize();
            const int threads = ev_threads > 0 ? ev_threads : rc.threads;
            return rc.precision == "f64" ? run_eval<double>(rc, ev_ckpt, ev_pairs, ev_count, ev_k, threads)
                                         : run_eval<float>(rc, ev_ckpt, ev_pairs, ev_count, ev_k, threads);
        }
        if (*sw) {
            RunConfig rc = load_run_config(sw_config);
            rc.normalize();
            const int threads = sw_threads > 0 ? sw_threads : rc.threads;
            std::vector<int> ks;
            for (int64_t k : parse_i64_list(sw_klist)) ks.push_back(static_cast<int>(k));
            return rc.precision == "f64"
                       ? run_sweep<double>(rc, sw_ckpt, sw_pairs, sw_count, ks, threads, sw_out)
                       : run_sweep<float>(rc, sw_ckpt, sw_pairs, sw_count, ks, threads, sw_out);
        }
        if (*cm) {
            if (!cm_sweep.empty()) {
                const auto parts = parse_i64_list([&] {
                    std::string s = cm_sweep;
                    for (auto& c : s)
                        if (c == ':') c = ',';
                    return s;
                }());
                if (parts.size() != 3) throw ConfigError("--sweep-context expects c0:c1:step");
                std::ostream* os = &std::cout;
                std::ofstream f;
                if (!cm_out.empty()) {
                    f.open(cm_out, std::ios::binary);
                    os = &f;
                }
                (*os) << "c,threshold,break_even\n";
                for (int64_t c = parts[0]; c <= parts[1]; c += parts[2]) {
                    CostParams p = cp;
                    p.c = static_cast<double>(c);
                    (*os) << c << "," << break_even_threshold(p) << "," << break_even(p) << "\n";
                }
                return 0;
            }
            const auto s = cost_model(cp);
            json out;
            out["t_full"] = s.t_full;
            out["t_gradmem"] = s.t_gradmem;
            out["ratio"] = s.ratio;
            out["break_even_n"] = break_even(cp);
            out["threshold"] = break_even_threshold(cp);
            out["heuristic"] = break_even_heuristic(cp);
            std::cout << out.dump(2) << "\n";
            return 0;
        }
        if (*be) {
            const auto seqs = parse_i64_list(be_seqs);
            const AttnStrategy strats[2] = {AttnStrategy::Generic, AttnStrategy::Manual};
            const auto rows =
                bench_double_backward(seqs, strats, be_batch, be_heads, be_hd, be_reps, &std::cerr);
            std::ostream* os = &std::cout;
            std::ofstream f;
            if (!be_out.empty()) {
                f.open(be_out, std::ios::binary);
                os = &f;
            }
            (*os) << "strategy,seq,median_ms,peak_bytes\n";
            for (const auto& r : rows)
                (*os) << r.strategy << "," << r.seq << "," << r.median_ms << "," << r.peak_bytes << "\n";
            return 0;
        }
        if (*gc) {
            const auto rows = gradcheck_suite(gc_seed);
            bool ok = true;
            for (const auto& r : rows) {
                std::cout << (r.pass ? "[ok]   " : "[FAIL] ") << r.name << "  rel_err " << r.max_rel_err
                          << "  tol " << r.tol << "\n";
                ok &= r.pass;
            }
            std::cout << (ok ? "gradcheck: all passed\n" : "gradcheck: FAILURES\n");
            return ok ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
