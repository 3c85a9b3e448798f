#include <doctest.h>

#include "gradmem/baselines.hpp"

using namespace gradmem;

namespace {

ModelConfig rmt_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.vocab_size = 66;
    cfg.max_seq = 128;
    cfg.mem_tokens = 2;
    cfg.rmt_write_mem = true;
    return cfg;
}

}  // namespace

TEST_CASE("rmt_write: r=1 output shape is [m, d]") {
    const auto params = init_params<double>(rmt_config(), 3);
    const Sample s = generate_sample(5, 0, 3);
    const auto mem = rmt_write(params, s.context_ids, RmtConfig{1});
    CHECK(mem.values.dims == Dims{2, 16});
    CHECK(mem.step == 1);
}

TEST_CASE("rmt_write: repeats actually rewrite the memory") {
    const auto params = init_params<double>(rmt_config(), 7);
    const Sample s = generate_sample(11, 0, 3);
    const auto r1 = rmt_write(params, s.context_ids, RmtConfig{1});
    const auto r2 = rmt_write(params, s.context_ids, RmtConfig{2});
    CHECK(r1.values.max_abs_diff(r2.values) > 1e-9);
}

TEST_CASE("rmt_write is pure forward: no gradient computations on the tape") {
    const auto params = init_params<double>(rmt_config(), 13);
    const Sample s = generate_sample(17, 0, 2);
    Tape<double> tp;
    const auto pn = push_params(tp, params);
    (void)build_rmt_write(tp, pn, s.context_ids, RmtConfig{2});
    CHECK(tp.grad_calls() == 0);
    CHECK(tp.count_op(Op::AttnBwd) == 0);
    CHECK(tp.count_op(Op::AttnBwd2) == 0);
    CHECK(tp.count_op(Op::Detach) == 0);
}

TEST_CASE("rmt_write requires the write-memory suffix and a valid repeat count") {
    ModelConfig cfg = rmt_config();
    cfg.rmt_write_mem = false;
    const auto params = init_params<double>(cfg, 19);
    const Sample s = generate_sample(23, 0, 2);
    CHECK_THROWS_AS((void)rmt_write(params, s.context_ids, RmtConfig{1}), ConfigError);
    const auto ok = init_params<double>(rmt_config(), 19);
    CHECK_THROWS_AS((void)rmt_write(ok, s.context_ids, RmtConfig{0}), ConfigError);
    CHECK_THROWS_AS((void)rmt_write(ok, s.context_ids, RmtConfig{9}), ConfigError);
}

TEST_CASE("rmt READ path matches gradmem's: only the write rule differs") {
    // same ModelParams layout plus the suffix vectors; the READ loss is the
    // same function of (memory, query, target) for both writers
    const auto params = init_params<double>(rmt_config(), 29);
    const Sample s = generate_sample(31, 0, 2);
    const auto mem = rmt_write(params, s.context_ids, RmtConfig{1});
    const double a = read_loss(params, &mem.values, s.query_ids, s.target_ids);
    const double b = read_loss(params, &mem.values, s.query_ids, s.target_ids);
    CHECK(a == b);
    CHECK(std::isfinite(a));
}

TEST_CASE("full_attention_loss equals read_loss with the context as a query prefix") {
    ModelConfig cfg = rmt_config();
    cfg.rmt_write_mem = false;
    const auto params = init_params<double>(cfg, 37);
    const Sample s = generate_sample(41, 0, 3);
    const double via_baseline = full_attention_loss(params, s.context_ids, s.query_ids, s.target_ids);
    std::vector<int32_t> cq(s.context_ids.begin(), s.context_ids.end());
    cq.insert(cq.end(), s.query_ids.begin(), s.query_ids.end());
    const double via_engine = read_loss<double>(params, nullptr, cq, s.target_ids);
    CHECK(via_baseline == doctest::Approx(via_engine).epsilon(1e-14));
}

TEST_CASE("full_attention_loss with an empty context is an unconditional QA loss") {
    ModelConfig cfg = rmt_config();
    cfg.rmt_write_mem = false;
    const auto params = init_params<double>(cfg, 43);
    const Sample s = generate_sample(47, 0, 2);
    const double loss = full_attention_loss<double>(params, {}, s.query_ids, s.target_ids);
    const double via_engine = read_loss<double>(params, nullptr, s.query_ids, s.target_ids);
    CHECK(loss == doctest::Approx(via_engine).epsilon(1e-14));
}
