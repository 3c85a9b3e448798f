#include <doctest.h>

#include <cmath>
#include <functional>

#include "gradmem/attention.hpp"
#include "gradmem/gradcheck.hpp"
#include "gradmem/losses.hpp"
#include "gradmem/rng.hpp"
#include "gradmem/tape.hpp"

using namespace gradmem;

namespace {

Tensor<double> rand_tensor(Dims d, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t{std::move(d)};
    for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform01();
    return t;
}

// Builds f(x) = sum(op_graph(x) . W) and checks analytic d/dx against central
// differences. The graph is re-recorded from scratch for every probe.
void check_grad(const std::function<NodeId(Tape<double>&, NodeId)>& build, const Tensor<double>& x,
                double tol = 1e-6, double eps = 1e-5) {
    Rng wrng(7);
    Tensor<double> w;
    {
        Tape<double> tp;
        const NodeId xin = tp.input(x);
        const NodeId y = build(tp, xin);
        w = rand_tensor(tp.dims(y), wrng);
    }
    auto f = [&](const Tensor<double>& probe) {
        Tape<double> tp;
        const NodeId xin = tp.input(probe);
        const NodeId y = build(tp, xin);
        return tp.value(tp.reduce_sum(tp.mul(y, tp.constant(w)))).data[0];
    };
    Tape<double> tp;
    const NodeId xin = tp.input(x);
    const NodeId y = build(tp, xin);
    const NodeId loss = tp.reduce_sum(tp.mul(y, tp.constant(w)));
    const NodeId g = tp.grad1(loss, xin);
    const auto report = finite_diff_check<double>(f, x, tp.value(g), eps);
    CHECK(report.max_rel_err < tol);
}

}  // namespace

TEST_CASE("matmul by identity returns the input") {
    Tape<double> tp;
    Rng rng(1);
    const NodeId x = tp.input(rand_tensor({3, 4}, rng));
    const NodeId i3 = tp.constant(Tensor<double>::identity(3));
    const NodeId y = tp.matmul(i3, x);
    CHECK(tp.value(y).max_abs_diff(tp.value(x)) == 0.0);
}

TEST_CASE("softmax of a constant row is uniform") {
    Tape<double> tp;
    const NodeId x = tp.input(Tensor<double>::zeros({1, 3}));
    const auto& y = tp.value(tp.softmax(x));
    for (double v : y.data) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("grad: x^2 at 3, x*y at (2,5), grad-of-grad x^3 at 2") {
    {
        Tape<double> tp;
        const NodeId x = tp.input(Tensor<double>::scalar(3.0));
        const NodeId g = tp.grad1(tp.pow_c(x, 2.0), x);
        CHECK(tp.value(g).data[0] == doctest::Approx(6.0));
    }
    {
        Tape<double> tp;
        const NodeId x = tp.input(Tensor<double>::scalar(2.0));
        const NodeId y = tp.input(Tensor<double>::scalar(5.0));
        const NodeId g = tp.grad1(tp.mul(x, y), x);
        CHECK(tp.value(g).data[0] == doctest::Approx(5.0));
    }
    {
        Tape<double> tp;
        const NodeId x = tp.input(Tensor<double>::scalar(2.0));
        const NodeId g = tp.grad1(tp.pow_c(x, 3.0), x, /*keep_graph=*/true);
        const NodeId gg = tp.grad1(g, x);
        CHECK(tp.value(gg).data[0] == doctest::Approx(12.0));
    }
}

TEST_CASE("grad: unreachable wrt gives zeros, non-scalar output throws") {
    Tape<double> tp;
    Rng rng(2);
    const NodeId x = tp.input(rand_tensor({2, 2}, rng));
    const NodeId z = tp.input(rand_tensor({2, 2}, rng));
    const NodeId loss = tp.reduce_sum(tp.mul(x, x));
    const NodeId gz = tp.grad1(loss, z);
    CHECK(tp.value(gz).norm2() == 0.0);
    CHECK_THROWS_AS((void)tp.grad1(x, z), TapeError);
}

TEST_CASE("finite differences: every primitive, 64-bit, inputs in [-1,1]") {
    Rng rng(42);
    const Tensor<double> x34 = rand_tensor({3, 4}, rng);
    const Tensor<double> pos34 = rand_tensor({3, 4}, rng, 0.5, 1.5);

    auto with_const = [&](Dims d) {
        Rng r2(11);
        return rand_tensor(std::move(d), r2);
    };

    check_grad([&](Tape<double>& tp, NodeId x) { return tp.add(x, tp.constant(with_const({3, 4}))); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.sub(tp.constant(with_const({3, 4})), x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.mul(x, tp.constant(with_const({3, 4}))); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.affine(x, -1.7, 0.3); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.matmul(x, tp.constant(with_const({4, 2}))); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.matmul(tp.constant(with_const({2, 3})), x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.transpose(x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.pow_c(x, 1.7); }, pos34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.pow_c(x, 2.0); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.pow_c(x, -0.5); }, pos34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.exp_(x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.log_(x); }, pos34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.sigmoid(x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.row_sum(x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.row_bcast(x, 5); }, rand_tensor({3, 1}, rng));
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.col_sum(x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.col_bcast(x, 5); }, rand_tensor({1, 4}, rng));
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.reduce_sum(x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.full_bcast(x, {2, 3}); },
               Tensor<double>::scalar(0.37));
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.slice_rows(x, 1, 3); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.slice_cols(x, 1, 3); }, x34);
    check_grad(
        [&](Tape<double>& tp, NodeId x) {
            const NodeId c = tp.constant(with_const({2, 4}));
            return tp.concat_rows({x, c});
        },
        x34);
    check_grad(
        [&](Tape<double>& tp, NodeId x) {
            const NodeId c = tp.constant(with_const({3, 2}));
            return tp.concat_cols({c, x});
        },
        x34);
    const auto ids = std::make_shared<const std::vector<int32_t>>(std::vector<int32_t>{2, 0, 2, 1});
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.lookup_rows(x, ids); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.scatter_rows(x, ids, 5); },
               rand_tensor({4, 4}, rng));
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.softmax(x); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.rope(x, 3, 4, false); }, x34);
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.reshape(x, {4, 3}); }, x34);
    // away from the min kink
    check_grad([&](Tape<double>& tp, NodeId x) { return tp.min_c(x, 0.05); }, x34);
}

TEST_CASE("rmsnorm composition: gradient vs finite differences at 1e-7") {
    Rng rng(5);
    const Tensor<double> x = rand_tensor({4, 8}, rng);
    auto rmsnorm = [](Tape<double>& tp, NodeId in) {
        const int64_t c = tp.value(in).cols();
        const NodeId ms = tp.scale(tp.row_sum(tp.pow_c(in, 2.0)), 1.0 / static_cast<double>(c));
        const NodeId r = tp.pow_c(tp.affine(ms, 1.0, 1e-6), -0.5);
        return tp.mul(in, tp.row_bcast(r, c));
    };
    check_grad(rmsnorm, x, 1e-7, 1e-5);
}

TEST_CASE("second order: grad(grad f) matches finite differences of grad f") {
    Rng rng(9);
    const Tensor<double> x = rand_tensor({3, 4}, rng);
    const Tensor<double> w = rand_tensor({4, 4}, rng);
    const Tensor<double> u = rand_tensor({3, 4}, rng);

    // f(x) = sum(softmax(x W) . sigmoid(x)); h(x) = <grad f, u>
    auto build_f = [&](Tape<double>& tp, NodeId xin) {
        const NodeId a = tp.softmax(tp.matmul(xin, tp.constant(w)));
        return tp.reduce_sum(tp.mul(a, tp.sigmoid(xin)));
    };
    auto h = [&](const Tensor<double>& probe) {
        Tape<double> tp;
        const NodeId xin = tp.input(probe);
        const NodeId g = tp.grad1(build_f(tp, xin), xin, /*keep_graph=*/false);
        return tp.value(tp.reduce_sum(tp.mul(g, tp.constant(u)))).data[0];
    };

    Tape<double> tp;
    const NodeId xin = tp.input(x);
    const NodeId g = tp.grad1(build_f(tp, xin), xin, /*keep_graph=*/true);
    const NodeId hval = tp.reduce_sum(tp.mul(g, tp.constant(u)));
    const NodeId hg = tp.grad1(hval, xin);
    const auto report = finite_diff_check<double>(h, x, tp.value(hg), 1e-4);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("replay reproduces recorded values bit-for-bit") {
    Rng rng(3);
    Tape<double> tp;
    const NodeId x = tp.input(rand_tensor({4, 6}, rng));
    const NodeId w = tp.constant(rand_tensor({6, 6}, rng));
    const NodeId y = tp.softmax(tp.matmul(tp.sigmoid(tp.matmul(x, w)), tp.transpose(w)));
    const NodeId loss = tp.reduce_sum(tp.pow_c(y, 2.0));
    (void)tp.grad1(loss, x, true);
    CHECK(tp.replay_matches());
}

TEST_CASE("non-finite primitive output aborts with the node named") {
    Tape<double> tp;
    const NodeId x = tp.input(Tensor<double>::from({2}, {1.0, -1.0}));
    CHECK_THROWS_WITH_AS((void)tp.log_(x), doctest::Contains("non-finite output of log"), TapeError);
    const NodeId z = tp.input(Tensor<double>::from({1}, {0.0}));
    CHECK_THROWS_AS((void)tp.pow_c(z, -1.0), TapeError);
}

TEST_CASE("cross entropy: uniform logits give ln(vocab)") {
    Tape<double> tp;
    const NodeId logits = tp.input(Tensor<double>::zeros({3, 66}));
    const std::vector<int32_t> targets{5, 17, 64};
    const std::vector<uint8_t> mask{1, 1, 1};
    const NodeId loss = softmax_cross_entropy(tp, logits, targets, mask);
    CHECK(tp.value(loss).data[0] == doctest::Approx(std::log(66.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy: dominant correct logit drives loss to zero") {
    Tape<double> tp;
    Tensor<double> lg{Dims{2, 66}};
    lg.at(0, 7) = 60.0;
    lg.at(1, 30) = 60.0;
    const NodeId loss = softmax_cross_entropy(tp, tp.input(std::move(lg)), {7, 30}, {1, 1});
    CHECK(tp.value(loss).data[0] < 1e-10);
}

TEST_CASE("cross entropy matches an independent log-sum-exp oracle") {
    Rng rng(21);
    const Tensor<double> lg = rand_tensor({5, 66}, rng, -3.0, 3.0);
    const std::vector<int32_t> targets{1, 65, 33, 12, 0};
    const std::vector<uint8_t> mask{1, 0, 1, 1, 0};

    // independent oracle: direct log-sum-exp, no shared code with the tape
    double expect = 0;
    int n = 0;
    for (int i = 0; i < 5; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        double mx = lg.at(i, 0);
        for (int j = 1; j < 66; ++j) mx = std::max(mx, lg.at(i, j));
        double denom = 0;
        for (int j = 0; j < 66; ++j) denom += std::exp(lg.at(i, j) - mx);
        expect += std::log(denom) + mx - lg.at(i, targets[static_cast<size_t>(i)]);
        ++n;
    }
    expect /= n;

    Tape<double> tp;
    const NodeId loss = softmax_cross_entropy(tp, tp.input(lg), targets, mask);
    CHECK(std::abs(tp.value(loss).data[0] - expect) < 1e-10);
}

TEST_CASE("cross entropy rejects empty masks and out-of-vocab targets") {
    Tape<double> tp;
    const NodeId lg = tp.input(Tensor<double>::zeros({2, 66}));
    CHECK_THROWS_AS((void)softmax_cross_entropy(tp, lg, {0, 1}, {0, 0}), TapeError);
    CHECK_THROWS_AS((void)softmax_cross_entropy(tp, lg, {0, 66}, {1, 1}), TapeError);
}

TEST_CASE("cross entropy gradient vs finite differences") {
    Rng rng(23);
    const Tensor<double> lg = rand_tensor({4, 11}, rng, -2.0, 2.0);
    const std::vector<int32_t> targets{3, 10, 0, 5};
    const std::vector<uint8_t> mask{1, 1, 0, 1};
    auto f = [&](const Tensor<double>& probe) {
        Tape<double> tp;
        return tp.value(softmax_cross_entropy(tp, tp.input(probe), targets, mask)).data[0];
    };
    Tape<double> tp;
    const NodeId xin = tp.input(lg);
    const NodeId g = tp.grad1(softmax_cross_entropy(tp, xin, targets, mask), xin);
    CHECK(finite_diff_check<double>(f, lg, tp.value(g), 1e-5).max_rel_err < 1e-7);
}

TEST_CASE("global-norm clip: inactive below the bound, rescales above it") {
    Tape<double> tp;
    Rng rng(31);
    Tensor<double> small = rand_tensor({2, 3}, rng, -0.01, 0.01);
    const NodeId a = tp.input(small);
    const auto ra = clip_by_global_norm(tp, a, 1.0);
    CHECK(tp.value(ra.clipped).max_abs_diff(small) < 1e-12);

    Tensor<double> big = rand_tensor({2, 3}, rng, 5.0, 9.0);
    const NodeId b = tp.input(big);
    const auto rb = clip_by_global_norm(tp, b, 1.0);
    CHECK(rb.norm_after == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(rb.norm_before == doctest::Approx(big.norm2()));
    // direction preserved
    const auto& cb = tp.value(rb.clipped);
    for (size_t i = 0; i < cb.data.size(); ++i)
        CHECK(cb.data[i] * big.data[i] > 0.0);
}

TEST_CASE("clip is differentiable through the scaling") {
    Rng rng(33);
    const Tensor<double> x = rand_tensor({3, 3}, rng, 0.5, 1.5);  // norm > 1: active branch
    const Tensor<double> w = rand_tensor({3, 3}, rng);
    auto f = [&](const Tensor<double>& probe) {
        Tape<double> tp;
        const NodeId xin = tp.input(probe);
        const auto r = clip_by_global_norm(tp, xin, 1.0);
        return tp.value(tp.reduce_sum(tp.mul(r.clipped, tp.constant(w)))).data[0];
    };
    Tape<double> tp;
    const NodeId xin = tp.input(x);
    const auto r = clip_by_global_norm(tp, xin, 1.0);
    const NodeId g = tp.grad1(tp.reduce_sum(tp.mul(r.clipped, tp.constant(w))), xin);
    CHECK(finite_diff_check<double>(f, x, tp.value(g), 1e-6).max_rel_err < 1e-6);
}
