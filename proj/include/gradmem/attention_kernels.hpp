#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>

#include "gradmem/tensor.hpp"

// Analytic attention forward, backward, and double backward for the fused
// strategy. Nothing from the forward is kept; probabilities are recomputed
// inside each kernel, which is what keeps peak memory flat relative to the
// composed-primitive route.
//
// Two head layouts share the kernels:
//   folded  [H*S, hd]  head h at rows h*S..(h+1)*S (the module-level API)
//   packed  [S, H*hd]  head h at columns h*hd..(h+1)*hd (the model's layout)

namespace gradmem::attnk {

enum class Layout { FoldedRows, PackedCols };

struct Geometry {
    int64_t heads, s, hd;
    int64_t stride;    // row stride of one head's view
    int64_t head_off;  // pointer offset between consecutive heads
    int64_t block;     // rows of one stacked output block (q-sized)

    static Geometry of(Layout layout, int64_t heads, int64_t rows, int64_t cols) {
        Geometry g{};
        g.heads = heads;
        if (layout == Layout::FoldedRows) {
            g.s = rows / heads;
            g.hd = cols;
            g.stride = cols;
            g.head_off = g.s * cols;
        } else {
            g.s = rows;
            g.hd = cols / heads;
            g.stride = cols;
            g.head_off = g.hd;
        }
        g.block = rows;
        return g;
    }
};

template <class Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using StrideMap = Eigen::Map<EMat<Real>, 0, Eigen::OuterStride<>>;
template <class Real>
using CStrideMap = Eigen::Map<const EMat<Real>, 0, Eigen::OuterStride<>>;

// Eigen scratch is outside the tracking allocator; account for it explicitly
// so the peak-memory comparison against the composed route stays honest.
struct ScratchBytes {
    int64_t n;
    explicit ScratchBytes(int64_t bytes) : n(bytes) { membytes::on_alloc(n); }
    ~ScratchBytes() { membytes::on_free(n); }
    ScratchBytes(const ScratchBytes&) = delete;
    ScratchBytes& operator=(const ScratchBytes&) = delete;
};

template <class Real>
CStrideMap<Real> head_in(const Tensor<Real>& t, const Geometry& g, int64_t h) {
    return CStrideMap<Real>(t.data.data() + h * g.head_off, g.s, g.hd, Eigen::OuterStride<>(g.stride));
}

template <class Real>
StrideMap<Real> head_out(Tensor<Real>& t, const Geometry& g, int64_t h, int64_t block_index) {
    return StrideMap<Real>(t.data.data() + block_index * g.block * g.stride + h * g.head_off, g.s, g.hd,
                           Eigen::OuterStride<>(g.stride));
}

// probs = softmax(q k^T / sqrt(hd)) with optional causal mask; masked
// entries are exactly zero.
template <class Real>
void head_probs(const CStrideMap<Real>& q, const CStrideMap<Real>& k, bool causal, EMat<Real>& probs) {
    const int64_t s = q.rows();
    probs.noalias() = q * k.transpose() * static_cast<Real>(1.0 / std::sqrt(static_cast<double>(q.cols())));
    for (int64_t i = 0; i < s; ++i) {
        Real* row = probs.data() + i * s;
        const int64_t jmax = causal ? i + 1 : s;
        Real mx = row[0];
        for (int64_t j = 1; j < jmax; ++j) mx = std::max(mx, row[j]);
        double denom = 0;
        for (int64_t j = 0; j < jmax; ++j) {
            const double e = std::exp(static_cast<double>(row[j] - mx));
            row[j] = static_cast<Real>(e);
            denom += e;
        }
        const Real inv = static_cast<Real>(1.0 / denom);
        for (int64_t j = 0; j < jmax; ++j) row[j] *= inv;
        for (int64_t j = jmax; j < s; ++j) row[j] = Real(0);
    }
}

// gS = P (.) (gP - rowsum(P (.) gP)); the softmax vjp, reused throughout.
template <class Real>
void softmax_vjp(const EMat<Real>& p, const EMat<Real>& gp, EMat<Real>& gs) {
    const int64_t s = p.rows();
    gs.resize(s, s);
    for (int64_t i = 0; i < s; ++i) {
        const Real* pi = p.data() + i * s;
        const Real* gi = gp.data() + i * s;
        Real* oi = gs.data() + i * s;
        double t = 0;
        for (int64_t j = 0; j < s; ++j) t += static_cast<double>(pi[j]) * static_cast<double>(gi[j]);
        for (int64_t j = 0; j < s; ++j) oi[j] = pi[j] * (gi[j] - static_cast<Real>(t));
    }
}

template <class Real>
void forward(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v, int64_t heads, bool causal,
             Layout layout, Tensor<Real>& out) {
    const Geometry g = Geometry::of(layout, heads, q.rows(), q.cols());
    out = Tensor<Real>{Dims{q.rows(), q.cols()}};
    const ScratchBytes scratch(1 * g.s * g.s * static_cast<int64_t>(sizeof(Real)));
    EMat<Real> probs;
    for (int64_t h = 0; h < heads; ++h) {
        head_probs(head_in(q, g, h), head_in(k, g, h), causal, probs);
        head_out(out, g, h, 0).noalias() = probs * head_in(v, g, h);
    }
}

// First-order backward: packed [gQ; gK; gV] stacked along rows.
template <class Real>
void backward(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v, const Tensor<Real>& go,
              int64_t heads, bool causal, Layout layout, Tensor<Real>& packed) {
    const Geometry g = Geometry::of(layout, heads, q.rows(), q.cols());
    const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(g.hd)));
    packed = Tensor<Real>{Dims{3 * q.rows(), q.cols()}};
    const ScratchBytes scratch(3 * g.s * g.s * static_cast<int64_t>(sizeof(Real)));
    EMat<Real> probs, gp, gs;
    for (int64_t h = 0; h < heads; ++h) {
        const auto qh = head_in(q, g, h), kh = head_in(k, g, h), vh = head_in(v, g, h), gh = head_in(go, g, h);
        head_probs(qh, kh, causal, probs);
        head_out(packed, g, h, 2).noalias() = probs.transpose() * gh;  // gV
        gp.noalias() = gh * vh.transpose();                            // gP
        softmax_vjp(probs, gp, gs);
        head_out(packed, g, h, 0).noalias() = gs * kh * inv_sqrt;              // gQ
        head_out(packed, g, h, 1).noalias() = gs.transpose() * qh * inv_sqrt;  // gK
    }
}

// Double backward: given the upstream gradient u = [uQ; uK; uV] of
// backward()'s output, produce packed [dq; dk; dv; dgO].
template <class Real>
void double_backward(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v, const Tensor<Real>& go,
                     const Tensor<Real>& u, int64_t heads, bool causal, Layout layout, Tensor<Real>& packed) {
    const Geometry g = Geometry::of(layout, heads, q.rows(), q.cols());
    const int64_t s = g.s;
    const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(g.hd)));
    packed = Tensor<Real>{Dims{4 * q.rows(), q.cols()}};
    const ScratchBytes scratch(7 * s * s * static_cast<int64_t>(sizeof(Real)));
    EMat<Real> probs, gp, gs, ugs, ugp, up, us;
    for (int64_t h = 0; h < heads; ++h) {
        const auto qh = head_in(q, g, h), kh = head_in(k, g, h), vh = head_in(v, g, h), gh = head_in(go, g, h);
        const CStrideMap<Real> uq(u.data.data() + h * g.head_off, s, g.hd, Eigen::OuterStride<>(g.stride));
        const CStrideMap<Real> uk(u.data.data() + g.block * g.stride + h * g.head_off, s, g.hd,
                                  Eigen::OuterStride<>(g.stride));
        const CStrideMap<Real> uv(u.data.data() + 2 * g.block * g.stride + h * g.head_off, s, g.hd,
                                  Eigen::OuterStride<>(g.stride));

        head_probs(qh, kh, causal, probs);
        gp.noalias() = gh * vh.transpose();
        softmax_vjp(probs, gp, gs);

        // u_gS = (uQ K^T + Q uK^T) / sqrt(hd)
        ugs.noalias() = uq * kh.transpose();
        ugs.noalias() += qh * uk.transpose();
        ugs *= inv_sqrt;
        softmax_vjp(probs, ugs, ugp);  // u_gP = P (.) (u_gS - rowsum(u_gS (.) P))

        // uP = gO uV^T + u_gS (.) (gP - t) - gP (.) r
        up.resize(s, s);
        for (int64_t i = 0; i < s; ++i) {
            const Real* pi = probs.data() + i * s;
            const Real* gpi = gp.data() + i * s;
            const Real* ugsi = ugs.data() + i * s;
            double t = 0, r = 0;
            for (int64_t j = 0; j < s; ++j) {
                t += static_cast<double>(pi[j]) * static_cast<double>(gpi[j]);
                r += static_cast<double>(pi[j]) * static_cast<double>(ugsi[j]);
            }
            Real* upi = up.data() + i * s;
            for (int64_t j = 0; j < s; ++j)
                upi[j] = ugsi[j] * (gpi[j] - static_cast<Real>(t)) - gpi[j] * static_cast<Real>(r);
        }
        up.noalias() += gh * uv.transpose();
        softmax_vjp(probs, up, us);  // uS

        auto dq = head_out(packed, g, h, 0);
        dq.noalias() = gs * uk;
        dq.noalias() += us * kh;
        dq *= inv_sqrt;
        auto dk = head_out(packed, g, h, 1);
        dk.noalias() = gs.transpose() * uq;
        dk.noalias() += us.transpose() * qh;
        dk *= inv_sqrt;
        head_out(packed, g, h, 2).noalias() = ugp.transpose() * gh;  // dv
        auto dgo = head_out(packed, g, h, 3);
        dgo.noalias() = probs * uv;
        dgo.noalias() += ugp * vh;
    }
}

}  // namespace gradmem::attnk
