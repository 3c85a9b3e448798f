#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gradmem/attention_kernels.hpp"
#include "gradmem/common.hpp"
#include "gradmem/tensor.hpp"

namespace gradmem {

enum class Op : uint8_t {
    Const, Input,
    Add, Sub, Mul, Affine,
    MatMul, Transpose,
    PowC, Exp, Log, Sigmoid, MinC,
    RowSum, RowBcast, ColSum, ColBcast, ReduceSum, FullBcast,
    SliceRows, ConcatRows, SliceCols, ConcatCols,
    LookupRows, ScatterRows,
    Softmax, Rope, Detach, Reshape,
    Attn, AttnBwd, AttnBwd2,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Const: return "const";
        case Op::Input: return "input";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Affine: return "affine";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::PowC: return "pow_const";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sigmoid: return "sigmoid";
        case Op::MinC: return "min_const";
        case Op::RowSum: return "row_sum";
        case Op::RowBcast: return "row_bcast";
        case Op::ColSum: return "col_sum";
        case Op::ColBcast: return "col_bcast";
        case Op::ReduceSum: return "reduce_sum";
        case Op::FullBcast: return "full_bcast";
        case Op::SliceRows: return "slice_rows";
        case Op::ConcatRows: return "concat_rows";
        case Op::SliceCols: return "slice_cols";
        case Op::ConcatCols: return "concat_cols";
        case Op::LookupRows: return "lookup_rows";
        case Op::ScatterRows: return "scatter_rows";
        case Op::Softmax: return "softmax";
        case Op::Rope: return "rope_rotate";
        case Op::Detach: return "detach";
        case Op::Reshape: return "reshape";
        case Op::Attn: return "attention";
        case Op::AttnBwd: return "attention_bwd";
        case Op::AttnBwd2: return "attention_bwd_bwd";
    }
    return "?";
}

using NodeId = int32_t;

// Reverse-mode tape with eager evaluation. Every primitive's derivative rule
// is expressed by emitting further primitives onto the same tape, so the
// recorded backward pass is itself differentiable (gradients of gradients).
// A tape is single-owner: never share one across threads.
template <class Real>
class Tape {
public:
    struct Node {
        Op op;
        std::vector<NodeId> in;
        Tensor<Real> val;
        const Tensor<Real>* ext = nullptr;  // borrowed leaf storage (Input)
        double p0 = 0, p1 = 0;
        int64_t a0 = 0, a1 = 0;
        bool flag = false;
        std::shared_ptr<const std::vector<int32_t>> ids;
        Dims shape;  // FullBcast / Reshape target
    };

    // ----- leaves -----

    NodeId constant(Tensor<Real> t) {
        Node n;
        n.op = Op::Const;
        n.val = std::move(t);
        return emit(std::move(n), /*check=*/false);
    }

    NodeId input(Tensor<Real> t) {
        Node n;
        n.op = Op::Input;
        n.val = std::move(t);
        return emit(std::move(n), /*check=*/false);
    }

    // Leaf whose storage stays outside the tape. The caller guarantees the
    // tensor outlives the tape and is not mutated while the tape is alive.
    NodeId input_borrowed(const Tensor<Real>* t) {
        Node n;
        n.op = Op::Input;
        n.ext = t;
        return emit(std::move(n), /*check=*/false);
    }

    NodeId zeros_like(NodeId a) { return constant(Tensor<Real>::zeros(dims(a))); }

    // ----- elementwise -----

    NodeId add(NodeId a, NodeId b) { return emit_ab(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return emit_ab(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return emit_ab(Op::Mul, a, b); }

    NodeId affine(NodeId a, double k, double c) {
        Node n;
        n.op = Op::Affine;
        n.in = {a};
        n.p0 = k;
        n.p1 = c;
        return emit(std::move(n));
    }
    NodeId scale(NodeId a, double k) { return affine(a, k, 0.0); }
    NodeId neg(NodeId a) { return affine(a, -1.0, 0.0); }

    NodeId pow_c(NodeId a, double p) {
        Node n;
        n.op = Op::PowC;
        n.in = {a};
        n.p0 = p;
        return emit(std::move(n));
    }
    NodeId exp_(NodeId a) { return emit_a(Op::Exp, a); }
    NodeId log_(NodeId a) { return emit_a(Op::Log, a); }
    NodeId sigmoid(NodeId a) { return emit_a(Op::Sigmoid, a); }

    NodeId min_c(NodeId a, double c) {
        Node n;
        n.op = Op::MinC;
        n.in = {a};
        n.p0 = c;
        return emit(std::move(n));
    }

    NodeId detach(NodeId a) { return emit_a(Op::Detach, a); }

    // ----- linear algebra -----

    NodeId matmul(NodeId a, NodeId b) {
        const auto& da = dims(a);
        const auto& db = dims(b);
        if (da.size() != 2 || db.size() != 2)
            throw TapeError("matmul: rank-2 operands required, got " + dims_str(da) + " x " + dims_str(db));
        if (da[1] != db[0])
            throw TapeError("matmul: inner dims mismatch " + dims_str(da) + " x " + dims_str(db));
        Node n;
        n.op = Op::MatMul;
        n.in = {a, b};
        return emit(std::move(n));
    }

    NodeId transpose(NodeId a) {
        if (dims(a).size() != 2) throw TapeError("transpose: rank-2 required");
        return emit_a(Op::Transpose, a);
    }

    // ----- reductions / broadcasts (rows = all-but-last dim) -----

    NodeId row_sum(NodeId a) { return emit_a(Op::RowSum, a); }
    NodeId row_bcast(NodeId a, int64_t c) {
        if (value(a).cols() != 1) throw TapeError("row_bcast: input must have one column");
        Node n;
        n.op = Op::RowBcast;
        n.in = {a};
        n.a1 = c;
        return emit(std::move(n));
    }
    NodeId col_sum(NodeId a) { return emit_a(Op::ColSum, a); }
    NodeId col_bcast(NodeId a, int64_t r) {
        if (value(a).rows() != 1) throw TapeError("col_bcast: input must have one row");
        Node n;
        n.op = Op::ColBcast;
        n.in = {a};
        n.a1 = r;
        return emit(std::move(n));
    }
    NodeId reduce_sum(NodeId a) { return emit_a(Op::ReduceSum, a); }
    NodeId full_bcast(NodeId a, Dims target) {
        if (value(a).numel() != 1) throw TapeError("full_bcast: scalar input required");
        Node n;
        n.op = Op::FullBcast;
        n.in = {a};
        n.shape = std::move(target);
        return emit(std::move(n));
    }

    // ----- structure -----

    NodeId slice_rows(NodeId a, int64_t r0, int64_t r1) {
        const auto& t = value(a);
        if (r0 < 0 || r1 > t.rows() || r0 >= r1) throw TapeError("slice_rows: bad range");
        Node n;
        n.op = Op::SliceRows;
        n.in = {a};
        n.a0 = r0;
        n.a1 = r1;
        return emit(std::move(n));
    }

    NodeId concat_rows(std::span<const NodeId> parts) {
        if (parts.empty()) throw TapeError("concat_rows: empty");
        Node n;
        n.op = Op::ConcatRows;
        n.in.assign(parts.begin(), parts.end());
        return emit(std::move(n));
    }
    NodeId concat_rows(std::initializer_list<NodeId> parts) {
        return concat_rows(std::span<const NodeId>(parts.begin(), parts.size()));
    }

    NodeId slice_cols(NodeId a, int64_t c0, int64_t c1) {
        const auto& t = value(a);
        if (c0 < 0 || c1 > t.cols() || c0 >= c1) throw TapeError("slice_cols: bad range");
        Node n;
        n.op = Op::SliceCols;
        n.in = {a};
        n.a0 = c0;
        n.a1 = c1;
        return emit(std::move(n));
    }

    NodeId concat_cols(std::span<const NodeId> parts) {
        if (parts.empty()) throw TapeError("concat_cols: empty");
        Node n;
        n.op = Op::ConcatCols;
        n.in.assign(parts.begin(), parts.end());
        return emit(std::move(n));
    }
    NodeId concat_cols(std::initializer_list<NodeId> parts) {
        return concat_cols(std::span<const NodeId>(parts.begin(), parts.size()));
    }

    NodeId reshape(NodeId a, Dims target) {
        if (dims_numel(target) != value(a).numel()) throw TapeError("reshape: numel mismatch");
        Node n;
        n.op = Op::Reshape;
        n.in = {a};
        n.shape = std::move(target);
        return emit(std::move(n));
    }

    NodeId lookup_rows(NodeId table, std::shared_ptr<const std::vector<int32_t>> ids) {
        const auto& t = value(table);
        for (int32_t i : *ids)
            if (i < 0 || i >= t.rows()) throw TapeError("lookup_rows: index out of range");
        Node n;
        n.op = Op::LookupRows;
        n.in = {table};
        n.ids = std::move(ids);
        return emit(std::move(n));
    }

    NodeId scatter_rows(NodeId src, std::shared_ptr<const std::vector<int32_t>> ids, int64_t out_rows) {
        if (static_cast<int64_t>(ids->size()) != value(src).rows())
            throw TapeError("scatter_rows: index count != source rows");
        Node n;
        n.op = Op::ScatterRows;
        n.in = {src};
        n.ids = std::move(ids);
        n.a0 = out_rows;
        return emit(std::move(n));
    }

    // ----- nonlinear blocks -----

    NodeId softmax(NodeId a) { return emit_a(Op::Softmax, a); }

    NodeId rope(NodeId a, int64_t start_pos, int64_t head_dim, bool inverse = false) {
        const auto& t = value(a);
        if (head_dim <= 0 || head_dim % 2 != 0 || t.cols() % head_dim != 0)
            throw TapeError("rope_rotate: cols must be a multiple of even head_dim");
        Node n;
        n.op = Op::Rope;
        n.in = {a};
        n.a0 = start_pos;
        n.a1 = head_dim;
        n.flag = inverse;
        return emit(std::move(n));
    }

    // Fused attention (manual strategy): folded [H*S, hd] or packed
    // [S, H*hd] head layout. Backward emits a single analytic node; its
    // backward emits the analytic double backward.
    NodeId attention_fused(NodeId q, NodeId k, NodeId v, int64_t heads, bool causal,
                           attnk::Layout layout = attnk::Layout::FoldedRows) {
        check_attn_inputs(q, k, v, heads, layout);
        Node n;
        n.op = Op::Attn;
        n.in = {q, k, v};
        n.a0 = heads;
        n.a1 = layout == attnk::Layout::PackedCols ? 1 : 0;
        n.flag = causal;
        return emit(std::move(n));
    }

    // ----- access -----

    const Tensor<Real>& value(NodeId id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.ext ? *n.ext : n.val;
    }
    const Dims& dims(NodeId id) const { return value(id).dims; }
    Op op(NodeId id) const { return nodes_[static_cast<size_t>(id)].op; }
    int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
    int64_t grad_calls() const { return grad_calls_; }

    int64_t count_op(Op o) const {
        int64_t c = 0;
        for (const auto& n : nodes_)
            if (n.op == o) ++c;
        return c;
    }

    // ----- differentiation -----

    // Reverse sweep from a rank-0 output. With keep_graph the emitted
    // backward nodes stay on the tape as differentiable primitives
    // (record-backward-as-primitives mode); without it they are evaluated,
    // popped, and the results re-enter as constants (plain mode).
    std::vector<NodeId> grad(NodeId out, std::span<const NodeId> wrt, bool keep_graph = true) {
        if (value(out).numel() != 1 || !dims(out).empty())
            throw TapeError("grad: output must be rank-0, got " + dims_str(dims(out)));
        ++grad_calls_;
        const NodeId watermark = static_cast<NodeId>(nodes_.size());

        // restrict the sweep to the cone that actually depends on `wrt`;
        // adjoints outside it would be computed and then dropped
        std::vector<uint8_t> needed(static_cast<size_t>(watermark), 0);
        for (NodeId w : wrt)
            if (w < watermark) needed[static_cast<size_t>(w)] = 1;
        for (NodeId id = 0; id < watermark; ++id) {
            if (needed[static_cast<size_t>(id)]) continue;
            for (NodeId in : nodes_[static_cast<size_t>(id)].in)
                if (needed[static_cast<size_t>(in)]) {
                    needed[static_cast<size_t>(id)] = 1;
                    break;
                }
        }

        std::vector<NodeId> adj(static_cast<size_t>(watermark), kNoNode);
        if (needed[static_cast<size_t>(out)])
            adj[static_cast<size_t>(out)] = constant(Tensor<Real>::scalar(Real(1)));

        for (NodeId id = out; id >= 0; --id) {
            const NodeId g = adj[static_cast<size_t>(id)];
            if (g == kNoNode) continue;
            backward_rule(id, g, adj, needed);
        }

        std::vector<NodeId> result;
        result.reserve(wrt.size());
        if (keep_graph) {
            for (NodeId w : wrt) {
                NodeId g = (w < watermark) ? adj[static_cast<size_t>(w)] : kNoNode;
                result.push_back(g == kNoNode ? zeros_like(w) : g);
            }
        } else {
            std::vector<Tensor<Real>> vals;
            vals.reserve(wrt.size());
            for (NodeId w : wrt) {
                NodeId g = (w < watermark) ? adj[static_cast<size_t>(w)] : kNoNode;
                vals.push_back(g == kNoNode ? Tensor<Real>::zeros(dims(w)) : value(g));
            }
            nodes_.resize(static_cast<size_t>(watermark));
            for (auto& v : vals) result.push_back(constant(std::move(v)));
        }
        return result;
    }

    NodeId grad1(NodeId out, NodeId wrt, bool keep_graph = true) {
        const NodeId w[1] = {wrt};
        return grad(out, std::span<const NodeId>(w, 1), keep_graph)[0];
    }

    // Re-evaluates every non-leaf node and compares bit-for-bit.
    bool replay_matches() const {
        for (const Node& n : nodes_) {
            if (n.op == Op::Const || n.op == Op::Input) continue;
            Tensor<Real> re = compute(n);
            if (re.dims != n.val.dims || re.data != n.val.data) return false;
        }
        return true;
    }

private:
    static constexpr NodeId kNoNode = -1;
    std::vector<Node> nodes_;
    int64_t grad_calls_ = 0;

    using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const EMat>;
    using MMap = Eigen::Map<EMat>;

    static attnk::Layout attn_layout(const Node& n) {
        return n.a1 ? attnk::Layout::PackedCols : attnk::Layout::FoldedRows;
    }

    NodeId emit_a(Op op, NodeId a) {
        Node n;
        n.op = op;
        n.in = {a};
        return emit(std::move(n));
    }

    NodeId emit_ab(Op op, NodeId a, NodeId b) {
        if (!value(a).same_shape(value(b)))
            throw TapeError(std::string(op_name(op)) + ": shape mismatch " + dims_str(dims(a)) + " vs " +
                            dims_str(dims(b)));
        Node n;
        n.op = op;
        n.in = {a, b};
        return emit(std::move(n));
    }

    void check_attn_inputs(NodeId q, NodeId k, NodeId v, int64_t heads, attnk::Layout layout) const {
        const auto& tq = value(q);
        const int64_t split = layout == attnk::Layout::FoldedRows ? tq.rows() : tq.cols();
        if (tq.rows() == 0 || heads <= 0 || split % heads != 0)
            throw TapeError("attention: head count does not divide the layout");
        if (!value(k).same_shape(tq) || !value(v).same_shape(tq))
            throw TapeError("attention: q/k/v shape mismatch (head_dim or seq differ)");
    }

    NodeId emit(Node n, bool check = true) {
        if (n.op != Op::Const && n.op != Op::Input) n.val = compute(n);
        const NodeId id = static_cast<NodeId>(nodes_.size());
        if (check) {
            const Tensor<Real>& v = n.ext ? *n.ext : n.val;
            if (!v.all_finite())
                throw TapeError("non-finite output of " + std::string(op_name(n.op)) + " (node " +
                                std::to_string(id) + ")");
        }
        nodes_.push_back(std::move(n));
        return id;
    }

    Tensor<Real> compute(const Node& n) const {
        auto in = [&](size_t i) -> const Tensor<Real>& { return value(n.in[i]); };
        switch (n.op) {
            case Op::Const:
            case Op::Input:
                return n.ext ? *n.ext : n.val;

            case Op::Add: {
                Tensor<Real> y = in(0);
                const auto& b = in(1);
                for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += b.data[i];
                return y;
            }
            case Op::Sub: {
                Tensor<Real> y = in(0);
                const auto& b = in(1);
                for (size_t i = 0; i < y.data.size(); ++i) y.data[i] -= b.data[i];
                return y;
            }
            case Op::Mul: {
                Tensor<Real> y = in(0);
                const auto& b = in(1);
                for (size_t i = 0; i < y.data.size(); ++i) y.data[i] *= b.data[i];
                return y;
            }
            case Op::Affine: {
                Tensor<Real> y = in(0);
                const Real k = static_cast<Real>(n.p0), c = static_cast<Real>(n.p1);
                for (auto& v : y.data) v = k * v + c;
                return y;
            }
            case Op::PowC: {
                Tensor<Real> y = in(0);
                const double p = n.p0;
                if (p == 2.0) {
                    for (auto& v : y.data) v = v * v;
                } else if (p == -1.0) {
                    for (auto& v : y.data) v = Real(1) / v;
                } else if (p == 0.5) {
                    for (auto& v : y.data) v = std::sqrt(v);
                } else if (p == -0.5) {
                    for (auto& v : y.data) v = Real(1) / std::sqrt(v);
                } else {
                    for (auto& v : y.data) v = static_cast<Real>(std::pow(static_cast<double>(v), p));
                }
                return y;
            }
            case Op::Exp: {
                Tensor<Real> y = in(0);
                for (auto& v : y.data) v = std::exp(v);
                return y;
            }
            case Op::Log: {
                Tensor<Real> y = in(0);
                for (auto& v : y.data) v = std::log(v);
                return y;
            }
            case Op::Sigmoid: {
                Tensor<Real> y = in(0);
                for (auto& v : y.data) v = Real(1) / (Real(1) + std::exp(-v));
                return y;
            }
            case Op::MinC: {
                Tensor<Real> y = in(0);
                const Real c = static_cast<Real>(n.p0);
                for (auto& v : y.data) v = std::min(v, c);
                return y;
            }
            case Op::MatMul: {
                const auto& a = in(0);
                const auto& b = in(1);
                Tensor<Real> y{Dims{a.dims[0], b.dims[1]}};
                CMap ma(a.data.data(), a.dims[0], a.dims[1]);
                CMap mb(b.data.data(), b.dims[0], b.dims[1]);
                MMap my(y.data.data(), y.dims[0], y.dims[1]);
                my.noalias() = ma * mb;
                return y;
            }
            case Op::Transpose: {
                const auto& a = in(0);
                Tensor<Real> y{Dims{a.dims[1], a.dims[0]}};
                CMap ma(a.data.data(), a.dims[0], a.dims[1]);
                MMap my(y.data.data(), y.dims[0], y.dims[1]);
                my = ma.transpose();
                return y;
            }
            case Op::RowSum: {
                const auto& a = in(0);
                const int64_t r = a.rows(), c = a.cols();
                Tensor<Real> y{Dims{r, 1}};
                for (int64_t i = 0; i < r; ++i) {
                    double s = 0;
                    const Real* row = a.data.data() + i * c;
                    for (int64_t j = 0; j < c; ++j) s += static_cast<double>(row[j]);
                    y.data[static_cast<size_t>(i)] = static_cast<Real>(s);
                }
                return y;
            }
            case Op::RowBcast: {
                const auto& a = in(0);
                const int64_t r = a.rows(), c = n.a1;
                Tensor<Real> y{Dims{r, c}};
                for (int64_t i = 0; i < r; ++i) {
                    const Real v = a.data[static_cast<size_t>(i)];
                    Real* row = y.data.data() + i * c;
                    for (int64_t j = 0; j < c; ++j) row[j] = v;
                }
                return y;
            }
            case Op::ColSum: {
                const auto& a = in(0);
                const int64_t r = a.rows(), c = a.cols();
                Tensor<Real> y{Dims{1, c}};
                std::vector<double> acc(static_cast<size_t>(c), 0.0);
                for (int64_t i = 0; i < r; ++i) {
                    const Real* row = a.data.data() + i * c;
                    for (int64_t j = 0; j < c; ++j) acc[static_cast<size_t>(j)] += static_cast<double>(row[j]);
                }
                for (int64_t j = 0; j < c; ++j) y.data[static_cast<size_t>(j)] = static_cast<Real>(acc[static_cast<size_t>(j)]);
                return y;
            }
            case Op::ColBcast: {
                const auto& a = in(0);
                const int64_t r = n.a1, c = a.cols();
                Tensor<Real> y{Dims{r, c}};
                for (int64_t i = 0; i < r; ++i)
                    std::copy(a.data.begin(), a.data.end(), y.data.begin() + i * c);
                return y;
            }
            case Op::ReduceSum: {
                const auto& a = in(0);
                double s = 0;
                for (Real v : a.data) s += static_cast<double>(v);
                return Tensor<Real>::scalar(static_cast<Real>(s));
            }
            case Op::FullBcast: {
                const auto& a = in(0);
                return Tensor<Real>::full(n.shape, a.data[0]);
            }
            case Op::SliceRows: {
                const auto& a = in(0);
                const int64_t c = a.cols();
                Tensor<Real> y{Dims{n.a1 - n.a0, c}};
                std::copy(a.data.begin() + n.a0 * c, a.data.begin() + n.a1 * c, y.data.begin());
                return y;
            }
            case Op::ConcatRows: {
                const int64_t c = in(0).cols();
                int64_t r = 0;
                for (size_t i = 0; i < n.in.size(); ++i) {
                    if (in(i).cols() != c) throw TapeError("concat_rows: column mismatch");
                    r += in(i).rows();
                }
                Tensor<Real> y{Dims{r, c}};
                int64_t off = 0;
                for (size_t i = 0; i < n.in.size(); ++i) {
                    const auto& t = in(i);
                    std::copy(t.data.begin(), t.data.end(), y.data.begin() + off * c);
                    off += t.rows();
                }
                return y;
            }
            case Op::SliceCols: {
                const auto& a = in(0);
                const int64_t r = a.rows(), c = a.cols(), w = n.a1 - n.a0;
                Tensor<Real> y{Dims{r, w}};
                for (int64_t i = 0; i < r; ++i)
                    std::copy(a.data.begin() + i * c + n.a0, a.data.begin() + i * c + n.a1,
                              y.data.begin() + i * w);
                return y;
            }
            case Op::ConcatCols: {
                const int64_t r = in(0).rows();
                int64_t c = 0;
                for (size_t i = 0; i < n.in.size(); ++i) {
                    if (in(i).rows() != r) throw TapeError("concat_cols: row mismatch");
                    c += in(i).cols();
                }
                Tensor<Real> y{Dims{r, c}};
                int64_t off = 0;
                for (size_t i = 0; i < n.in.size(); ++i) {
                    const auto& t = in(i);
                    const int64_t w = t.cols();
                    for (int64_t row = 0; row < r; ++row)
                        std::copy(t.data.begin() + row * w, t.data.begin() + (row + 1) * w,
                                  y.data.begin() + row * c + off);
                    off += w;
                }
                return y;
            }
            case Op::LookupRows: {
                const auto& a = in(0);
                const int64_t c = a.cols();
                const auto& ids = *n.ids;
                Tensor<Real> y{Dims{static_cast<int64_t>(ids.size()), c}};
                for (size_t i = 0; i < ids.size(); ++i)
                    std::copy(a.data.begin() + ids[i] * c, a.data.begin() + (ids[i] + 1) * c,
                              y.data.begin() + static_cast<int64_t>(i) * c);
                return y;
            }
            case Op::ScatterRows: {
                const auto& a = in(0);
                const int64_t c = a.cols();
                const auto& ids = *n.ids;
                Tensor<Real> y{Dims{n.a0, c}};
                for (size_t i = 0; i < ids.size(); ++i) {
                    const Real* src = a.data.data() + static_cast<int64_t>(i) * c;
                    Real* dst = y.data.data() + ids[i] * c;
                    for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                }
                return y;
            }
            case Op::Softmax: {
                const auto& a = in(0);
                const int64_t r = a.rows(), c = a.cols();
                Tensor<Real> y{a.dims};
                for (int64_t i = 0; i < r; ++i) {
                    const Real* row = a.data.data() + i * c;
                    Real* out = y.data.data() + i * c;
                    Real mx = row[0];
                    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                    double denom = 0;
                    for (int64_t j = 0; j < c; ++j) {
                        const double e = std::exp(static_cast<double>(row[j] - mx));
                        out[j] = static_cast<Real>(e);
                        denom += e;
                    }
                    const Real inv = static_cast<Real>(1.0 / denom);
                    for (int64_t j = 0; j < c; ++j) out[j] *= inv;
                }
                return y;
            }
            case Op::Rope: {
                const auto& a = in(0);
                const int64_t r = a.rows(), c = a.cols(), hd = n.a1;
                Tensor<Real> y{a.dims};
                const double sign = n.flag ? -1.0 : 1.0;
                for (int64_t i = 0; i < r; ++i) {
                    const double pos = static_cast<double>(n.a0 + i);
                    const Real* x = a.data.data() + i * c;
                    Real* out = y.data.data() + i * c;
                    for (int64_t blk = 0; blk < c; blk += hd) {
                        for (int64_t d2 = 0; d2 < hd; d2 += 2) {
                            const double theta =
                                pos * std::pow(10000.0, -static_cast<double>(d2) / static_cast<double>(hd));
                            const double cs = std::cos(theta), sn = sign * std::sin(theta);
                            const double x0 = static_cast<double>(x[blk + d2]);
                            const double x1 = static_cast<double>(x[blk + d2 + 1]);
                            out[blk + d2] = static_cast<Real>(x0 * cs - x1 * sn);
                            out[blk + d2 + 1] = static_cast<Real>(x0 * sn + x1 * cs);
                        }
                    }
                }
                return y;
            }
            case Op::Detach:
            case Op::Reshape: {
                Tensor<Real> y = in(0);
                if (n.op == Op::Reshape) y.dims = n.shape;
                return y;
            }
            case Op::Attn: {
                Tensor<Real> y;
                attnk::forward(in(0), in(1), in(2), n.a0, n.flag, attn_layout(n), y);
                return y;
            }
            case Op::AttnBwd: {
                Tensor<Real> y;
                attnk::backward(in(0), in(1), in(2), in(3), n.a0, n.flag, attn_layout(n), y);
                return y;
            }
            case Op::AttnBwd2: {
                Tensor<Real> y;
                attnk::double_backward(in(0), in(1), in(2), in(3), in(4), n.a0, n.flag, attn_layout(n), y);
                return y;
            }
        }
        throw TapeError("compute: unhandled op");
    }

    void accumulate(std::vector<NodeId>& adj, NodeId target, NodeId contrib) {
        // an adjoint always carries its node's dims; rules that produce an
        // equal-numel 2-D view (the broadcast/reduce pairs) get reshaped
        if (dims(contrib) != dims(target)) contrib = reshape(contrib, dims(target));
        NodeId& slot = adj[static_cast<size_t>(target)];
        slot = (slot == kNoNode) ? contrib : add(slot, contrib);
    }

    // Emits the derivative rule of node `id` given its adjoint `g`, adding
    // contributions for inputs inside the wrt cone. Everything emitted is
    // itself a primitive. Header fields are copied up front: emission can
    // reallocate nodes_.
    void backward_rule(NodeId id, NodeId g, std::vector<NodeId>& adj, const std::vector<uint8_t>& needed) {
        struct Hdr {
            Op op;
            std::vector<NodeId> in;
            double p0;
            int64_t a0, a1;
            bool flag;
            std::shared_ptr<const std::vector<int32_t>> ids;
        };
        const Hdr n = [&] {
            const Node& src = nodes_[static_cast<size_t>(id)];
            return Hdr{src.op, src.in, src.p0, src.a0, src.a1, src.flag, src.ids};
        }();
        auto want = [&](size_t i) { return needed[static_cast<size_t>(n.in[i])] != 0; };
        switch (n.op) {
            case Op::Const:
            case Op::Input:
                return;
            case Op::Add:
                if (want(0)) accumulate(adj, n.in[0], g);
                if (want(1)) accumulate(adj, n.in[1], g);
                return;
            case Op::Sub:
                if (want(0)) accumulate(adj, n.in[0], g);
                if (want(1)) accumulate(adj, n.in[1], neg(g));
                return;
            case Op::Mul:
                if (want(0)) accumulate(adj, n.in[0], mul(g, n.in[1]));
                if (want(1)) accumulate(adj, n.in[1], mul(g, n.in[0]));
                return;
            case Op::Affine:
                if (want(0)) accumulate(adj, n.in[0], scale(g, n.p0));
                return;
            case Op::PowC: {
                if (!want(0)) return;
                const double p = n.p0;
                if (p == 0.0) return;
                if (p == 1.0) {
                    accumulate(adj, n.in[0], g);
                } else if (p == 2.0) {
                    accumulate(adj, n.in[0], mul(g, scale(n.in[0], 2.0)));
                } else {
                    accumulate(adj, n.in[0], mul(g, scale(pow_c(n.in[0], p - 1.0), p)));
                }
                return;
            }
            case Op::Exp:
                if (want(0)) accumulate(adj, n.in[0], mul(g, id));
                return;
            case Op::Log:
                if (want(0)) accumulate(adj, n.in[0], mul(g, pow_c(n.in[0], -1.0)));
                return;
            case Op::Sigmoid:
                if (want(0)) accumulate(adj, n.in[0], mul(g, mul(id, affine(id, -1.0, 1.0))));
                return;
            case Op::MinC: {
                // d/da min(a,c) = 1[a < c]; the indicator is a constant of the
                // recorded values (a.e. derivative).
                if (!want(0)) return;
                const auto& a = value(n.in[0]);
                Tensor<Real> mask{a.dims};
                const Real c = static_cast<Real>(n.p0);
                for (size_t i = 0; i < a.data.size(); ++i) mask.data[i] = a.data[i] < c ? Real(1) : Real(0);
                accumulate(adj, n.in[0], mul(g, constant(std::move(mask))));
                return;
            }
            case Op::MatMul:
                if (want(0)) accumulate(adj, n.in[0], matmul(g, transpose(n.in[1])));
                if (want(1)) accumulate(adj, n.in[1], matmul(transpose(n.in[0]), g));
                return;
            case Op::Transpose:
                if (want(0)) accumulate(adj, n.in[0], transpose(g));
                return;
            case Op::RowSum:
                if (want(0)) accumulate(adj, n.in[0], row_bcast(g, value(n.in[0]).cols()));
                return;
            case Op::RowBcast:
                if (want(0)) accumulate(adj, n.in[0], row_sum(g));
                return;
            case Op::ColSum:
                if (want(0)) accumulate(adj, n.in[0], col_bcast(g, value(n.in[0]).rows()));
                return;
            case Op::ColBcast:
                if (want(0)) accumulate(adj, n.in[0], col_sum(g));
                return;
            case Op::ReduceSum:
                if (want(0)) accumulate(adj, n.in[0], full_bcast(g, dims(n.in[0])));
                return;
            case Op::FullBcast:
                if (want(0)) accumulate(adj, n.in[0], reduce_sum(g));
                return;
            case Op::SliceRows: {
                if (!want(0)) return;
                const int64_t rows = value(n.in[0]).rows(), cols = value(n.in[0]).cols();
                std::vector<NodeId> parts;
                if (n.a0 > 0) parts.push_back(constant(Tensor<Real>::zeros(Dims{n.a0, cols})));
                parts.push_back(g);
                if (n.a1 < rows) parts.push_back(constant(Tensor<Real>::zeros(Dims{rows - n.a1, cols})));
                accumulate(adj, n.in[0], parts.size() == 1 ? g : concat_rows(parts));
                return;
            }
            case Op::ConcatRows: {
                int64_t off = 0;
                for (size_t i = 0; i < n.in.size(); ++i) {
                    const int64_t r = value(n.in[i]).rows();
                    if (want(i)) accumulate(adj, n.in[i], slice_rows(g, off, off + r));
                    off += r;
                }
                return;
            }
            case Op::SliceCols: {
                if (!want(0)) return;
                const int64_t rows = value(n.in[0]).rows(), cols = value(n.in[0]).cols();
                std::vector<NodeId> parts;
                if (n.a0 > 0) parts.push_back(constant(Tensor<Real>::zeros(Dims{rows, n.a0})));
                parts.push_back(g);
                if (n.a1 < cols) parts.push_back(constant(Tensor<Real>::zeros(Dims{rows, cols - n.a1})));
                accumulate(adj, n.in[0], parts.size() == 1 ? g : concat_cols(parts));
                return;
            }
            case Op::ConcatCols: {
                int64_t off = 0;
                for (size_t i = 0; i < n.in.size(); ++i) {
                    const int64_t c = value(n.in[i]).cols();
                    if (want(i)) accumulate(adj, n.in[i], slice_cols(g, off, off + c));
                    off += c;
                }
                return;
            }
            case Op::LookupRows:
                if (want(0)) accumulate(adj, n.in[0], scatter_rows(g, n.ids, value(n.in[0]).rows()));
                return;
            case Op::ScatterRows:
                if (want(0)) accumulate(adj, n.in[0], lookup_rows(g, n.ids));
                return;
            case Op::Softmax: {
                // dx = y (.) (g - rowsum(g (.) y))
                if (!want(0)) return;
                const NodeId gy = mul(g, id);
                const NodeId t = row_bcast(row_sum(gy), value(id).cols());
                accumulate(adj, n.in[0], mul(id, sub(g, t)));
                return;
            }
            case Op::Rope:
                if (want(0)) accumulate(adj, n.in[0], rope(g, n.a0, n.a1, !n.flag));
                return;
            case Op::Detach:
                return;
            case Op::Reshape:
                if (want(0)) accumulate(adj, n.in[0], reshape(g, dims(n.in[0])));
                return;
            case Op::Attn: {
                if (!want(0) && !want(1) && !want(2)) return;
                Node b;
                b.op = Op::AttnBwd;
                b.in = {n.in[0], n.in[1], n.in[2], g};
                b.a0 = n.a0;
                b.a1 = n.a1;
                b.flag = n.flag;
                const NodeId packed = emit(std::move(b));
                const int64_t blk = value(n.in[0]).rows();
                for (int i = 0; i < 3; ++i)
                    if (want(static_cast<size_t>(i)))
                        accumulate(adj, n.in[static_cast<size_t>(i)], slice_rows(packed, i * blk, (i + 1) * blk));
                return;
            }
            case Op::AttnBwd: {
                if (!want(0) && !want(1) && !want(2) && !want(3)) return;
                Node b;
                b.op = Op::AttnBwd2;
                b.in = {n.in[0], n.in[1], n.in[2], n.in[3], g};
                b.a0 = n.a0;
                b.a1 = n.a1;
                b.flag = n.flag;
                const NodeId packed = emit(std::move(b));
                const int64_t blk = value(n.in[0]).rows();
                for (int i = 0; i < 4; ++i)
                    if (want(static_cast<size_t>(i)))
                        accumulate(adj, n.in[static_cast<size_t>(i)], slice_rows(packed, i * blk, (i + 1) * blk));
                return;
            }
            case Op::AttnBwd2:
                throw TapeError("attention_bwd_bwd is terminal: third-order gradients through the fused "
                                "attention path are not supported (use the generic strategy)");
        }
    }
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace gradmem
