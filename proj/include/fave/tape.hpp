#pragma once

#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include "fave/kernels.hpp"
#include "fave/tensor.hpp"

namespace fave {

// A named, optionally trainable tensor. Optimizers skip trainable=false.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool t = true)
        : name(std::move(n)), value(std::move(v)), trainable(t) {}
};

enum class Op : std::uint8_t {
    Input, Const, Param,
    Add, Sub, Mul,
    Scale, AddScalar,
    Tanh, Gelu, Sin, Cos, Sqrt, Recip,
    Bmm,
    GatherRows, SliceRows, ConcatCols,
    AddRow, MulRow,
    SplitHeads, MergeHeads,
    RowSums, SubCol, MulCol, GatherCols,
    SoftmaxRows, LogSumExpRows,
    SumAll,
};

struct Node {
    Op op;
    std::int32_t in0 = -1, in1 = -1;
    Tensor val;
    double c = 0;                    // Scale / AddScalar constant
    i64 a0 = 0, a1 = 0, a2 = 0, a3 = 0;  // op-specific dims
    bool f0 = false, f1 = false;     // Bmm transpose flags
    std::vector<i64> idx;            // gather indices
    std::int32_t tangent = -1;       // forward-mode companion node
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::int32_t id = -1;
    bool ok() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
};

// Eager operation tape. Records every primitive with enough context to
// replay forward, run reverse-mode, and (in jvp mode) emit forward-mode
// tangents. Tangent rules are expressed with the same primitives, so a
// loss built from a JVP output backpropagates exactly.
class Tape {
  public:
    std::vector<Node> nodes;
    std::vector<std::pair<std::int32_t, Parameter*>> bindings;
    bool jvp_mode = false;

    Var input(Tensor t) { return leaf(Op::Input, std::move(t)); }
    Var constant(Tensor t) { return leaf(Op::Const, std::move(t)); }

    Var param(Parameter& p) {
        Var v = leaf(Op::Param, p.value);
        bindings.emplace_back(v.id, &p);
        return v;
    }

    const Tensor& val(Var v) const { return nodes[static_cast<size_t>(v.id)].val; }

    void seed_tangent(Var x, Var tx) {
        require(jvp_mode, "seed_tangent outside jvp mode");
        if (!val(x).same_shape(val(tx)))
            throw ShapeError("tangent shape " + val(tx).shape_str() + " does not match input " +
                             val(x).shape_str());
        nodes[static_cast<size_t>(x.id)].tangent = tx.id;
    }

    bool has_tangent(Var v) const { return nodes[static_cast<size_t>(v.id)].tangent >= 0; }

    Var tangent_of(Var v) const {
        std::int32_t t = nodes[static_cast<size_t>(v.id)].tangent;
        require(t >= 0, "node has no tangent");
        return Var{const_cast<Tape*>(this), t};
    }

    // Structural-zero tangents materialize on demand.
    Var tangent_or_zero(Var v) {
        if (has_tangent(v)) return tangent_of(v);
        return constant(Tensor::zeros(val(v).shape));
    }

    // ---- reverse mode ----------------------------------------------------

    // Gradients of a scalar loss w.r.t. every reachable node. Entries for
    // unreachable nodes stay empty.
    std::vector<Tensor> backward(Var loss) {
        const auto& lv = val(loss);
        if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got " + lv.shape_str());

        std::vector<char> reach(nodes.size(), 0);
        std::vector<std::int32_t> stack{loss.id};
        while (!stack.empty()) {
            std::int32_t id = stack.back();
            stack.pop_back();
            if (reach[static_cast<size_t>(id)]) continue;
            reach[static_cast<size_t>(id)] = 1;
            const Node& n = nodes[static_cast<size_t>(id)];
            if (n.in0 >= 0) stack.push_back(n.in0);
            if (n.in1 >= 0) stack.push_back(n.in1);
        }

        std::vector<Tensor> g(nodes.size());
        g[static_cast<size_t>(loss.id)] = Tensor({1}, {real(1)});
        for (std::int32_t id = loss.id; id >= 0; --id) {
            if (!reach[static_cast<size_t>(id)] || g[static_cast<size_t>(id)].v.empty()) continue;
            pull(id, g);
        }
        for (auto& [nid, p] : bindings) {
            if (static_cast<size_t>(nid) < g.size() && !g[static_cast<size_t>(nid)].v.empty() &&
                !g[static_cast<size_t>(nid)].all_finite())
                throw NumericError("non-finite gradient for parameter " + p->name);
        }
        return g;
    }

    // Bit-exact forward replay of the recorded program.
    bool replay_matches() const {
        Tape fresh;
        fresh.nodes.reserve(nodes.size());
        for (const Node& n : nodes) {
            Node copy = n;
            if (n.in0 >= 0) {
                copy.val = Tensor(n.val.shape);
                fresh.compute(copy);
            }
            fresh.nodes.push_back(std::move(copy));
        }
        for (size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i].val.v.size() != fresh.nodes[i].val.v.size()) return false;
            if (std::memcmp(nodes[i].val.v.data(), fresh.nodes[i].val.v.data(),
                            nodes[i].val.v.size() * sizeof(real)) != 0)
                return false;
        }
        return true;
    }

    // Append a computed node; builders below fill shapes and attrs.
    Var record(Node n) {
        compute(n);
        nodes.push_back(std::move(n));
        Var v{this, static_cast<std::int32_t>(nodes.size() - 1)};
        if (jvp_mode && !emitting_) maybe_emit_tangent(v);
        return v;
    }

  private:
    bool emitting_ = false;

    Var leaf(Op op, Tensor t) {
        Node n;
        n.op = op;
        n.val = std::move(t);
        nodes.push_back(std::move(n));
        return Var{this, static_cast<std::int32_t>(nodes.size() - 1)};
    }

    const Tensor& iv(const Node& n, int which) const {
        return nodes[static_cast<size_t>(which == 0 ? n.in0 : n.in1)].val;
    }

    void compute(Node& n);
    void pull(std::int32_t id, std::vector<Tensor>& g);
    void maybe_emit_tangent(Var v);

    static void axpy(Tensor& acc, const Tensor& x, real a = 1) {
        if (acc.v.empty()) acc = Tensor::zeros(x.shape);
        for (i64 i = 0; i < x.size(); ++i) acc.v[static_cast<size_t>(i)] += a * x.v[static_cast<size_t>(i)];
    }

    static Tensor& grad_buf(std::vector<Tensor>& g, std::int32_t id, const Tensor& like) {
        Tensor& t = g[static_cast<size_t>(id)];
        if (t.v.empty()) t = Tensor::zeros(like.shape);
        return t;
    }
};

inline const Tensor& Var::val() const { return tape->val(*this); }

// ---- builders ----------------------------------------------------------

namespace detail {
inline void need_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
}
inline void need_same_tape(Var a, Var b, const char* op) {
    if (a.tape != b.tape) throw Error(std::string(op) + ": operands on different tapes");
}
}  // namespace detail

inline Var binary(Op op, Var a, Var b, const char* name) {
    detail::need_same_tape(a, b, name);
    detail::need_same_shape(a.val(), b.val(), name);
    Node n;
    n.op = op;
    n.in0 = a.id;
    n.in1 = b.id;
    n.val = Tensor(a.val().shape);
    return a.tape->record(std::move(n));
}

inline Var unary(Op op, Var a, double c = 0) {
    Node n;
    n.op = op;
    n.in0 = a.id;
    n.c = c;
    n.val = Tensor(a.val().shape);
    return a.tape->record(std::move(n));
}

inline Var add(Var a, Var b) { return binary(Op::Add, a, b, "add"); }
inline Var sub(Var a, Var b) { return binary(Op::Sub, a, b, "sub"); }
inline Var mul(Var a, Var b) { return binary(Op::Mul, a, b, "mul"); }
inline Var scale(Var a, double c) { return unary(Op::Scale, a, c); }
inline Var add_scalar(Var a, double c) { return unary(Op::AddScalar, a, c); }
inline Var tanh(Var a) { return unary(Op::Tanh, a); }
inline Var gelu(Var a) { return unary(Op::Gelu, a); }
inline Var sin(Var a) { return unary(Op::Sin, a); }
inline Var cos(Var a) { return unary(Op::Cos, a); }
inline Var sqrt(Var a) { return unary(Op::Sqrt, a); }
inline Var recip(Var a) { return unary(Op::Recip, a); }

// [G,m,k] x [G,k,n] -> [G,m,n]; rank-2 operands mean G=1. Transpose flags
// describe the stored layout of each operand.
inline Var bmm(Var a, Var b, bool ta = false, bool tb = false) {
    detail::need_same_tape(a, b, "bmm");
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() < 2 || av.rank() > 3 || bv.rank() < 2 || bv.rank() > 3)
        throw ShapeError("bmm: rank must be 2 or 3");
    i64 ga = av.rank() == 3 ? av.dim(0) : 1;
    i64 gb = bv.rank() == 3 ? bv.dim(0) : 1;
    if (ga != gb) throw ShapeError("bmm: batch mismatch");
    i64 ar = av.dim(av.rank() - 2), ac = av.dim(av.rank() - 1);
    i64 br = bv.dim(bv.rank() - 2), bc = bv.dim(bv.rank() - 1);
    i64 m = ta ? ac : ar, ka = ta ? ar : ac;
    i64 kb = tb ? bc : br, nn = tb ? br : bc;
    if (ka != kb)
        throw ShapeError("bmm: inner dims " + av.shape_str() + " x " + bv.shape_str());
    Node n;
    n.op = Op::Bmm;
    n.in0 = a.id;
    n.in1 = b.id;
    n.a0 = ga;
    n.a1 = m;
    n.a2 = ka;
    n.a3 = nn;
    n.f0 = ta;
    n.f1 = tb;
    n.val = (av.rank() == 3 || bv.rank() == 3) ? Tensor({ga, m, nn}) : Tensor({m, nn});
    return a.tape->record(std::move(n));
}

inline Var matmul(Var a, Var b) { return bmm(a, b, false, false); }

inline Var gather_rows(Var x, std::vector<i64> rows) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("gather_rows: need rank-2 source");
    for (i64 r : rows)
        if (r < 0 || r >= xv.dim(0)) throw ShapeError("gather_rows: row index out of range");
    Node n;
    n.op = Op::GatherRows;
    n.in0 = x.id;
    n.idx = std::move(rows);
    n.val = Tensor({static_cast<i64>(n.idx.size()), xv.dim(1)});
    return x.tape->record(std::move(n));
}

inline Var slice_rows(Var x, i64 begin, i64 count) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("slice_rows: need rank-2 source");
    if (begin < 0 || count < 0 || begin + count > xv.dim(0))
        throw ShapeError("slice_rows: window out of range");
    Node n;
    n.op = Op::SliceRows;
    n.in0 = x.id;
    n.a0 = begin;
    n.a1 = count;
    n.val = Tensor({count, xv.dim(1)});
    return x.tape->record(std::move(n));
}

inline Var concat_cols(Var a, Var b) {
    detail::need_same_tape(a, b, "concat_cols");
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0))
        throw ShapeError("concat_cols: " + av.shape_str() + " vs " + bv.shape_str());
    Node n;
    n.op = Op::ConcatCols;
    n.in0 = a.id;
    n.in1 = b.id;
    n.val = Tensor({av.dim(0), av.dim(1) + bv.dim(1)});
    return a.tape->record(std::move(n));
}

inline Var rowwise(Op op, Var a, Var r, const char* name) {
    detail::need_same_tape(a, r, name);
    const Tensor& av = a.val();
    const Tensor& rv = r.val();
    if (rv.size() != av.cols())
        throw ShapeError(std::string(name) + ": row operand " + rv.shape_str() + " vs " +
                         av.shape_str());
    Node n;
    n.op = op;
    n.in0 = a.id;
    n.in1 = r.id;
    n.val = Tensor(av.shape);
    return a.tape->record(std::move(n));
}

inline Var add_row(Var a, Var r) { return rowwise(Op::AddRow, a, r, "add_row"); }
inline Var mul_row(Var a, Var r) { return rowwise(Op::MulRow, a, r, "mul_row"); }

inline Var split_heads(Var x, i64 batch, i64 len, i64 heads) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2 || xv.dim(0) != batch * len || xv.dim(1) % heads != 0)
        throw ShapeError("split_heads: bad layout " + xv.shape_str());
    Node n;
    n.op = Op::SplitHeads;
    n.in0 = x.id;
    n.a0 = batch;
    n.a1 = len;
    n.a2 = heads;
    n.val = Tensor({batch * heads, len, xv.dim(1) / heads});
    return x.tape->record(std::move(n));
}

inline Var merge_heads(Var x, i64 batch, i64 len, i64 heads) {
    const Tensor& xv = x.val();
    if (xv.rank() != 3 || xv.dim(0) != batch * heads || xv.dim(1) != len)
        throw ShapeError("merge_heads: bad layout " + xv.shape_str());
    Node n;
    n.op = Op::MergeHeads;
    n.in0 = x.id;
    n.a0 = batch;
    n.a1 = len;
    n.a2 = heads;
    n.val = Tensor({batch * len, xv.dim(2) * heads});
    return x.tape->record(std::move(n));
}

inline Var row_sums(Var a) {
    const Tensor& av = a.val();
    if (av.rank() < 2) throw ShapeError("row_sums: need rank >= 2");
    std::vector<i64> shape = av.shape;
    shape.back() = 1;
    Node n;
    n.op = Op::RowSums;
    n.in0 = a.id;
    n.val = Tensor(shape);
    return a.tape->record(std::move(n));
}

inline Var colwise(Op op, Var a, Var c, const char* name) {
    detail::need_same_tape(a, c, name);
    const Tensor& av = a.val();
    const Tensor& cv = c.val();
    if (cv.size() != av.rows())
        throw ShapeError(std::string(name) + ": column operand " + cv.shape_str() + " vs " +
                         av.shape_str());
    Node n;
    n.op = op;
    n.in0 = a.id;
    n.in1 = c.id;
    n.val = Tensor(av.shape);
    return a.tape->record(std::move(n));
}

inline Var sub_col(Var a, Var c) { return colwise(Op::SubCol, a, c, "sub_col"); }
inline Var mul_col(Var a, Var c) { return colwise(Op::MulCol, a, c, "mul_col"); }

inline Var gather_cols(Var x, std::vector<i64> cols) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2 || static_cast<i64>(cols.size()) != xv.dim(0))
        throw ShapeError("gather_cols: need one column index per row");
    for (i64 c : cols)
        if (c < 0 || c >= xv.dim(1)) throw ShapeError("gather_cols: column index out of range");
    Node n;
    n.op = Op::GatherCols;
    n.in0 = x.id;
    n.idx = std::move(cols);
    n.val = Tensor({xv.dim(0), 1});
    return x.tape->record(std::move(n));
}

inline Var softmax_rows(Var a) { return unary(Op::SoftmaxRows, a); }

inline Var logsumexp_rows(Var a) {
    const Tensor& av = a.val();
    if (av.rank() < 2) throw ShapeError("logsumexp_rows: need rank >= 2");
    std::vector<i64> shape = av.shape;
    shape.back() = 1;
    Node n;
    n.op = Op::LogSumExpRows;
    n.in0 = a.id;
    n.val = Tensor(shape);
    return a.tape->record(std::move(n));
}

inline Var sum_all(Var a) {
    Node n;
    n.op = Op::SumAll;
    n.in0 = a.id;
    n.val = Tensor({1});
    return a.tape->record(std::move(n));
}

// ---- derived helpers -----------------------------------------------------

inline Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.val().size())); }

// Pre-affine layer normalization, composed from primitives so both
// derivative modes fall out of the op rules.
inline Var layer_norm(Var x, double eps = 1e-5) {
    i64 n = x.val().cols();
    Var mu = scale(row_sums(x), 1.0 / static_cast<double>(n));
    Var xc = sub_col(x, mu);
    Var var = scale(row_sums(mul(xc, xc)), 1.0 / static_cast<double>(n));
    Var sd = sqrt(add_scalar(var, eps));
    return mul_col(xc, recip(sd));
}

// Per-row cross entropy -log softmax(logits)[target], stabilized via
// logsumexp. Returns [rows, 1].
inline Var ce_rows(Var logits, std::vector<i64> targets) {
    Var lse = logsumexp_rows(logits);
    Var picked = gather_cols(logits, std::move(targets));
    return sub(lse, picked);
}

// Mean over rows of the squared Euclidean distance between matching rows.
inline Var mean_row_sumsq(Var d) {
    i64 rows = d.val().rows();
    return scale(sum_all(mul(d, d)), 1.0 / static_cast<double>(rows));
}

// ---- forward compute -------------------------------------------------

inline void Tape::compute(Node& n) {
    const i64 sz = n.val.size();
    switch (n.op) {
        case Op::Input:
        case Op::Const:
        case Op::Param:
            break;
        case Op::Add: {
            const auto& a = iv(n, 0).v;
            const auto& b = iv(n, 1).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = a[i] + b[i];
            break;
        }
        case Op::Sub: {
            const auto& a = iv(n, 0).v;
            const auto& b = iv(n, 1).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = a[i] - b[i];
            break;
        }
        case Op::Mul: {
            const auto& a = iv(n, 0).v;
            const auto& b = iv(n, 1).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = a[i] * b[i];
            break;
        }
        case Op::Scale: {
            const auto& a = iv(n, 0).v;
            const real c = static_cast<real>(n.c);
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = a[i] * c;
            break;
        }
        case Op::AddScalar: {
            const auto& a = iv(n, 0).v;
            const real c = static_cast<real>(n.c);
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = a[i] + c;
            break;
        }
        case Op::Tanh: {
            const auto& a = iv(n, 0).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = std::tanh(a[i]);
            break;
        }
        case Op::Gelu: {
            const auto& a = iv(n, 0).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = kernels::gelu(a[i]);
            break;
        }
        case Op::Sin: {
            const auto& a = iv(n, 0).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = std::sin(a[i]);
            break;
        }
        case Op::Cos: {
            const auto& a = iv(n, 0).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = std::cos(a[i]);
            break;
        }
        case Op::Sqrt: {
            const auto& a = iv(n, 0).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = std::sqrt(a[i]);
            break;
        }
        case Op::Recip: {
            const auto& a = iv(n, 0).v;
            for (i64 i = 0; i < sz; ++i) n.val.v[i] = real(1) / a[i];
            break;
        }
        case Op::Bmm: {
            const Tensor& a = iv(n, 0);
            const Tensor& b = iv(n, 1);
            i64 g = n.a0, m = n.a1, k = n.a2, nn = n.a3;
            i64 astride = a.rank() == 3 ? a.dim(1) * a.dim(2) : 0;
            i64 bstride = b.rank() == 3 ? b.dim(1) * b.dim(2) : 0;
            for (i64 gi = 0; gi < g; ++gi)
                kernels::gemm(n.val.data() + gi * m * nn, a.data() + gi * astride,
                              b.data() + gi * bstride, m, k, nn, n.f0, n.f1, false);
            break;
        }
        case Op::GatherRows: {
            const Tensor& x = iv(n, 0);
            i64 d = x.dim(1);
            for (size_t r = 0; r < n.idx.size(); ++r)
                std::memcpy(n.val.data() + static_cast<i64>(r) * d, x.data() + n.idx[r] * d,
                            static_cast<size_t>(d) * sizeof(real));
            break;
        }
        case Op::SliceRows: {
            const Tensor& x = iv(n, 0);
            i64 d = x.dim(1);
            std::memcpy(n.val.data(), x.data() + n.a0 * d,
                        static_cast<size_t>(n.a1 * d) * sizeof(real));
            break;
        }
        case Op::ConcatCols: {
            const Tensor& a = iv(n, 0);
            const Tensor& b = iv(n, 1);
            i64 rows = a.dim(0), n1 = a.dim(1), n2 = b.dim(1);
            for (i64 r = 0; r < rows; ++r) {
                std::memcpy(n.val.data() + r * (n1 + n2), a.data() + r * n1,
                            static_cast<size_t>(n1) * sizeof(real));
                std::memcpy(n.val.data() + r * (n1 + n2) + n1, b.data() + r * n2,
                            static_cast<size_t>(n2) * sizeof(real));
            }
            break;
        }
        case Op::AddRow: {
            const Tensor& a = iv(n, 0);
            const Tensor& r = iv(n, 1);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) n.val.v[i * c + j] = a.v[i * c + j] + r.v[j];
            break;
        }
        case Op::MulRow: {
            const Tensor& a = iv(n, 0);
            const Tensor& r = iv(n, 1);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) n.val.v[i * c + j] = a.v[i * c + j] * r.v[j];
            break;
        }
        case Op::SplitHeads: {
            const Tensor& x = iv(n, 0);
            i64 b = n.a0, l = n.a1, h = n.a2, d = x.dim(1), dh = d / h;
            for (i64 bi = 0; bi < b; ++bi)
                for (i64 hi = 0; hi < h; ++hi)
                    for (i64 li = 0; li < l; ++li)
                        std::memcpy(n.val.data() + ((bi * h + hi) * l + li) * dh,
                                    x.data() + (bi * l + li) * d + hi * dh,
                                    static_cast<size_t>(dh) * sizeof(real));
            break;
        }
        case Op::MergeHeads: {
            const Tensor& x = iv(n, 0);
            i64 b = n.a0, l = n.a1, h = n.a2, dh = x.dim(2), d = dh * h;
            for (i64 bi = 0; bi < b; ++bi)
                for (i64 hi = 0; hi < h; ++hi)
                    for (i64 li = 0; li < l; ++li)
                        std::memcpy(n.val.data() + (bi * l + li) * d + hi * dh,
                                    x.data() + ((bi * h + hi) * l + li) * dh,
                                    static_cast<size_t>(dh) * sizeof(real));
            break;
        }
        case Op::RowSums: {
            const Tensor& a = iv(n, 0);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i) {
                real s = 0;
                for (i64 j = 0; j < c; ++j) s += a.v[i * c + j];
                n.val.v[i] = s;
            }
            break;
        }
        case Op::SubCol: {
            const Tensor& a = iv(n, 0);
            const Tensor& cc = iv(n, 1);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) n.val.v[i * c + j] = a.v[i * c + j] - cc.v[i];
            break;
        }
        case Op::MulCol: {
            const Tensor& a = iv(n, 0);
            const Tensor& cc = iv(n, 1);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) n.val.v[i * c + j] = a.v[i * c + j] * cc.v[i];
            break;
        }
        case Op::GatherCols: {
            const Tensor& x = iv(n, 0);
            i64 c = x.cols();
            for (i64 i = 0; i < x.rows(); ++i) n.val.v[i] = x.v[i * c + n.idx[static_cast<size_t>(i)]];
            break;
        }
        case Op::SoftmaxRows: {
            const Tensor& a = iv(n, 0);
            i64 rows = a.rows(), c = a.cols();
            n.val.v = a.v;
            for (i64 i = 0; i < rows; ++i) kernels::softmax_row(n.val.data() + i * c, c);
            break;
        }
        case Op::LogSumExpRows: {
            const Tensor& a = iv(n, 0);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i) n.val.v[i] = kernels::logsumexp_row(a.data() + i * c, c);
            break;
        }
        case Op::SumAll: {
            const auto& a = iv(n, 0).v;
            real s = 0;
            for (real x : a) s += x;
            n.val.v[0] = s;
            break;
        }
    }
}

// ---- reverse rules -----------------------------------------------------

inline void Tape::pull(std::int32_t id, std::vector<Tensor>& g) {
    Node& n = nodes[static_cast<size_t>(id)];
    const Tensor& gy = g[static_cast<size_t>(id)];
    switch (n.op) {
        case Op::Input:
        case Op::Const:
        case Op::Param:
            break;
        case Op::Add: {
            axpy(grad_buf(g, n.in0, iv(n, 0)), gy);
            axpy(grad_buf(g, n.in1, iv(n, 1)), gy);
            break;
        }
        case Op::Sub: {
            axpy(grad_buf(g, n.in0, iv(n, 0)), gy);
            axpy(grad_buf(g, n.in1, iv(n, 1)), gy, -1);
            break;
        }
        case Op::Mul: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            Tensor& gb = grad_buf(g, n.in1, iv(n, 1));
            const auto& a = iv(n, 0).v;
            const auto& b = iv(n, 1).v;
            for (i64 i = 0; i < gy.size(); ++i) {
                ga.v[i] += gy.v[i] * b[i];
                gb.v[i] += gy.v[i] * a[i];
            }
            break;
        }
        case Op::Scale: {
            axpy(grad_buf(g, n.in0, iv(n, 0)), gy, static_cast<real>(n.c));
            break;
        }
        case Op::AddScalar: {
            axpy(grad_buf(g, n.in0, iv(n, 0)), gy);
            break;
        }
        case Op::Tanh: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            for (i64 i = 0; i < gy.size(); ++i)
                ga.v[i] += gy.v[i] * (real(1) - n.val.v[i] * n.val.v[i]);
            break;
        }
        case Op::Gelu: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            const auto& a = iv(n, 0).v;
            const real c1 = real(0.7978845608028653558798921198687637);
            const real c2 = real(0.044715);
            for (i64 i = 0; i < gy.size(); ++i) {
                real x = a[i];
                real u = c1 * (x + c2 * x * x * x);
                real th = std::tanh(u);
                real sech2 = real(1) - th * th;
                real du = c1 * (real(1) + real(3) * c2 * x * x);
                ga.v[i] += gy.v[i] * (real(0.5) * (real(1) + th) + real(0.5) * x * sech2 * du);
            }
            break;
        }
        case Op::Sin: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            const auto& a = iv(n, 0).v;
            for (i64 i = 0; i < gy.size(); ++i) ga.v[i] += gy.v[i] * std::cos(a[i]);
            break;
        }
        case Op::Cos: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            const auto& a = iv(n, 0).v;
            for (i64 i = 0; i < gy.size(); ++i) ga.v[i] -= gy.v[i] * std::sin(a[i]);
            break;
        }
        case Op::Sqrt: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            for (i64 i = 0; i < gy.size(); ++i)
                ga.v[i] += gy.v[i] * real(0.5) / n.val.v[i];
            break;
        }
        case Op::Recip: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            for (i64 i = 0; i < gy.size(); ++i)
                ga.v[i] -= gy.v[i] * n.val.v[i] * n.val.v[i];
            break;
        }
        case Op::Bmm: {
            const Tensor& a = iv(n, 0);
            const Tensor& b = iv(n, 1);
            Tensor& ga = grad_buf(g, n.in0, a);
            Tensor& gb = grad_buf(g, n.in1, b);
            i64 gcnt = n.a0, m = n.a1, k = n.a2, nn = n.a3;
            i64 astride = a.rank() == 3 ? a.dim(1) * a.dim(2) : 0;
            i64 bstride = b.rank() == 3 ? b.dim(1) * b.dim(2) : 0;
            for (i64 gi = 0; gi < gcnt; ++gi) {
                const real* gp = gy.data() + gi * m * nn;
                const real* ap = a.data() + gi * astride;
                const real* bp = b.data() + gi * bstride;
                real* gap = ga.data() + gi * astride;
                real* gbp = gb.data() + gi * bstride;
                if (!n.f0)
                    kernels::gemm(gap, gp, bp, m, nn, k, false, !n.f1, true);
                else
                    kernels::gemm(gap, bp, gp, k, nn, m, n.f1, true, true);
                if (!n.f1)
                    kernels::gemm(gbp, ap, gp, k, m, nn, !n.f0, false, true);
                else
                    kernels::gemm(gbp, gp, ap, nn, m, k, true, n.f0, true);
            }
            break;
        }
        case Op::GatherRows: {
            Tensor& gx = grad_buf(g, n.in0, iv(n, 0));
            i64 d = iv(n, 0).dim(1);
            for (size_t r = 0; r < n.idx.size(); ++r)
                for (i64 j = 0; j < d; ++j)
                    gx.v[n.idx[r] * d + j] += gy.v[static_cast<i64>(r) * d + j];
            break;
        }
        case Op::SliceRows: {
            Tensor& gx = grad_buf(g, n.in0, iv(n, 0));
            i64 d = iv(n, 0).dim(1);
            for (i64 i = 0; i < n.a1 * d; ++i) gx.v[n.a0 * d + i] += gy.v[i];
            break;
        }
        case Op::ConcatCols: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            Tensor& gb = grad_buf(g, n.in1, iv(n, 1));
            i64 rows = iv(n, 0).dim(0), n1 = iv(n, 0).dim(1), n2 = iv(n, 1).dim(1);
            for (i64 r = 0; r < rows; ++r) {
                for (i64 j = 0; j < n1; ++j) ga.v[r * n1 + j] += gy.v[r * (n1 + n2) + j];
                for (i64 j = 0; j < n2; ++j) gb.v[r * n2 + j] += gy.v[r * (n1 + n2) + n1 + j];
            }
            break;
        }
        case Op::AddRow: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            Tensor& gr = grad_buf(g, n.in1, iv(n, 1));
            i64 rows = iv(n, 0).rows(), c = iv(n, 0).cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) {
                    ga.v[i * c + j] += gy.v[i * c + j];
                    gr.v[j] += gy.v[i * c + j];
                }
            break;
        }
        case Op::MulRow: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            Tensor& gr = grad_buf(g, n.in1, iv(n, 1));
            const Tensor& a = iv(n, 0);
            const Tensor& r = iv(n, 1);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) {
                    ga.v[i * c + j] += gy.v[i * c + j] * r.v[j];
                    gr.v[j] += gy.v[i * c + j] * a.v[i * c + j];
                }
            break;
        }
        case Op::SplitHeads: {
            Tensor& gx = grad_buf(g, n.in0, iv(n, 0));
            i64 b = n.a0, l = n.a1, h = n.a2, d = iv(n, 0).dim(1), dh = d / h;
            for (i64 bi = 0; bi < b; ++bi)
                for (i64 hi = 0; hi < h; ++hi)
                    for (i64 li = 0; li < l; ++li)
                        for (i64 j = 0; j < dh; ++j)
                            gx.v[(bi * l + li) * d + hi * dh + j] +=
                                gy.v[((bi * h + hi) * l + li) * dh + j];
            break;
        }
        case Op::MergeHeads: {
            Tensor& gx = grad_buf(g, n.in0, iv(n, 0));
            i64 b = n.a0, l = n.a1, h = n.a2, dh = iv(n, 0).dim(2), d = dh * h;
            for (i64 bi = 0; bi < b; ++bi)
                for (i64 hi = 0; hi < h; ++hi)
                    for (i64 li = 0; li < l; ++li)
                        for (i64 j = 0; j < dh; ++j)
                            gx.v[((bi * h + hi) * l + li) * dh + j] +=
                                gy.v[(bi * l + li) * d + hi * dh + j];
            break;
        }
        case Op::RowSums: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            i64 rows = iv(n, 0).rows(), c = iv(n, 0).cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) ga.v[i * c + j] += gy.v[i];
            break;
        }
        case Op::SubCol: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            Tensor& gc = grad_buf(g, n.in1, iv(n, 1));
            i64 rows = iv(n, 0).rows(), c = iv(n, 0).cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) {
                    ga.v[i * c + j] += gy.v[i * c + j];
                    gc.v[i] -= gy.v[i * c + j];
                }
            break;
        }
        case Op::MulCol: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            Tensor& gc = grad_buf(g, n.in1, iv(n, 1));
            const Tensor& a = iv(n, 0);
            const Tensor& cc = iv(n, 1);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i)
                for (i64 j = 0; j < c; ++j) {
                    ga.v[i * c + j] += gy.v[i * c + j] * cc.v[i];
                    gc.v[i] += gy.v[i * c + j] * a.v[i * c + j];
                }
            break;
        }
        case Op::GatherCols: {
            Tensor& gx = grad_buf(g, n.in0, iv(n, 0));
            i64 c = iv(n, 0).cols();
            for (i64 i = 0; i < iv(n, 0).rows(); ++i)
                gx.v[i * c + n.idx[static_cast<size_t>(i)]] += gy.v[i];
            break;
        }
        case Op::SoftmaxRows: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            i64 rows = n.val.rows(), c = n.val.cols();
            for (i64 i = 0; i < rows; ++i) {
                const real* s = n.val.data() + i * c;
                const real* gp = gy.data() + i * c;
                real inner = 0;
                for (i64 j = 0; j < c; ++j) inner += gp[j] * s[j];
                for (i64 j = 0; j < c; ++j) ga.v[i * c + j] += s[j] * (gp[j] - inner);
            }
            break;
        }
        case Op::LogSumExpRows: {
            Tensor& ga = grad_buf(g, n.in0, iv(n, 0));
            const Tensor& a = iv(n, 0);
            i64 rows = a.rows(), c = a.cols();
            for (i64 i = 0; i < rows; ++i) {
                const real* xp = a.data() + i * c;
                real lse = n.val.v[i];
                for (i64 j = 0; j < c; ++j) ga.v[i * c + j] += gy.v[i] * std::exp(xp[j] - lse);
            }
            break;
        }
        case Op::SumAll: {
            axpy(grad_buf(g, n.in0, iv(n, 0)), Tensor::full(iv(n, 0).shape, gy.v[0]));
            break;
        }
    }
}

// ---- forward-mode emission ----------------------------------------------

inline void Tape::maybe_emit_tangent(Var v) {
    Node& n = nodes[static_cast<size_t>(v.id)];
    std::int32_t t0 = n.in0 >= 0 ? nodes[static_cast<size_t>(n.in0)].tangent : -1;
    std::int32_t t1 = n.in1 >= 0 ? nodes[static_cast<size_t>(n.in1)].tangent : -1;
    if (t0 < 0 && t1 < 0) return;

    emitting_ = true;
    Var a{this, n.in0}, b{this, n.in1};
    Var ta{this, t0}, tb{this, t1};
    Var out{this, -1};
    const Op op = n.op;
    const double c = n.c;
    const i64 a0 = n.a0, a1 = n.a1, a2 = n.a2;
    const bool f0 = n.f0, f1 = n.f1;
    const std::vector<i64> idx = n.idx;

    switch (op) {
        case Op::Add:
            out = (t0 >= 0 && t1 >= 0) ? add(ta, tb) : (t0 >= 0 ? ta : tb);
            break;
        case Op::Sub:
            out = (t0 >= 0 && t1 >= 0) ? sub(ta, tb) : (t0 >= 0 ? ta : scale(tb, -1.0));
            break;
        case Op::Mul: {
            Var acc{this, -1};
            if (t0 >= 0) acc = mul(ta, b);
            if (t1 >= 0) {
                Var term = mul(a, tb);
                acc = acc.ok() ? add(acc, term) : term;
            }
            out = acc;
            break;
        }
        case Op::Scale:
            out = scale(ta, c);
            break;
        case Op::AddScalar:
            out = ta;
            break;
        case Op::Tanh: {
            Var one_minus = add_scalar(scale(mul(v, v), -1.0), 1.0);
            out = mul(ta, one_minus);
            break;
        }
        case Op::Gelu: {
            const double c1 = 0.7978845608028653558798921198687637;
            const double c2 = 0.044715;
            Var xx = mul(a, a);
            Var u = scale(add(a, scale(mul(xx, a), c2)), c1);
            Var th = tanh(u);
            Var sech2 = add_scalar(scale(mul(th, th), -1.0), 1.0);
            Var du = scale(add_scalar(scale(xx, 3.0 * c2), 1.0), c1);
            Var gp = add(scale(add_scalar(th, 1.0), 0.5), scale(mul(mul(a, sech2), du), 0.5));
            out = mul(ta, gp);
            break;
        }
        case Op::Sin:
            out = mul(ta, cos(a));
            break;
        case Op::Cos:
            out = mul(ta, scale(sin(a), -1.0));
            break;
        case Op::Sqrt:
            out = mul(ta, scale(recip(v), 0.5));
            break;
        case Op::Recip:
            out = scale(mul(ta, mul(v, v)), -1.0);
            break;
        case Op::Bmm: {
            Var acc{this, -1};
            if (t0 >= 0) acc = bmm(ta, b, f0, f1);
            if (t1 >= 0) {
                Var term = bmm(a, tb, f0, f1);
                acc = acc.ok() ? add(acc, term) : term;
            }
            out = acc;
            break;
        }
        case Op::GatherRows:
            out = gather_rows(ta, idx);
            break;
        case Op::SliceRows:
            out = slice_rows(ta, a0, a1);
            break;
        case Op::ConcatCols: {
            Var left = t0 >= 0 ? ta : constant(Tensor::zeros(a.val().shape));
            Var right = t1 >= 0 ? tb : constant(Tensor::zeros(b.val().shape));
            out = concat_cols(left, right);
            break;
        }
        case Op::AddRow: {
            if (t0 >= 0 && t1 >= 0)
                out = add_row(ta, tb);
            else if (t0 >= 0)
                out = ta;
            else
                out = add_row(constant(Tensor::zeros(a.val().shape)), tb);
            break;
        }
        case Op::MulRow: {
            Var acc{this, -1};
            if (t0 >= 0) acc = mul_row(ta, b);
            if (t1 >= 0) {
                Var term = mul_row(a, tb);
                acc = acc.ok() ? add(acc, term) : term;
            }
            out = acc;
            break;
        }
        case Op::SplitHeads:
            out = split_heads(ta, a0, a1, a2);
            break;
        case Op::MergeHeads:
            out = merge_heads(ta, a0, a1, a2);
            break;
        case Op::RowSums:
            out = row_sums(ta);
            break;
        case Op::SubCol: {
            if (t0 >= 0 && t1 >= 0)
                out = sub_col(ta, tb);
            else if (t0 >= 0)
                out = ta;
            else
                out = sub_col(constant(Tensor::zeros(a.val().shape)), tb);
            break;
        }
        case Op::MulCol: {
            Var acc{this, -1};
            if (t0 >= 0) acc = mul_col(ta, b);
            if (t1 >= 0) {
                Var term = mul_col(a, tb);
                acc = acc.ok() ? add(acc, term) : term;
            }
            out = acc;
            break;
        }
        case Op::GatherCols:
            out = gather_cols(ta, idx);
            break;
        case Op::SoftmaxRows: {
            Var inner = row_sums(mul(ta, v));
            out = mul(v, sub_col(ta, inner));
            break;
        }
        case Op::LogSumExpRows: {
            Var sm = softmax_rows(a);
            out = row_sums(mul(sm, ta));
            break;
        }
        case Op::SumAll:
            out = sum_all(ta);
            break;
        default:
            break;
    }
    emitting_ = false;
    if (out.ok()) nodes[static_cast<size_t>(v.id)].tangent = out.id;
}

// Scoped forward-mode region: ops recorded while alive propagate tangents.
struct JvpScope {
    Tape& tape;
    bool prev;
    explicit JvpScope(Tape& t) : tape(t), prev(t.jvp_mode) { tape.jvp_mode = true; }
    ~JvpScope() { tape.jvp_mode = prev; }
};

// Directional derivative of a traced function. Seeds are (input, tangent)
// pairs; the tangent enters as a constant so no gradient flows into it.
// Returns (primal output, JVP output); both live on the tape.
template <class F>
inline std::pair<Var, Var> jvp(Tape& tape, F&& f, const std::vector<std::pair<Var, Tensor>>& seeds) {
    JvpScope scope(tape);
    for (const auto& [x, tg] : seeds) tape.seed_tangent(x, tape.constant(tg));
    Var y = f();
    return {y, tape.tangent_or_zero(y)};
}

// Gradient map per the module contract: parameters that never touched the
// tape get zero gradients of matching shape.
inline std::unordered_map<const Parameter*, Tensor> grad(Tape& tape, Var loss,
                                                         const std::vector<Parameter*>& params) {
    auto g = tape.backward(loss);
    std::unordered_map<const Parameter*, Tensor> out;
    for (Parameter* p : params) out[p] = Tensor::zeros(p->value.shape);
    for (auto& [nid, p] : tape.bindings) {
        auto it = out.find(p);
        if (it == out.end()) continue;
        Tensor& gt = g[static_cast<size_t>(nid)];
        if (!gt.v.empty())
            for (i64 i = 0; i < gt.size(); ++i) it->second.v[static_cast<size_t>(i)] += gt.v[static_cast<size_t>(i)];
    }
    return out;
}

}  // namespace fave
