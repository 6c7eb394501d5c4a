#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "fave/config.hpp"
#include "fave/data.hpp"
#include "fave/rng.hpp"
#include "fave/tape.hpp"

namespace fave {

// Layer-wise stochastic input modulation: lambda ~ N(delta, delta) per
// coordinate during training, frozen to its mean delta at evaluation.
struct ModulationSampler {
    double delta = 1.0;

    Tensor sample(i64 rows, i64 dim, Rng& rng) const {
        Tensor lam({rows, dim});
        double sd = std::sqrt(delta);
        for (auto& x : lam.v) x = static_cast<real>(rng.normal(delta, sd));
        return lam;
    }

    Tensor eval_mean(i64 rows, i64 dim) const {
        return Tensor::full({rows, dim}, static_cast<real>(delta));
    }
};

// E = e_s + lambda (.) (x_t + tau), elementwise.
inline Var assemble_input(Var e_s, Var x_t, Var tau, Var lambda) {
    return add(e_s, mul(lambda, add(x_t, tau)));
}

class FaveModel;

// Per-tape view of the model: parameter leaf nodes plus shared constants.
struct BoundModel {
    const FaveModel* model = nullptr;
    Tape* tape = nullptr;
    std::vector<Var> vars;  // parallel to FaveModel::params
    Var freqs;              // sinusoidal frequency row [1, F]

    Var operator[](const std::string& name) const;
};

struct ForwardOut {
    Var f_out;  // estimated target state, [B, d]
    Var e_n;    // pre-head hidden state, [B, d]
    Var e_s;    // sequence embedding at the latest position, [B, d]
};

// Item embeddings, dual-time embedder, sequence encoder, fusion trunk,
// output head, and history decoder.
class FaveModel {
  public:
    TrainConfig cfg;
    i64 num_items = 0;
    std::vector<Parameter> params;

    FaveModel() = default;

    FaveModel(const TrainConfig& config, i64 items, u64 init_seed) : cfg(config), num_items(items) {
        cfg.validate();
        Rng rng(init_seed);
        i64 d = cfg.hidden_dim, f = cfg.ffn_mult * d, tf = 2 * cfg.time_freqs;

        add_param("emb.table", normal({items + 1, d}, 0.1, rng));
        add_param("pos.table", normal({cfg.max_len, d}, 0.02, rng));
        for (i64 i = 0; i < cfg.blocks; ++i) {
            std::string p = "enc" + std::to_string(i);
            add_param(p + ".ln1.g", Tensor::full({d}, 1));
            add_param(p + ".ln1.b", Tensor::zeros({d}));
            add_param(p + ".attn.wq", normal({d, d}, 0.02, rng));
            add_param(p + ".attn.wk", normal({d, d}, 0.02, rng));
            add_param(p + ".attn.wv", normal({d, d}, 0.02, rng));
            add_param(p + ".attn.wo", normal({d, d}, 0.02, rng));
            add_param(p + ".ln2.g", Tensor::full({d}, 1));
            add_param(p + ".ln2.b", Tensor::zeros({d}));
            add_param(p + ".ffn.w1", normal({d, f}, 0.02, rng));
            add_param(p + ".ffn.b1", Tensor::zeros({f}));
            add_param(p + ".ffn.w2", normal({f, d}, 0.02, rng));
            add_param(p + ".ffn.b2", Tensor::zeros({d}));
        }
        add_param("enc.lnf.g", Tensor::full({d}, 1));
        add_param("enc.lnf.b", Tensor::zeros({d}));
        add_param("time.w1", normal({tf, d}, 0.02, rng));
        add_param("time.b1", Tensor::zeros({d}));
        add_param("time.w2", normal({d, d}, 0.02, rng));
        add_param("time.b2", Tensor::zeros({d}));
        for (i64 i = 0; i < cfg.post_blocks; ++i) {
            std::string p = "trunk" + std::to_string(i);
            add_param(p + ".ln.g", Tensor::full({d}, 1));
            add_param(p + ".ln.b", Tensor::zeros({d}));
            add_param(p + ".w1", normal({d, f}, 0.02, rng));
            add_param(p + ".b1", Tensor::zeros({f}));
            add_param(p + ".w2", normal({f, d}, 0.02, rng));
            add_param(p + ".b2", Tensor::zeros({d}));
        }
        add_param("head.w", normal({d, d}, 0.02, rng));
        add_param("head.b", Tensor::zeros({d}));
        add_param("dec.w1", normal({d, d}, 0.02, rng));
        add_param("dec.b1", Tensor::zeros({d}));
        add_param("dec.w2", normal({d, d}, 0.02, rng));
        add_param("dec.b2", Tensor::zeros({d}));
        add_param("dec.w3", normal({d, items}, 0.02, rng));
        add_param("dec.b3", Tensor::zeros({items}));

        // log-spaced frequencies in [1, 1e4] feeding the time embedder
        freqs_ = Tensor({1, cfg.time_freqs});
        for (i64 i = 0; i < cfg.time_freqs; ++i) {
            double expo = cfg.time_freqs > 1
                              ? static_cast<double>(i) / static_cast<double>(cfg.time_freqs - 1)
                              : 0.0;
            freqs_.v[static_cast<size_t>(i)] = static_cast<real>(std::pow(10.0, 4.0 * expo));
        }
    }

    i64 pad_id() const { return num_items; }

    Parameter& p(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter " + name);
        return params[it->second];
    }
    const Parameter& p(const std::string& name) const {
        return const_cast<FaveModel*>(this)->p(name);
    }

    std::vector<Parameter*> param_ptrs() {
        std::vector<Parameter*> out;
        for (auto& pp : params) out.push_back(&pp);
        return out;
    }

    void freeze_embeddings() { p("emb.table").trainable = false; }
    bool embeddings_frozen() const { return !p("emb.table").trainable; }

    Tensor embedding_row(i64 item) const {
        const Tensor& table = p("emb.table").value;
        Tensor row({cfg.hidden_dim});
        std::copy_n(table.data() + item * cfg.hidden_dim, cfg.hidden_dim, row.data());
        return row;
    }

    BoundModel bind(Tape& tape) const {
        BoundModel bm;
        bm.model = this;
        bm.tape = &tape;
        bm.vars.reserve(params.size());
        for (const auto& pp : params) bm.vars.push_back(tape.param(const_cast<Parameter&>(pp)));
        bm.freqs = tape.constant(freqs_);
        return bm;
    }

    // tau = TimeEmb(t) + TimeEmb(r - t); both arguments are [B,1] columns.
    Var time_feature(const BoundModel& bm, Var t_col, Var r_col) const {
        const Tensor& tv = t_col.val();
        const Tensor& rv = r_col.val();
        for (i64 i = 0; i < tv.size(); ++i) {
            double t = tv.v[static_cast<size_t>(i)], r = rv.v[static_cast<size_t>(i)];
            if (r < t) throw Error("time_feature: r < t");
            if (t < 0 || r > 1) throw Error("time_feature: times must lie in [0,1]");
        }
        return add(time_embed(bm, t_col), time_embed(bm, sub(r_col, t_col)));
    }

    // Sinusoidal featurization of a scalar column followed by a two-layer MLP.
    Var time_embed(const BoundModel& bm, Var s_col) const {
        Var ang = matmul(s_col, bm.freqs);
        Var feats = concat_cols(sin(ang), cos(ang));
        Var h = gelu(add_row(matmul(feats, bm["time.w1"]), bm["time.b1"]));
        return add_row(matmul(h, bm["time.w2"]), bm["time.b2"]);
    }

    // Causal + padding additive mask, one [L,L] block per (batch, head).
    Tensor attention_mask(const Batch& batch) const {
        i64 B = batch.size(), L = batch.max_len, H = cfg.heads;
        Tensor mask({B * H, L, L});
        for (i64 b = 0; b < B; ++b)
            for (i64 i = 0; i < L; ++i)
                for (i64 j = 0; j < L; ++j) {
                    real blocked = (j > i || batch.mask.at(b, j) == 0) ? real(-1e9) : real(0);
                    for (i64 h = 0; h < H; ++h)
                        mask.v[static_cast<size_t>(((b * H + h) * L + i) * L + j)] = blocked;
                }
        return mask;
    }

    // Sequence embedding: causal self-attention stack read at the most
    // recent position.
    Var encode_sequence(const BoundModel& bm, const Batch& batch) const {
        Tape& tape = *bm.tape;
        i64 B = batch.size(), L = batch.max_len, H = cfg.heads, d = cfg.hidden_dim;
        i64 dh = d / H;

        std::vector<i64> flat(batch.seq.begin(), batch.seq.end());
        std::vector<i64> pos(static_cast<size_t>(B * L));
        for (i64 b = 0; b < B; ++b)
            for (i64 j = 0; j < L; ++j) pos[static_cast<size_t>(b * L + j)] = j;

        Var x = add(gather_rows(bm["emb.table"], flat), gather_rows(bm["pos.table"], pos));
        Var maskc = tape.constant(attention_mask(batch));

        for (i64 i = 0; i < cfg.blocks; ++i) {
            std::string pfx = "enc" + std::to_string(i);
            Var u = add_row(mul_row(layer_norm(x), bm[pfx + ".ln1.g"]), bm[pfx + ".ln1.b"]);
            Var qh = split_heads(matmul(u, bm[pfx + ".attn.wq"]), B, L, H);
            Var kh = split_heads(matmul(u, bm[pfx + ".attn.wk"]), B, L, H);
            Var vh = split_heads(matmul(u, bm[pfx + ".attn.wv"]), B, L, H);
            Var scores = scale(bmm(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
            Var probs = softmax_rows(add(scores, maskc));
            Var ctx = merge_heads(bmm(probs, vh), B, L, H);
            x = add(x, matmul(ctx, bm[pfx + ".attn.wo"]));

            Var u2 = add_row(mul_row(layer_norm(x), bm[pfx + ".ln2.g"]), bm[pfx + ".ln2.b"]);
            Var h = gelu(add_row(matmul(u2, bm[pfx + ".ffn.w1"]), bm[pfx + ".ffn.b1"]));
            x = add(x, add_row(matmul(h, bm[pfx + ".ffn.w2"]), bm[pfx + ".ffn.b2"]));
        }
        x = add_row(mul_row(layer_norm(x), bm["enc.lnf.g"]), bm["enc.lnf.b"]);

        std::vector<i64> last(static_cast<size_t>(B));
        for (i64 b = 0; b < B; ++b) last[static_cast<size_t>(b)] = b * L + (L - 1);
        return gather_rows(x, last);
    }

    Var trunk_block(const BoundModel& bm, i64 i, Var e) const {
        std::string pfx = "trunk" + std::to_string(i);
        Var u = add_row(mul_row(layer_norm(e), bm[pfx + ".ln.g"]), bm[pfx + ".ln.b"]);
        Var h = gelu(add_row(matmul(u, bm[pfx + ".w1"]), bm[pfx + ".b1"]));
        return add(e, add_row(matmul(h, bm[pfx + ".w2"]), bm[pfx + ".b2"]));
    }

    // Full conditional forward. x_t: [B,d]; t,r: [B,1]; lambda: [B,d].
    ForwardOut forward(const BoundModel& bm, const Batch& batch, Var x_t, Var t_col, Var r_col,
                       Var lambda) const {
        i64 B = batch.size(), d = cfg.hidden_dim;
        if (x_t.val().shape != std::vector<i64>{B, d})
            throw ShapeError("forward: x_t must be [B,d], got " + x_t.val().shape_str());
        Var e_s = encode_sequence(bm, batch);
        Var tau = time_feature(bm, t_col, r_col);
        Var e = assemble_input(e_s, x_t, tau, lambda);
        for (i64 i = 0; i < cfg.post_blocks; ++i) e = trunk_block(bm, i, e);
        Var f_out = add_row(matmul(e, bm["head.w"]), bm["head.b"]);
        f_out.val().check_finite("forward activation");
        return {f_out, e, e_s};
    }

    // History reconstruction logits over the catalog.
    Var decode_history(const BoundModel& bm, Var e_n) const {
        Var h1 = tanh(add_row(matmul(e_n, bm["dec.w1"]), bm["dec.b1"]));
        Var h2 = tanh(add_row(matmul(h1, bm["dec.w2"]), bm["dec.b2"]));
        return add_row(matmul(h2, bm["dec.w3"]), bm["dec.b3"]);
    }

    // Inner products against every real item (padding row excluded).
    Var item_logits(const BoundModel& bm, Var f_out) const {
        return bmm(f_out, slice_rows(bm["emb.table"], 0, num_items), false, true);
    }

    const Tensor& freq_table() const { return freqs_; }

  private:
    std::unordered_map<std::string, size_t> index_;
    Tensor freqs_;

    void add_param(const std::string& name, Tensor value) {
        index_[name] = params.size();
        params.emplace_back(name, std::move(value));
    }

    static Tensor normal(std::vector<i64> shape, double sd, Rng& rng) {
        Tensor t(std::move(shape));
        for (auto& x : t.v) x = static_cast<real>(rng.normal(0.0, sd));
        return t;
    }
};

inline Var BoundModel::operator[](const std::string& name) const {
    const Parameter& target = model->p(name);
    return vars[static_cast<size_t>(&target - model->params.data())];
}

}  // namespace fave
