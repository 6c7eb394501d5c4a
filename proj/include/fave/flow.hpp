#pragma once

#include <optional>
#include <span>

#include "fave/model.hpp"

namespace fave {

// Flow prior: Gaussian in stage 1, masked history embedding in stage 2.
struct PriorSpec {
    enum class Kind { Gaussian, SemanticAnchor };
    Kind kind = Kind::Gaussian;
    double rho = 0.75;  // retention rate; ignored by the Gaussian kind

    static PriorSpec gaussian() { return {Kind::Gaussian, 0.0}; }
    static PriorSpec anchor(double rho) { return {Kind::SemanticAnchor, rho}; }
};

// One training instance of the flow: prior state, target embedding,
// sampled times, and the interpolated state x_t = (1-t) x0 + t x1.
struct FlowSample {
    Tensor x0;
    Tensor x1;
    double t = 0;
    double r = 1;
    Tensor xt;
    i64 target_item = -1;
};

inline Tensor gaussian_prior(i64 dim, Rng& rng) {
    Tensor x({dim});
    for (auto& v : x.v) v = static_cast<real>(rng.normal());
    return x;
}

// x0 = m (.) e_k with k uniform over the (truncated) prefix and a fresh
// Bernoulli(rho) mask per call. Inference uses this same routine.
inline Tensor semantic_anchor_prior(std::span<const i64> prefix, double rho,
                                    const Tensor& emb_table, Rng& rng) {
    if (prefix.empty()) throw DataError("semantic anchor prior needs a non-empty history");
    i64 d = emb_table.dim(1);
    i64 k = prefix[static_cast<size_t>(rng.below(prefix.size()))];
    Tensor x0({d});
    const real* row = emb_table.data() + k * d;
    for (i64 j = 0; j < d; ++j)
        x0.v[static_cast<size_t>(j)] = rng.bernoulli(rho) ? row[j] : real(0);
    return x0;
}

// Interpolation time. The logit-normal law concentrates draws around the
// mid-trajectory region; the uniform law covers sub-interval construction.
inline double sample_time(Rng& rng, TimeLaw law = TimeLaw::LogitNormal) {
    if (law == TimeLaw::Uniform) return rng.uniform_open();
    double z = rng.normal();
    return 1.0 / (1.0 + std::exp(-z));
}

// r = 1 with probability p_end, otherwise uniform on (t, 1].
inline double sample_interval(double t, double p_end, Rng& rng) {
    if (t < 0 || t >= 1) throw Error("sample_interval: t must lie in [0,1)");
    if (p_end < 0 || p_end > 1) throw Error("sample_interval: p_end must lie in [0,1]");
    if (rng.uniform() < p_end) return 1.0;
    return t + (1.0 - t) * rng.uniform_open_closed();
}

// x_t = (1-t) x0 + t x1. Endpoints return the operand bitwise.
inline Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
    if (!x0.same_shape(x1)) throw ShapeError("interpolate: " + x0.shape_str() + " vs " + x1.shape_str());
    if (t < 0 || t > 1) throw Error("interpolate: t outside [0,1]");
    if (t == 0) return x0;
    if (t == 1) return x1;
    Tensor xt(x0.shape);
    real w0 = static_cast<real>(1 - t), w1 = static_cast<real>(t);
    for (i64 i = 0; i < xt.size(); ++i)
        xt.v[static_cast<size_t>(i)] = w0 * x0.v[static_cast<size_t>(i)] + w1 * x1.v[static_cast<size_t>(i)];
    return xt;
}

// Tape-level row-wise interpolation: x0, x1 are [B,d], t_col is [B,1].
inline Var interpolate_rows(Var x0, Var x1, Var t_col) {
    Var one_minus = add_scalar(scale(t_col, -1.0), 1.0);
    return add(mul_col(x0, one_minus), mul_col(x1, t_col));
}

// Draw one stage-appropriate training instance. Stage 1: Gaussian prior,
// heavy-tailed t, horizon pinned at r = 1. Stage 2: semantic anchor over
// the (truncated) seen prefix and a sampled sub-interval (t, r].
inline FlowSample draw_flow_sample(int stage, std::span<const i64> anchor_window, i64 target,
                                   const Tensor& emb_table, const TrainConfig& cfg, Rng& rng) {
    FlowSample s;
    s.target_item = target;
    i64 d = emb_table.dim(1);
    if (stage == 1) {
        s.x0 = gaussian_prior(d, rng);
        s.t = sample_time(rng, cfg.time_law(1));
        s.r = 1.0;
    } else {
        s.x0 = semantic_anchor_prior(anchor_window, cfg.rho, emb_table, rng);
        s.t = sample_time(rng, cfg.time_law(2));
        s.r = sample_interval(s.t, cfg.p_end, rng);
    }
    s.x1 = Tensor({d});
    std::copy_n(emb_table.data() + target * d, d, s.x1.data());
    s.xt = interpolate(s.x0, s.x1, s.t);
    return s;
}

// ---- losses ---------------------------------------------------------------
// All batch reductions are means over rows of squared Euclidean distances.

// || f(x_t, t, 1) - x1 ||^2, the stage-1 recovery objective.
inline Var loss_rec(Var f_out, Var x1) {
    detail::need_same_shape(f_out.val(), x1.val(), "loss_rec");
    return mean_row_sumsq(sub(f_out, x1));
}

// Same distance under interval sampling; kept separate because call sites
// differ in how (t, r) were drawn.
inline Var loss_match(Var f_out, Var x1) {
    detail::need_same_shape(f_out.val(), x1.val(), "loss_match");
    return mean_row_sumsq(sub(f_out, x1));
}

// Cross entropy of the target item under inner-product scores over the
// full catalog.
inline Var loss_tgt(Var item_logits, const std::vector<i64>& targets) {
    if (static_cast<i64>(targets.size()) != item_logits.val().rows())
        throw ShapeError("loss_tgt: one target per row required");
    Var ce = ce_rows(item_logits, targets);
    return scale(sum_all(ce), 1.0 / static_cast<double>(targets.size()));
}

// || D(E_n) - A_u ||^2 in interaction space.
inline Var loss_src(Var decoded, Var interactions) {
    detail::need_same_shape(decoded.val(), interactions.val(), "loss_src");
    return mean_row_sumsq(sub(decoded, interactions));
}

// Squared norm of the JVP output, mean over the batch.
inline Var loss_cons(Var jvp_out) { return mean_row_sumsq(jvp_out); }

struct LossBreakdown {
    double rec = 0, tgt = 0, src = 0, match = 0, cons = 0, total = 0;
    double alpha = 0, beta = 0, gamma = 0;
};

struct StageLossVars {
    std::optional<Var> rec, tgt, src, match, cons;
};

// Stage 1: rec + alpha tgt + beta src. Stage 2: match + gamma cons +
// alpha tgt + beta src.
inline Var total_loss(int stage, const StageLossVars& parts, double alpha, double beta,
                      double gamma, LossBreakdown* breakdown = nullptr) {
    auto need = [&](const std::optional<Var>& v, const char* name) {
        if (!v.has_value()) throw Error(std::string("total_loss: stage ") +
                                        std::to_string(stage) + " missing component " + name);
        return *v;
    };
    Var total{nullptr, -1};
    if (stage == 1) {
        Var rec = need(parts.rec, "rec");
        Var tgt = need(parts.tgt, "tgt");
        Var src = need(parts.src, "src");
        total = add(rec, add(scale(tgt, alpha), scale(src, beta)));
        if (breakdown) {
            breakdown->rec = rec.val().v[0];
            breakdown->tgt = tgt.val().v[0];
            breakdown->src = src.val().v[0];
        }
    } else if (stage == 2) {
        Var match = need(parts.match, "match");
        Var cons = need(parts.cons, "cons");
        Var tgt = need(parts.tgt, "tgt");
        Var src = need(parts.src, "src");
        total = add(add(match, scale(cons, gamma)), add(scale(tgt, alpha), scale(src, beta)));
        if (breakdown) {
            breakdown->match = match.val().v[0];
            breakdown->cons = cons.val().v[0];
            breakdown->tgt = tgt.val().v[0];
            breakdown->src = src.val().v[0];
        }
    } else {
        throw Error("total_loss: stage must be 1 or 2");
    }
    if (breakdown) {
        breakdown->alpha = alpha;
        breakdown->beta = beta;
        breakdown->gamma = gamma;
        breakdown->total = total.val().v[0];
    }
    return total;
}

// Consistency penalty for one conditioned batch: runs the forward in jvp
// mode with tangent [v_bar, 1, 0] over (x_t, t, r) and returns both the
// primal forward and the loss term. The x_t tangent is supplied by the
// caller: a constant node for the detached default, or a recorded
// expression when gradients should flow into the tangent as well.
struct ConsForward {
    ForwardOut fwd;
    Var jvp_out;
    Var cons;
};

inline ConsForward consistency_forward(const FaveModel& model, const BoundModel& bm,
                                       const Batch& batch, Var x_t, Var t_col, Var r_col,
                                       Var lambda, Var xt_tangent) {
    Tape& tape = *bm.tape;
    JvpScope scope(tape);
    i64 B = batch.size();
    tape.seed_tangent(x_t, xt_tangent);
    tape.seed_tangent(t_col, tape.constant(Tensor::full({B, 1}, 1)));
    // r carries a structural zero tangent: dr/dt = 0.
    ForwardOut fwd = model.forward(bm, batch, x_t, t_col, r_col, lambda);
    Var jvp_out = tape.tangent_or_zero(fwd.f_out);
    return {fwd, jvp_out, loss_cons(jvp_out)};
}

}  // namespace fave
