#pragma once

#include <bit>
#include <iostream>
#include <numeric>

#include "fave/checkpoint.hpp"
#include "fave/eval.hpp"

namespace fave {

// Adam with bias correction. Moments are keyed by parameter name so they
// serialize into checkpoints; frozen parameters never get moment slots.
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    i64 steps = 0;
    std::unordered_map<std::string, Tensor> m, v;

    void apply(FaveModel& model, const std::unordered_map<std::string, Tensor>& grads, double lr) {
        ++steps;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
        for (auto& p : model.params) {
            if (!p.trainable) continue;
            auto git = grads.find(p.name);
            if (git == grads.end()) continue;
            const Tensor& g = git->second;
            Tensor& mm = m.try_emplace(p.name, Tensor::zeros(p.value.shape)).first->second;
            Tensor& vv = v.try_emplace(p.name, Tensor::zeros(p.value.shape)).first->second;
            for (i64 i = 0; i < g.size(); ++i) {
                size_t k = static_cast<size_t>(i);
                mm.v[k] = static_cast<real>(beta1 * mm.v[k] + (1 - beta1) * g.v[k]);
                vv.v[k] = static_cast<real>(beta2 * vv.v[k] + (1 - beta2) * g.v[k] * g.v[k]);
                double mhat = mm.v[k] / bc1;
                double vhat = vv.v[k] / bc2;
                p.value.v[k] -= static_cast<real>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

// Scale gradients so the global norm over trainable parameters stays
// under `max_norm`.
inline void clip_gradients(const FaveModel& model, std::unordered_map<std::string, Tensor>& grads,
                           double max_norm) {
    double sq = 0;
    for (const auto& p : model.params) {
        if (!p.trainable) continue;
        auto it = grads.find(p.name);
        if (it != grads.end()) sq += static_cast<double>(sum_sq(it->second));
    }
    double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0) return;
    real s = static_cast<real>(max_norm / norm);
    for (auto& [name, g] : grads)
        for (auto& x : g.v) x *= s;
}

// ---- checkpoint conversion ------------------------------------------------

inline Tensor rng_blob(const Rng& rng) {
    Tensor t({4});
    auto st = rng.state();
    for (int i = 0; i < 4; ++i) t.v[static_cast<size_t>(i)] = std::bit_cast<double>(st[static_cast<size_t>(i)]);
    return t;
}

inline Rng rng_from_blob(const Tensor& t) {
    Rng rng(0);
    std::array<u64, 4> st{};
    for (int i = 0; i < 4; ++i) st[static_cast<size_t>(i)] = std::bit_cast<u64>(static_cast<double>(t.v[static_cast<size_t>(i)]));
    rng.set_state(st);
    return rng;
}

inline Checkpoint make_checkpoint(const FaveModel& model, const Adam& adam, const Rng& rng,
                                  int stage, const TrainConfig& cfg) {
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.stage = stage;
    for (const auto& p : model.params) ckpt.put(p.name, p.value);
    for (const auto& [name, t] : adam.m) ckpt.put("__adam.m." + name, t);
    for (const auto& [name, t] : adam.v) ckpt.put("__adam.v." + name, t);
    ckpt.put("__adam.steps", Tensor({1}, {static_cast<real>(adam.steps)}));
    ckpt.put("__rng", rng_blob(rng));
    ckpt.put("__frozen.emb", Tensor({1}, {model.embeddings_frozen() ? real(1) : real(0)}));
    return ckpt;
}

inline FaveModel model_from_checkpoint(const Checkpoint& ckpt) {
    const Tensor& emb = ckpt.get("emb.table");
    i64 items = emb.dim(0) - 1;
    FaveModel model(ckpt.config, items, ckpt.config.seed);
    for (auto& p : model.params) {
        const Tensor& blob = ckpt.get(p.name);
        if (blob.shape != p.value.shape)
            throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                                  "blob shape mismatch for " + p.name);
        p.value = blob;
    }
    if (const Tensor* fz = ckpt.find("__frozen.emb"); fz && fz->v[0] != 0)
        model.freeze_embeddings();
    return model;
}

inline Adam adam_from_checkpoint(const Checkpoint& ckpt) {
    Adam adam;
    if (const Tensor* s = ckpt.find("__adam.steps")) adam.steps = static_cast<i64>(s->v[0]);
    for (const auto& [name, t] : ckpt.blobs) {
        if (name.rfind("__adam.m.", 0) == 0) adam.m[name.substr(9)] = t;
        else if (name.rfind("__adam.v.", 0) == 0) adam.v[name.substr(9)] = t;
    }
    return adam;
}

// ---- training loop --------------------------------------------------------

namespace detail_train {

struct StepOut {
    LossBreakdown losses;
};

// Stage-1 chunk: Gaussian prior, heavy-tailed t, horizon pinned at r = 1.
inline StepOut stage1_chunk(FaveModel& model, const SplitDataset& ds,
                            std::span<const TrainInstance> insts, Rng& rng,
                            const TrainConfig& cfg,
                            std::unordered_map<std::string, Tensor>& accum, double weight) {
    Batch chunk = make_train_batch(ds, insts, cfg.max_len);
    i64 B = chunk.size(), d = cfg.hidden_dim;
    const Tensor& emb = model.p("emb.table").value;

    Tensor x0({B, d});
    Tensor t_vals({B, 1});
    for (i64 b = 0; b < B; ++b) {
        FlowSample s = draw_flow_sample(1, {}, chunk.targets[static_cast<size_t>(b)], emb, cfg, rng);
        std::copy(s.x0.v.begin(), s.x0.v.end(), x0.v.begin() + b * d);
        t_vals.v[static_cast<size_t>(b)] = static_cast<real>(s.t);
    }
    ModulationSampler mod{cfg.delta};
    Tensor lam = mod.sample(B, d, rng);

    Tape tape;
    BoundModel bm = model.bind(tape);
    Var x0c = tape.input(x0);
    Var t_col = tape.input(t_vals);
    Var r_col = tape.input(Tensor::full({B, 1}, 1));  // r fixed to 1 in stage 1
    Var x1v = gather_rows(bm["emb.table"], chunk.targets);
    Var xt = interpolate_rows(x0c, x1v, t_col);
    Var lamv = tape.constant(lam);

    ForwardOut fwd = model.forward(bm, chunk, xt, t_col, r_col, lamv);
    StageLossVars parts;
    parts.rec = loss_rec(fwd.f_out, x1v);
    parts.tgt = loss_tgt(model.item_logits(bm, fwd.f_out), chunk.targets);
    parts.src = loss_src(model.decode_history(bm, fwd.e_n), tape.constant(chunk.interactions));

    StepOut out;
    Var total = total_loss(1, parts, cfg.alpha, cfg.beta, cfg.gamma, &out.losses);
    auto grads = tape.backward(total);
    for (auto& [nid, p] : tape.bindings) {
        Tensor& g = grads[static_cast<size_t>(nid)];
        if (g.v.empty()) continue;
        Tensor& acc = accum.try_emplace(p->name, Tensor::zeros(p->value.shape)).first->second;
        for (i64 i = 0; i < g.size(); ++i)
            acc.v[static_cast<size_t>(i)] += static_cast<real>(weight) * g.v[static_cast<size_t>(i)];
    }
    return out;
}

// Stage-2 chunk: semantic anchor prior, sub-interval (t, r), matching +
// JVP consistency losses on top of the dual-end alignment terms.
inline StepOut stage2_chunk(FaveModel& model, const SplitDataset& ds,
                            std::span<const TrainInstance> insts, Rng& rng,
                            const TrainConfig& cfg,
                            std::unordered_map<std::string, Tensor>& accum, double weight,
                            double* fd_rel_out = nullptr) {
    Batch chunk = make_train_batch(ds, insts, cfg.max_len);
    i64 B = chunk.size(), d = cfg.hidden_dim;
    const Tensor& emb = model.p("emb.table").value;

    Tensor x0({B, d});
    Tensor t_vals({B, 1}), r_vals({B, 1});
    for (i64 b = 0; b < B; ++b) {
        const auto& inst = insts[static_cast<size_t>(b)];
        auto prefix = ds.users[static_cast<size_t>(inst.user_index)].train_prefix();
        auto seen = prefix.subspan(0, static_cast<size_t>(inst.cut));
        i64 win = std::min<i64>(static_cast<i64>(seen.size()), cfg.max_len);
        FlowSample s = draw_flow_sample(2, seen.subspan(seen.size() - static_cast<size_t>(win)),
                                        chunk.targets[static_cast<size_t>(b)], emb, cfg, rng);
        if (s.r <= s.t) throw Error("stage 2 sampled r <= t");
        std::copy(s.x0.v.begin(), s.x0.v.end(), x0.v.begin() + b * d);
        t_vals.v[static_cast<size_t>(b)] = static_cast<real>(s.t);
        r_vals.v[static_cast<size_t>(b)] = static_cast<real>(s.r);
    }
    ModulationSampler mod{cfg.delta};
    Tensor lam = mod.sample(B, d, rng);

    Tape tape;
    BoundModel bm = model.bind(tape);
    Var x0c = tape.input(x0);
    Var t_col = tape.input(t_vals);
    Var r_col = tape.input(r_vals);
    Var x1v = gather_rows(bm["emb.table"], chunk.targets);
    Var xt = interpolate_rows(x0c, x1v, t_col);
    Var lamv = tape.constant(lam);

    Var tangent{&tape, -1};
    if (cfg.detach_tangent) {
        // Average-velocity estimate from a value-only pass, entering the
        // JVP as a constant.
        Tape scratch;
        BoundModel sbm = model.bind(scratch);
        ForwardOut probe = model.forward(sbm, chunk, scratch.input(xt.val()),
                                         scratch.input(t_vals), scratch.input(r_vals),
                                         scratch.constant(lam));
        Tensor vbar = probe.f_out.val();
        for (i64 i = 0; i < vbar.size(); ++i) vbar.v[static_cast<size_t>(i)] -= x0.v[static_cast<size_t>(i)];
        tangent = tape.constant(vbar);
    } else {
        ForwardOut probe = model.forward(bm, chunk, xt, t_col, r_col, lamv);
        tangent = sub(probe.f_out, x0c);
    }

    ConsForward cf = consistency_forward(model, bm, chunk, xt, t_col, r_col, lamv, tangent);

    if (fd_rel_out) {
        // Optional cross-check of the JVP against central differences.
        double eps = cfg.fd_eps;
        auto probe_at = [&](double sgn) {
            Tensor xs = xt.val();
            const Tensor& tg = tangent.val();
            for (i64 i = 0; i < xs.size(); ++i)
                xs.v[static_cast<size_t>(i)] += static_cast<real>(sgn * eps) * tg.v[static_cast<size_t>(i)];
            Tensor ts = t_vals;
            for (auto& t : ts.v) t += static_cast<real>(sgn * eps);
            Tape fd;
            BoundModel fbm = model.bind(fd);
            return model.forward(fbm, chunk, fd.input(xs), fd.input(ts), fd.input(r_vals),
                                 fd.constant(lam)).f_out.val();
        };
        Tensor up = probe_at(1), down = probe_at(-1);
        const Tensor& jv = cf.jvp_out.val();
        double worst = 0;
        for (i64 i = 0; i < jv.size(); ++i) {
            double fdv = (up.v[static_cast<size_t>(i)] - down.v[static_cast<size_t>(i)]) / (2 * eps);
            worst = std::max(worst, std::abs(jv.v[static_cast<size_t>(i)] - fdv) /
                                        (std::abs(fdv) + 1e-8));
        }
        *fd_rel_out = worst;
    }

    StageLossVars parts;
    parts.match = loss_match(cf.fwd.f_out, x1v);
    parts.cons = cf.cons;
    parts.tgt = loss_tgt(model.item_logits(bm, cf.fwd.f_out), chunk.targets);
    parts.src = loss_src(model.decode_history(bm, cf.fwd.e_n), tape.constant(chunk.interactions));

    StepOut out;
    Var total = total_loss(2, parts, cfg.alpha, cfg.beta, cfg.gamma, &out.losses);
    auto grads = tape.backward(total);
    for (auto& [nid, p] : tape.bindings) {
        Tensor& g = grads[static_cast<size_t>(nid)];
        if (g.v.empty()) continue;
        Tensor& acc = accum.try_emplace(p->name, Tensor::zeros(p->value.shape)).first->second;
        for (i64 i = 0; i < g.size(); ++i)
            acc.v[static_cast<size_t>(i)] += static_cast<real>(weight) * g.v[static_cast<size_t>(i)];
    }
    return out;
}

}  // namespace detail_train

struct EpochRecord {
    i64 epoch = 0;
    int stage = 0;
    LossBreakdown losses;
    double val_n20 = 0;
};

// Shared two-stage driver: shuffled instance batches with micro-batch
// gradient accumulation, Adam with linear warmup and norm clipping,
// per-epoch validation with early stopping on N@20, divergence fallback
// to the last completed epoch.
inline Checkpoint run_stage(int stage, FaveModel& model, const SplitDataset& ds,
                            const TrainConfig& cfg, std::ostream* log,
                            std::vector<EpochRecord>* history = nullptr) {
    Adam adam;
    Rng rng(cfg.seed ^ (stage == 1 ? 0x51a6e1ULL : 0x57a6e2ULL));
    auto insts = train_instances(ds);
    if (insts.empty()) throw DataError("no training instances (sequences too short)");

    i64 epochs = stage == 1 ? cfg.epochs_stage1 : cfg.epochs_stage2;
    i64 steps_per_epoch = (static_cast<i64>(insts.size()) + cfg.batch_size - 1) / cfg.batch_size;
    i64 warmup_steps = std::max<i64>(1, static_cast<i64>(cfg.warmup_frac *
                                                         static_cast<double>(steps_per_epoch * epochs)));
    i64 global_step = 0;

    Checkpoint best = make_checkpoint(model, adam, rng, stage, cfg);
    double best_val = -1;
    i64 best_epoch = 0;
    Checkpoint last_good = best;

    for (i64 epoch = 1; epoch <= epochs; ++epoch) {
        try {
            for (i64 i = static_cast<i64>(insts.size()) - 1; i > 0; --i)
                std::swap(insts[static_cast<size_t>(i)],
                          insts[static_cast<size_t>(rng.below(static_cast<u64>(i + 1)))]);

            LossBreakdown epoch_losses;
            double seen = 0;
            double fd_worst = -1;
            for (i64 start = 0; start < static_cast<i64>(insts.size()); start += cfg.batch_size) {
                i64 bsz = std::min<i64>(cfg.batch_size, static_cast<i64>(insts.size()) - start);
                std::unordered_map<std::string, Tensor> accum;
                for (i64 off = 0; off < bsz; off += cfg.microbatch) {
                    i64 csz = std::min<i64>(cfg.microbatch, bsz - off);
                    std::span<const TrainInstance> slice(insts.data() + start + off,
                                                         static_cast<size_t>(csz));
                    double weight = static_cast<double>(csz) / static_cast<double>(bsz);
                    detail_train::StepOut so;
                    if (stage == 1) {
                        so = detail_train::stage1_chunk(model, ds, slice, rng, cfg, accum, weight);
                    } else {
                        double* fd_slot =
                            (cfg.fd_jvp_check && fd_worst < 0) ? &fd_worst : nullptr;
                        so = detail_train::stage2_chunk(model, ds, slice, rng, cfg, accum, weight,
                                                        fd_slot);
                    }
                    double w = static_cast<double>(csz);
                    epoch_losses.rec += so.losses.rec * w;
                    epoch_losses.tgt += so.losses.tgt * w;
                    epoch_losses.src += so.losses.src * w;
                    epoch_losses.match += so.losses.match * w;
                    epoch_losses.cons += so.losses.cons * w;
                    epoch_losses.total += so.losses.total * w;
                    seen += w;
                }
                clip_gradients(model, accum, cfg.clip_norm);
                ++global_step;
                double lr = cfg.lr * std::min(1.0, static_cast<double>(global_step) /
                                                       static_cast<double>(warmup_steps));
                adam.apply(model, accum, lr);
            }
            epoch_losses.rec /= seen;
            epoch_losses.tgt /= seen;
            epoch_losses.src /= seen;
            epoch_losses.match /= seen;
            epoch_losses.cons /= seen;
            epoch_losses.total /= seen;

            RankingReport val = evaluate(model, ds, EvalSplit::Valid, SamplerSpec{}, cfg);
            if (log) {
                nlohmann::json line{{"epoch", epoch},         {"stage", stage},
                                    {"rec", epoch_losses.rec}, {"tgt", epoch_losses.tgt},
                                    {"src", epoch_losses.src}, {"match", epoch_losses.match},
                                    {"cons", epoch_losses.cons}, {"total", epoch_losses.total},
                                    {"val_n20", val.n20}};
                (*log) << line.dump() << "\n";
            }
            if (cfg.fd_jvp_check && fd_worst >= 0)
                std::cerr << "jvp fd cross-check, epoch " << epoch << ": max rel " << fd_worst
                          << "\n";
            if (history)
                history->push_back({epoch, stage, epoch_losses, val.n20});

            if (val.n20 > best_val) {
                best_val = val.n20;
                best_epoch = epoch;
                best = make_checkpoint(model, adam, rng, stage, cfg);
            }
            last_good = make_checkpoint(model, adam, rng, stage, cfg);
            if (epoch - best_epoch >= cfg.patience) break;
        } catch (const NumericError& e) {
            std::cerr << "training diverged at epoch " << epoch << " (" << e.what()
                      << "); keeping last good checkpoint\n";
            return last_good;
        }
    }
    return best;
}

inline Checkpoint train_stage1(const SplitDataset& ds, const TrainConfig& cfg,
                               std::ostream* log = &std::cout,
                               std::vector<EpochRecord>* history = nullptr) {
    cfg.validate();
    FaveModel model(cfg, ds.num_items, cfg.seed);
    return run_stage(1, model, ds, cfg, log, history);
}

inline Checkpoint train_stage2(const SplitDataset& ds, const TrainConfig& cfg,
                               const Checkpoint& from, std::ostream* log = &std::cout,
                               std::vector<EpochRecord>* history = nullptr) {
    cfg.validate();
    require_config_match(from, cfg);
    if (from.stage != 1)
        throw CheckpointError(CheckpointError::Kind::ConfigMismatch,
                              "stage-2 training needs a stage-1 checkpoint, got stage " +
                                  std::to_string(from.stage));
    FaveModel model = model_from_checkpoint(from);
    if (model.num_items != ds.num_items)
        throw DataError("checkpoint item count does not match dataset");
    model.freeze_embeddings();
    return run_stage(2, model, ds, cfg, log, history);
}

}  // namespace fave
