#pragma once

#include <algorithm>
#include <chrono>
#include <thread>

#include <json.hpp>

#include "fave/flow.hpp"

namespace fave {

struct SamplerSpec {
    enum class Kind { OneStep, Euler };
    Kind kind = Kind::OneStep;
    i64 steps = 30;  // Euler only

    static SamplerSpec parse(const std::string& s) {
        if (s == "one_step") return {Kind::OneStep, 1};
        if (s.rfind("euler:", 0) == 0) {
            i64 n = std::stoll(s.substr(6));
            if (n <= 0) throw ConfigError("euler step count must be >= 1");
            return {Kind::Euler, n};
        }
        if (s == "euler") return {Kind::Euler, 30};
        throw ConfigError("unknown sampler '" + s + "' (want one_step or euler:N)");
    }

    std::string name() const { return kind == Kind::OneStep ? "one_step" : "euler"; }
    i64 forwards() const { return kind == Kind::OneStep ? 1 : steps; }
};

// Analytic multiply-add count of one conditional forward, doubled into
// FLOPs. Only matmul work is counted; the padded length makes the count
// input independent. The value is an integer-valued double, so per-sampler
// totals scale exactly with the forward count.
inline double forward_flops(const TrainConfig& cfg) {
    const double L = static_cast<double>(cfg.max_len);
    const double d = static_cast<double>(cfg.hidden_dim);
    const double f = static_cast<double>(cfg.ffn_mult) * d;
    const double F = static_cast<double>(cfg.time_freqs);
    double macs = 0;
    macs += static_cast<double>(cfg.blocks) * (4 * L * d * d + 2 * L * L * d + 2 * L * d * f);
    macs += 2 * (F + 2 * F * d + d * d);                       // both TimeEmb calls
    macs += static_cast<double>(cfg.post_blocks) * 2 * d * f;  // fusion trunk
    macs += d * d;                                             // output head
    return 2.0 * macs;
}

// Raw per-sample FLOP count of a sampler run: linear in its forwards.
inline double analytic_flops(const TrainConfig& cfg, const SamplerSpec& sampler) {
    return forward_flops(cfg) * static_cast<double>(sampler.forwards());
}

// One conditional forward in evaluation mode (deterministic lambda).
inline Tensor eval_forward(const FaveModel& model, const Batch& batch, const Tensor& x_t,
                           double t, double r) {
    Tape tape;
    BoundModel bm = model.bind(tape);
    i64 B = batch.size();
    ModulationSampler mod{model.cfg.delta};
    Var xt = tape.input(x_t);
    Var tc = tape.input(Tensor::full({B, 1}, static_cast<real>(t)));
    Var rc = tape.input(Tensor::full({B, 1}, static_cast<real>(r)));
    Var lam = tape.constant(mod.eval_mean(B, model.cfg.hidden_dim));
    return model.forward(bm, batch, xt, tc, rc, lam).f_out.val();
}

// x_hat = f(x0, 0, 1): the average-velocity displacement resolved in a
// single forward pass.
inline Tensor one_step_infer(const FaveModel& model, const Batch& batch, const Tensor& x0) {
    return eval_forward(model, batch, x0, 0.0, 1.0);
}

// Euler integration of v(x_t, t) = f(x_t, t, 1) - x0 with a fixed x0.
// The iterate is kept in the algebraically identical form
//   x_k = ((N-k)/N) x0 + (k/N) avg_k,   avg_k = mean of f evaluations,
// so N=1 reproduces the single forward bitwise and a constant field
// integrates exactly for any N.
inline Tensor euler_infer(const FaveModel& model, const Batch& batch, const Tensor& x0, i64 steps) {
    if (steps <= 0) throw Error("euler_infer: steps must be >= 1");
    i64 B = batch.size(), d = model.cfg.hidden_dim;
    Tensor avg({B, d});
    Tensor xk = x0;
    for (i64 k = 0; k < steps; ++k) {
        double tk = static_cast<double>(k) / static_cast<double>(steps);
        Tensor fk = eval_forward(model, batch, xk, tk, 1.0);
        if (k == 0) {
            avg = fk;
        } else {
            real inv = real(1) / static_cast<real>(k + 1);
            for (i64 i = 0; i < avg.size(); ++i) {
                real delta = (fk.v[static_cast<size_t>(i)] - avg.v[static_cast<size_t>(i)]) * inv;
                if (delta != real(0)) avg.v[static_cast<size_t>(i)] += delta;
            }
        }
        if (k + 1 < steps) {
            real w0 = static_cast<real>(steps - (k + 1)) / static_cast<real>(steps);
            real w1 = static_cast<real>(k + 1) / static_cast<real>(steps);
            for (i64 i = 0; i < xk.size(); ++i)
                xk.v[static_cast<size_t>(i)] =
                    w0 * x0.v[static_cast<size_t>(i)] + w1 * avg.v[static_cast<size_t>(i)];
        }
    }
    return avg;  // (1 - N/N) x0 + (N/N) avg
}

// Intermediate Euler states x_k for k = 0..N, for trajectory dumps.
inline std::vector<Tensor> euler_trajectory(const FaveModel& model, const Batch& batch,
                                            const Tensor& x0, i64 steps) {
    if (steps <= 0) throw Error("euler_trajectory: steps must be >= 1");
    std::vector<Tensor> states{x0};
    i64 B = batch.size(), d = model.cfg.hidden_dim;
    Tensor avg({B, d});
    Tensor xk = x0;
    for (i64 k = 0; k < steps; ++k) {
        double tk = static_cast<double>(k) / static_cast<double>(steps);
        Tensor fk = eval_forward(model, batch, xk, tk, 1.0);
        if (k == 0) {
            avg = fk;
        } else {
            real inv = real(1) / static_cast<real>(k + 1);
            for (i64 i = 0; i < avg.size(); ++i) {
                real delta = (fk.v[static_cast<size_t>(i)] - avg.v[static_cast<size_t>(i)]) * inv;
                if (delta != real(0)) avg.v[static_cast<size_t>(i)] += delta;
            }
        }
        real w0 = static_cast<real>(steps - (k + 1)) / static_cast<real>(steps);
        real w1 = static_cast<real>(k + 1) / static_cast<real>(steps);
        Tensor next({B, d});
        for (i64 i = 0; i < next.size(); ++i)
            next.v[static_cast<size_t>(i)] =
                w0 * x0.v[static_cast<size_t>(i)] + w1 * avg.v[static_cast<size_t>(i)];
        states.push_back(next);
        xk = next;
    }
    return states;
}

// ---- ranking and metrics --------------------------------------------------

// Inner-product scores of one predicted state against every real item.
inline std::vector<real> item_scores(const Tensor& xhat, const Tensor& emb_table, i64 num_items) {
    i64 d = emb_table.dim(1);
    std::vector<real> scores(static_cast<size_t>(num_items));
    for (i64 j = 0; j < num_items; ++j) {
        const real* row = emb_table.data() + j * d;
        real s = 0;
        for (i64 c = 0; c < d; ++c) s += xhat.v[static_cast<size_t>(c)] * row[c];
        scores[static_cast<size_t>(j)] = s;
    }
    return scores;
}

// Descending score order over non-excluded items; ties break toward the
// smaller item index.
inline std::vector<i64> rank_top_k(const std::vector<real>& scores, const std::vector<char>& excluded,
                                   i64 k) {
    std::vector<i64> cands;
    cands.reserve(scores.size());
    for (i64 j = 0; j < static_cast<i64>(scores.size()); ++j)
        if (!excluded[static_cast<size_t>(j)]) cands.push_back(j);
    if (k > static_cast<i64>(cands.size()))
        throw Error("rank: k exceeds candidate count");
    auto better = [&](i64 a, i64 b) {
        real sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
        return sa != sb ? sa > sb : a < b;
    };
    std::partial_sort(cands.begin(), cands.begin() + k, cands.end(), better);
    cands.resize(static_cast<size_t>(k));
    return cands;
}

// 1-based rank of the target among non-excluded candidates.
inline i64 rank_of_target(const std::vector<real>& scores, const std::vector<char>& excluded,
                          i64 target) {
    real st = scores[static_cast<size_t>(target)];
    i64 rank = 1;
    for (i64 j = 0; j < static_cast<i64>(scores.size()); ++j) {
        if (excluded[static_cast<size_t>(j)] || j == target) continue;
        real sj = scores[static_cast<size_t>(j)];
        if (sj > st || (sj == st && j < target)) ++rank;
    }
    return rank;
}

inline double hit_rate(const std::vector<i64>& ranks, i64 k) {
    if (ranks.empty()) return 0;
    i64 hits = 0;
    for (i64 r : ranks)
        if (r <= k) ++hits;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
}

inline double ndcg(const std::vector<i64>& ranks, i64 k) {
    if (ranks.empty()) return 0;
    double sum = 0;
    for (i64 r : ranks)
        if (r <= k) sum += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    return 100.0 * sum / static_cast<double>(ranks.size());
}

// Mean over users of the mean pairwise cosine distance inside each list.
inline double ild(const std::vector<std::vector<i64>>& lists, const Tensor& emb_table) {
    i64 d = emb_table.dim(1);
    double user_sum = 0;
    i64 user_count = 0;
    for (const auto& list : lists) {
        if (list.size() < 2) throw Error("ild: list needs at least two items");
        double pair_sum = 0;
        i64 pairs = 0;
        for (size_t a = 0; a < list.size(); ++a)
            for (size_t b = a + 1; b < list.size(); ++b) {
                const real* ra = emb_table.data() + list[a] * d;
                const real* rb = emb_table.data() + list[b] * d;
                double dot = 0, na = 0, nb = 0;
                for (i64 c = 0; c < d; ++c) {
                    dot += static_cast<double>(ra[c]) * rb[c];
                    na += static_cast<double>(ra[c]) * ra[c];
                    nb += static_cast<double>(rb[c]) * rb[c];
                }
                if (na == 0 || nb == 0) throw NumericError("ild: zero-norm embedding in list");
                pair_sum += 1.0 - dot / std::sqrt(na * nb);
                ++pairs;
            }
        user_sum += pair_sum / static_cast<double>(pairs);
        ++user_count;
    }
    return user_count ? user_sum / static_cast<double>(user_count) : 0.0;
}

// ---- full evaluation pass ---------------------------------------------

struct UserResult {
    i64 user = -1;
    i64 target = -1;
    i64 rank = -1;
    std::vector<i64> top;
    double sampler_ms = 0;
};

struct RankingReport {
    std::string sampler;
    i64 steps = 1;
    i64 users = 0;
    i64 num_items = 0;
    double h10 = 0, h20 = 0, n10 = 0, n20 = 0, ild20 = 0;
    double latency_ms = 0;  // median per-sample sampler wall time
    double flops_g = 0;     // analytic, per sample
    double total_s = 0;     // full split pass
    std::vector<UserResult> per_user;
};

// Wall-clock fields are opt-in: the default serialization is a pure
// function of (seed, config, data), so identical runs emit identical
// bytes. Timing lives in `bench` and behind the eval --timing flag.
inline nlohmann::json to_json(const RankingReport& r, bool include_timing = false) {
    nlohmann::json users = nlohmann::json::array();
    for (const auto& u : r.per_user)
        users.push_back({{"user", u.user}, {"target", u.target}, {"rank", u.rank}, {"top", u.top}});
    nlohmann::json j{{"sampler", r.sampler},
                     {"steps", r.steps},
                     {"users", r.users},
                     {"items", r.num_items},
                     {"metrics",
                      {{"h@10", r.h10}, {"h@20", r.h20}, {"n@10", r.n10}, {"n@20", r.n20},
                       {"ild@20", r.ild20}}},
                     {"flops_g", r.flops_g},
                     {"per_user", users}};
    if (include_timing) {
        j["latency_ms"] = r.latency_ms;
        j["total_s"] = r.total_s;
    }
    return j;
}

// The anchor prior at evaluation mirrors training: a fresh mask per user,
// seeded per user so results do not depend on traversal order.
inline Tensor eval_prior(const FaveModel& model, std::span<const i64> window, Rng user_rng,
                         const TrainConfig& cfg) {
    double rho = cfg.eval_full_retention ? 1.0 : cfg.rho;
    return semantic_anchor_prior(window, rho, model.p("emb.table").value, user_rng);
}

inline Tensor run_sampler(const FaveModel& model, const Batch& batch, const Tensor& x0,
                          const SamplerSpec& sampler) {
    if (sampler.kind == SamplerSpec::Kind::OneStep) return one_step_infer(model, batch, x0);
    return euler_infer(model, batch, x0, sampler.steps);
}

inline RankingReport evaluate(const FaveModel& model, const SplitDataset& ds, EvalSplit split,
                              const SamplerSpec& sampler, const TrainConfig& cfg,
                              i64 top_list = 20) {
    using clock = std::chrono::steady_clock;
    RankingReport report;
    report.sampler = sampler.name();
    report.steps = sampler.forwards();
    report.users = static_cast<i64>(ds.users.size());
    report.num_items = ds.num_items;
    report.flops_g = analytic_flops(cfg, sampler) / 1e9;
    report.per_user.resize(ds.users.size());

    Rng base(cfg.seed ^ 0x5eedf00dULL);
    const Tensor& table = model.p("emb.table").value;

    auto pass_start = clock::now();
    auto worker = [&](size_t begin, size_t end) {
        for (size_t ui = begin; ui < end; ++ui) {
            const auto& u = ds.users[ui];
            auto input = split == EvalSplit::Valid ? u.valid_input() : u.test_input();
            i64 target = split == EvalSplit::Valid ? u.valid_target() : u.test_target();
            i64 win = std::min<i64>(static_cast<i64>(input.size()), cfg.max_len);
            auto window = input.subspan(input.size() - static_cast<size_t>(win));

            Rng rng = base.derive(static_cast<u64>(u.user) * 2 +
                                  (split == EvalSplit::Valid ? 0 : 1));
            Tensor x0 = eval_prior(model, window, rng, cfg);
            Tensor x0row({1, cfg.hidden_dim}, std::vector<real>(x0.v));

            std::vector<BatchItem> rows = {{input, target, u.train_prefix()}};
            Batch batch = make_batch(rows, ds.num_items, cfg.max_len);

            auto t0 = clock::now();
            Tensor xhat = run_sampler(model, batch, x0row, sampler);
            auto t1 = clock::now();

            std::vector<char> excluded(static_cast<size_t>(ds.num_items), 0);
            for (i64 it : input) excluded[static_cast<size_t>(it)] = 1;
            excluded[static_cast<size_t>(target)] = 0;
            i64 candidates = ds.num_items;
            for (char e : excluded) candidates -= e;

            Tensor xrow({cfg.hidden_dim}, std::vector<real>(xhat.v));
            std::vector<real> scores = item_scores(xrow, table, ds.num_items);
            UserResult& res = report.per_user[ui];
            res.user = u.user;
            res.target = target;
            res.rank = rank_of_target(scores, excluded, target);
            res.top = rank_top_k(scores, excluded, std::min<i64>(top_list, candidates));
            res.sampler_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        }
    };

    i64 threads = std::max<i64>(1, cfg.eval_threads);
    if (threads == 1 || ds.users.size() < 2) {
        worker(0, ds.users.size());
    } else {
        std::vector<std::thread> pool;
        size_t chunk = (ds.users.size() + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
        for (i64 t = 0; t < threads; ++t) {
            size_t b = static_cast<size_t>(t) * chunk;
            size_t e = std::min(ds.users.size(), b + chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }
    report.total_s = std::chrono::duration<double>(clock::now() - pass_start).count();

    std::vector<i64> ranks;
    std::vector<double> lat;
    std::vector<std::vector<i64>> lists;
    for (const auto& r : report.per_user) {
        ranks.push_back(r.rank);
        lat.push_back(r.sampler_ms);
        lists.push_back(r.top);
    }
    report.h10 = hit_rate(ranks, 10);
    report.h20 = hit_rate(ranks, 20);
    report.n10 = ndcg(ranks, 10);
    report.n20 = ndcg(ranks, 20);
    report.ild20 = ild(lists, table);
    std::sort(lat.begin(), lat.end());
    report.latency_ms = lat.empty() ? 0 : lat[lat.size() / 2];
    return report;
}

struct BenchResult {
    double flops_g = 0;
    double latency_ms = 0;
    double total_s = 0;
};

inline nlohmann::json to_json(const BenchResult& b) {
    return nlohmann::json{{"flops_g", b.flops_g}, {"latency_ms", b.latency_ms}, {"total_s", b.total_s}};
}

// Table-style efficiency triple: analytic FLOPs per sample, median
// per-sample latency over >= `samples` single-user calls after `warmup`
// discarded runs, and the wall time of one full split pass.
inline BenchResult bench(const FaveModel& model, const SplitDataset& ds, EvalSplit split,
                         const SamplerSpec& sampler, const TrainConfig& cfg, i64 warmup = 10,
                         i64 samples = 100) {
    using clock = std::chrono::steady_clock;
    BenchResult out;
    out.flops_g = analytic_flops(cfg, sampler) / 1e9;

    Rng base(cfg.seed ^ 0xbe9cULL);
    std::vector<double> times;
    i64 total_runs = warmup + samples;
    for (i64 i = 0; i < total_runs; ++i) {
        const auto& u = ds.users[static_cast<size_t>(i) % ds.users.size()];
        auto input = split == EvalSplit::Valid ? u.valid_input() : u.test_input();
        i64 target = split == EvalSplit::Valid ? u.valid_target() : u.test_target();
        i64 win = std::min<i64>(static_cast<i64>(input.size()), cfg.max_len);
        auto window = input.subspan(input.size() - static_cast<size_t>(win));
        Rng rng = base.derive(static_cast<u64>(i));
        Tensor x0 = eval_prior(model, window, rng, cfg);
        Tensor x0row({1, cfg.hidden_dim}, std::vector<real>(x0.v));
        std::vector<BatchItem> rows = {{input, target, u.train_prefix()}};
        Batch batch = make_batch(rows, ds.num_items, cfg.max_len);

        auto t0 = clock::now();
        Tensor xhat = run_sampler(model, batch, x0row, sampler);
        auto t1 = clock::now();
        (void)xhat;
        if (i >= warmup) times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    out.latency_ms = times[times.size() / 2];

    auto pass0 = clock::now();
    TrainConfig single = cfg;
    single.eval_threads = 1;
    RankingReport rep = evaluate(model, ds, split, sampler, single);
    (void)rep;
    out.total_s = std::chrono::duration<double>(clock::now() - pass0).count();
    return out;
}

}  // namespace fave
