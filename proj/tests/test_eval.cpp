#include <catch2/catch.hpp>

#include "fave/eval.hpp"
#include "fave/synthetic.hpp"
#include "testutil.hpp"

using namespace fave;

namespace {

TrainConfig eval_config(i64 d = 16, i64 L = 8) {
    TrainConfig cfg;
    cfg.hidden_dim = d;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.post_blocks = 1;
    cfg.ffn_mult = 2;
    cfg.time_freqs = 8;
    cfg.max_len = L;
    cfg.min_len = 5;
    cfg.seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("rank: hand-computed ordering on a 5-item catalog") {
    Tensor emb({5, 2}, {1, 0,    // item 0
                        0, 1,    // item 1
                        1, 1,    // item 2
                        -1, 0,   // item 3
                        0.5, 0}); // item 4
    Tensor xhat({2}, {2, 1});
    // scores: 2, 1, 3, -2, 1  -> order 2, 0, (1 vs 4 tie at 1 -> 1 first), 3
    std::vector<real> scores = item_scores(xhat, emb, 5);
    std::vector<char> excl(5, 0);
    REQUIRE(rank_top_k(scores, excl, 5) == std::vector<i64>{2, 0, 1, 4, 3});
    REQUIRE(rank_of_target(scores, excl, 2) == 1);
    REQUIRE(rank_of_target(scores, excl, 4) == 4);

    SECTION("excluded items never appear") {
        excl[2] = 1;
        auto top = rank_top_k(scores, excl, 4);
        REQUIRE(top == std::vector<i64>{0, 1, 4, 3});
    }
    SECTION("k beyond the candidate count is an error") {
        REQUIRE_THROWS_AS(rank_top_k(scores, excl, 6), Error);
    }
    SECTION("orthonormal embeddings put the matching item first") {
        Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        Tensor q({3}, {0, 1, 0});
        std::vector<char> none(3, 0);
        REQUIRE(rank_top_k(item_scores(q, eye, 3), none, 1) == std::vector<i64>{1});
    }
}

TEST_CASE("hit rate and ndcg oracles") {
    REQUIRE(hit_rate({1, 1, 1}, 10) == 100.0);
    REQUIRE(hit_rate({11, 12, 30}, 10) == 0.0);
    REQUIRE(hit_rate({2, 11, 5}, 10) == Approx(66.6667).margin(0.001));

    REQUIRE(ndcg({1}, 10) == Approx(100.0));
    REQUIRE(ndcg({3}, 10) == Approx(100.0 / std::log2(4.0)).epsilon(1e-12));
    REQUIRE(ndcg({3}, 10) == Approx(50.0));
    REQUIRE(ndcg({11}, 10) == 0.0);

    // N@K <= H@K at the same K, any rank profile
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<i64> ranks;
        for (int i = 0; i < 50; ++i) ranks.push_back(1 + static_cast<i64>(rng.below(40)));
        for (i64 k : {5, 10, 20}) REQUIRE(ndcg(ranks, k) <= hit_rate(ranks, k) + 1e-12);
    }
}

TEST_CASE("intra-list diversity oracles") {
    SECTION("identical embeddings give zero") {
        Tensor emb({3, 2}, {1, 1, 1, 1, 1, 1});
        REQUIRE(ild({{0, 1, 2}}, emb) == Approx(0.0).margin(1e-12));
    }
    SECTION("orthogonal pair gives one") {
        Tensor emb({2, 2}, {1, 0, 0, 1});
        REQUIRE(ild({{0, 1}}, emb) == Approx(1.0).epsilon(1e-12));
    }
    SECTION("pairwise cosines {1,0,0} average to 2/3") {
        Tensor emb({3, 2}, {1, 0, 1, 0, 0, 1});
        REQUIRE(ild({{0, 1, 2}}, emb) == Approx(2.0 / 3.0).epsilon(1e-12));
    }
    SECTION("zero-norm embedding is an error") {
        Tensor emb({2, 2}, {0, 0, 1, 0});
        REQUIRE_THROWS_AS(ild({{0, 1}}, emb), NumericError);
    }
    SECTION("short list is an error") {
        Tensor emb({2, 2}, {1, 0, 0, 1});
        REQUIRE_THROWS_AS(ild({{0}}, emb), Error);
    }
}

TEST_CASE("euler with one step is bitwise one-step inference") {
    TrainConfig cfg = eval_config();
    SplitDataset ds = build_splits(synthetic_log(6, 10, 8, 5), 5);
    FaveModel model(cfg, ds.num_items, 31);

    std::vector<i64> uidx = {0};
    Batch batch = make_eval_batch(ds, uidx, EvalSplit::Test, cfg.max_len);
    Rng rng(17);
    Tensor x0 = semantic_anchor_prior(ds.users[0].test_input(), cfg.rho,
                                      model.p("emb.table").value, rng);
    Tensor x0row({1, cfg.hidden_dim}, std::vector<real>(x0.v));

    Tensor one = one_step_infer(model, batch, x0row);
    Tensor e1 = euler_infer(model, batch, x0row, 1);
    REQUIRE(one.v == e1.v);

    // x0 + (f - x0) and f are the same expression; one_step returns f
    Tensor f = eval_forward(model, batch, x0row, 0.0, 1.0);
    REQUIRE(one.v == f.v);

    REQUIRE_THROWS_AS(euler_infer(model, batch, x0row, 0), Error);
}

TEST_CASE("constant velocity field integrates exactly for any step count") {
    TrainConfig cfg = eval_config();
    SplitDataset ds = build_splits(synthetic_log(6, 10, 8, 5), 5);
    FaveModel model(cfg, ds.num_items, 31);
    // zero head weights make f(x, t, r) identically head.b
    for (auto& x : model.p("head.w").value.v) x = 0;
    Rng rng(41);
    for (auto& x : model.p("head.b").value.v) x = static_cast<real>(rng.normal());

    std::vector<i64> uidx = {1};
    Batch batch = make_eval_batch(ds, uidx, EvalSplit::Test, cfg.max_len);
    Tensor x0 = testutil::random_tensor({1, cfg.hidden_dim}, rng);
    const std::vector<real>& want = model.p("head.b").value.v;
    for (i64 n : {1, 3, 7, 30}) {
        Tensor got = euler_infer(model, batch, x0, n);
        REQUIRE(got.v == want);
    }
}

TEST_CASE("trajectory dump covers every intermediate state") {
    TrainConfig cfg = eval_config();
    SplitDataset ds = build_splits(synthetic_log(6, 10, 8, 5), 5);
    FaveModel model(cfg, ds.num_items, 31);
    std::vector<i64> uidx = {0};
    Batch batch = make_eval_batch(ds, uidx, EvalSplit::Test, cfg.max_len);
    Rng rng(3);
    Tensor x0 = testutil::random_tensor({1, cfg.hidden_dim}, rng);
    auto states = euler_trajectory(model, batch, x0, 5);
    REQUIRE(states.size() == 6);
    REQUIRE(states.front().v == x0.v);
    REQUIRE(states.back().v == euler_infer(model, batch, x0, 5).v);
}

TEST_CASE("analytic flops scale exactly with euler steps") {
    TrainConfig cfg = eval_config();
    double base = forward_flops(cfg);
    REQUIRE(base > 0);
    SamplerSpec one = SamplerSpec::parse("one_step");
    SamplerSpec e30 = SamplerSpec::parse("euler:30");
    SamplerSpec e1 = SamplerSpec::parse("euler:1");
    REQUIRE(static_cast<double>(e30.forwards()) * base == 30.0 * base);
    REQUIRE(e1.forwards() == one.forwards());
    REQUIRE_THROWS_AS(SamplerSpec::parse("euler:0"), ConfigError);
    REQUIRE_THROWS_AS(SamplerSpec::parse("magic"), ConfigError);
}

TEST_CASE("full evaluation report: aggregates, determinism, random-ranker band") {
    TrainConfig cfg = eval_config(16, 8);
    cfg.seed = 207;
    SplitDataset ds = build_splits(synthetic_log(400, 200, 7, 99), 5);
    FaveModel model(cfg, ds.num_items, 5);  // untrained: a random ranker

    RankingReport rep = evaluate(model, ds, EvalSplit::Test, SamplerSpec{}, cfg);
    REQUIRE(rep.users == 400);
    REQUIRE(rep.per_user.size() == 400);
    REQUIRE(rep.n10 <= rep.h10 + 1e-9);
    REQUIRE(rep.n20 <= rep.h20 + 1e-9);
    REQUIRE(rep.ild20 >= 0.0);
    REQUIRE(rep.ild20 <= 2.0);

    // H@10 of a random ranker over ~200 candidates: 5% within 3 sigma
    double p = 0.05;
    double sigma = 100.0 * std::sqrt(p * (1 - p) / 400.0);
    REQUIRE(std::abs(rep.h10 - 5.0) <= 3 * sigma + 0.2);

    RankingReport rep2 = evaluate(model, ds, EvalSplit::Test, SamplerSpec{}, cfg);
    REQUIRE(to_json(rep).dump() == to_json(rep2).dump());

    // threaded evaluation returns identical rankings
    TrainConfig threaded = cfg;
    threaded.eval_threads = 2;
    RankingReport rep3 = evaluate(model, ds, EvalSplit::Test, SamplerSpec{}, threaded);
    for (size_t i = 0; i < rep.per_user.size(); ++i) {
        REQUIRE(rep3.per_user[i].rank == rep.per_user[i].rank);
        REQUIRE(rep3.per_user[i].top == rep.per_user[i].top);
    }
}

TEST_CASE("bench produces a sane efficiency triple") {
    TrainConfig cfg = eval_config(16, 8);
    SplitDataset ds = build_splits(synthetic_log(12, 10, 8, 5), 5);
    FaveModel model(cfg, ds.num_items, 3);
    BenchResult one = bench(model, ds, EvalSplit::Test, SamplerSpec::parse("one_step"), cfg, 2, 12);
    BenchResult e5 = bench(model, ds, EvalSplit::Test, SamplerSpec::parse("euler:5"), cfg, 2, 12);
    REQUIRE(one.flops_g > 0);
    REQUIRE(e5.flops_g == Approx(5.0 * one.flops_g).epsilon(1e-12));
    REQUIRE(one.latency_ms > 0);
    REQUIRE(e5.latency_ms > one.latency_ms);
    REQUIRE(one.total_s > 0);
}
