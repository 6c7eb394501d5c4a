// fave: one-step flow recommender pipeline.
//   prepare          ingest a TSV interaction log into a dataset directory
//   train            run training stage 1 or 2
//   eval             rank the held-out split and print a report as JSON
//   infer            top-K items for a single user
//   bench            FLOPs / latency / total-time triple
//   dump-trajectory  write Euler intermediate states as CSV

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fave/eval.hpp"
#include "fave/train.hpp"

using namespace fave;

namespace {

TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    in >> j;
    return config_from_json(j);
}

const SplitDataset::UserSplit& find_user(const SplitDataset& ds, i64 user) {
    for (const auto& u : ds.users)
        if (u.user == user) return u;
    throw DataError("user " + std::to_string(user) + " not in dataset");
}

struct EvalArgs {
    std::string ckpt, data, sampler = "one_step", split = "test";
    bool timing = false;
    i64 threads = 0;
};

EvalSplit parse_split(const std::string& s) {
    if (s == "test") return EvalSplit::Test;
    if (s == "valid") return EvalSplit::Valid;
    throw ConfigError("unknown split '" + s + "'");
}

int run(int argc, char** argv) {
    CLI::App app{"one-step flow recommender"};
    app.require_subcommand(1);

    // prepare
    auto* prepare = app.add_subcommand("prepare", "ingest a TSV log into a dataset directory");
    std::string in_path, out_dir, columns = "user,item,time";
    i64 min_len = 5;
    prepare->add_option("--input", in_path, "interaction TSV")->required();
    prepare->add_option("--out", out_dir, "output directory")->required();
    prepare->add_option("--columns", columns, "column roles, e.g. user,item,skip,time");
    prepare->add_option("--min-len", min_len, "minimum interactions per user");

    // train
    auto* train = app.add_subcommand("train", "run one training stage");
    int stage = 1;
    std::string config_path, data_dir, out_ckpt, from_ckpt;
    train->add_option("--stage", stage, "1 or 2")->required();
    train->add_option("--config", config_path, "config JSON")->required();
    train->add_option("--data", data_dir, "prepared dataset directory")->required();
    train->add_option("--out", out_ckpt, "checkpoint to write")->required();
    train->add_option("--from", from_ckpt, "stage-1 checkpoint (stage 2 only)");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "rank the held-out split");
    EvalArgs ev;
    eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
    eval_cmd->add_option("--data", ev.data, "dataset directory")->required();
    eval_cmd->add_option("--sampler", ev.sampler, "one_step or euler:N");
    eval_cmd->add_option("--split", ev.split, "test or valid");
    eval_cmd->add_flag("--timing", ev.timing, "include wall-clock fields in the report");
    eval_cmd->add_option("--threads", ev.threads, "evaluation threads");

    // infer
    auto* infer = app.add_subcommand("infer", "top-K items for one user");
    std::string inf_ckpt, inf_data, inf_sampler = "one_step";
    i64 inf_user = -1, inf_k = 10;
    infer->add_option("--ckpt", inf_ckpt)->required();
    infer->add_option("--data", inf_data)->required();
    infer->add_option("--user", inf_user, "dense user id (see user_map.tsv)")->required();
    infer->add_option("--sampler", inf_sampler);
    infer->add_option("--k", inf_k, "list length");

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "efficiency triple");
    std::string b_ckpt, b_data, b_sampler = "one_step", b_split = "test";
    i64 b_warmup = 10, b_samples = 100;
    bench_cmd->add_option("--ckpt", b_ckpt)->required();
    bench_cmd->add_option("--data", b_data)->required();
    bench_cmd->add_option("--sampler", b_sampler);
    bench_cmd->add_option("--split", b_split);
    bench_cmd->add_option("--warmup", b_warmup);
    bench_cmd->add_option("--samples", b_samples);

    // dump-trajectory
    auto* dump = app.add_subcommand("dump-trajectory", "Euler intermediate states as CSV");
    std::string d_ckpt, d_data, d_out;
    std::vector<i64> d_users;
    i64 d_steps = 30;
    dump->add_option("--ckpt", d_ckpt)->required();
    dump->add_option("--data", d_data)->required();
    dump->add_option("--user", d_users, "dense user id, repeatable")->required();
    dump->add_option("--steps", d_steps, "Euler steps");
    dump->add_option("--out", d_out, "CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    if (*prepare) {
        InteractionLog log = ingest_tsv(in_path, columns);
        SplitDataset ds = build_splits(log, min_len);
        write_dataset(out_dir, ds, &log);
        nlohmann::json j{{"users", ds.users.size()}, {"items", ds.num_items}, {"out", out_dir}};
        std::cout << j.dump() << "\n";
        return 0;
    }

    if (*train) {
        TrainConfig cfg = load_config(config_path);
        SplitDataset ds = load_dataset(data_dir);
        Checkpoint result;
        if (stage == 1) {
            result = train_stage1(ds, cfg, &std::cout);
        } else if (stage == 2) {
            if (from_ckpt.empty()) throw ConfigError("stage 2 requires --from <stage-1 checkpoint>");
            Checkpoint from = load_checkpoint(from_ckpt);
            result = train_stage2(ds, cfg, from, &std::cout);
        } else {
            throw ConfigError("--stage must be 1 or 2");
        }
        save_checkpoint(result, out_ckpt);
        return 0;
    }

    if (*eval_cmd) {
        Checkpoint ckpt = load_checkpoint(ev.ckpt);
        SplitDataset ds = load_dataset(ev.data);
        FaveModel model = model_from_checkpoint(ckpt);
        if (model.num_items != ds.num_items) throw DataError("checkpoint/item-count mismatch");
        TrainConfig cfg = ckpt.config;
        if (ev.threads > 0) cfg.eval_threads = ev.threads;
        RankingReport rep =
            evaluate(model, ds, parse_split(ev.split), SamplerSpec::parse(ev.sampler), cfg);
        std::cout << to_json(rep, ev.timing).dump() << "\n";
        return 0;
    }

    if (*infer) {
        Checkpoint ckpt = load_checkpoint(inf_ckpt);
        SplitDataset ds = load_dataset(inf_data);
        FaveModel model = model_from_checkpoint(ckpt);
        TrainConfig cfg = ckpt.config;
        const auto& u = find_user(ds, inf_user);
        auto input = u.test_input();
        i64 win = std::min<i64>(static_cast<i64>(input.size()), cfg.max_len);
        Rng rng = Rng(cfg.seed ^ 0x5eedf00dULL).derive(static_cast<u64>(u.user) * 2 + 1);
        Tensor x0 = eval_prior(model, input.subspan(input.size() - static_cast<size_t>(win)), rng, cfg);
        Tensor x0row({1, cfg.hidden_dim}, std::vector<real>(x0.v));
        std::vector<BatchItem> rows = {{input, u.test_target(), u.train_prefix()}};
        Batch batch = make_batch(rows, ds.num_items, cfg.max_len);
        Tensor xhat = run_sampler(model, batch, x0row, SamplerSpec::parse(inf_sampler));

        std::vector<char> excluded(static_cast<size_t>(ds.num_items), 0);
        for (i64 it : input) excluded[static_cast<size_t>(it)] = 1;
        Tensor xrow({cfg.hidden_dim}, std::vector<real>(xhat.v));
        auto scores = item_scores(xrow, model.p("emb.table").value, ds.num_items);
        auto top = rank_top_k(scores, excluded, inf_k);
        nlohmann::json items = nlohmann::json::array();
        for (i64 it : top)
            items.push_back({{"item", it}, {"score", scores[static_cast<size_t>(it)]}});
        std::cout << nlohmann::json{{"user", inf_user}, {"sampler", inf_sampler}, {"top", items}}.dump()
                  << "\n";
        return 0;
    }

    if (*bench_cmd) {
        Checkpoint ckpt = load_checkpoint(b_ckpt);
        SplitDataset ds = load_dataset(b_data);
        FaveModel model = model_from_checkpoint(ckpt);
        BenchResult out = bench(model, ds, parse_split(b_split), SamplerSpec::parse(b_sampler),
                                ckpt.config, b_warmup, b_samples);
        std::cout << to_json(out).dump() << "\n";
        return 0;
    }

    if (*dump) {
        Checkpoint ckpt = load_checkpoint(d_ckpt);
        SplitDataset ds = load_dataset(d_data);
        FaveModel model = model_from_checkpoint(ckpt);
        TrainConfig cfg = ckpt.config;
        std::ofstream out(d_out, std::ios::binary);
        if (!out) throw DataError("cannot write " + d_out);
        out << "user,step,t";
        for (i64 c = 0; c < cfg.hidden_dim; ++c) out << ",dim" << c;
        out << "\n";
        out.precision(17);
        for (i64 user : d_users) {
            const auto& u = find_user(ds, user);
            auto input = u.test_input();
            i64 win = std::min<i64>(static_cast<i64>(input.size()), cfg.max_len);
            Rng rng = Rng(cfg.seed ^ 0x5eedf00dULL).derive(static_cast<u64>(u.user) * 2 + 1);
            Tensor x0 = eval_prior(model, input.subspan(input.size() - static_cast<size_t>(win)),
                                   rng, cfg);
            Tensor x0row({1, cfg.hidden_dim}, std::vector<real>(x0.v));
            std::vector<BatchItem> rows = {{input, u.test_target(), u.train_prefix()}};
            Batch batch = make_batch(rows, ds.num_items, cfg.max_len);
            auto states = euler_trajectory(model, batch, x0row, d_steps);
            for (size_t k = 0; k < states.size(); ++k) {
                out << user << ',' << k << ','
                    << static_cast<double>(k) / static_cast<double>(d_steps);
                for (i64 c = 0; c < cfg.hidden_dim; ++c)
                    out << ',' << states[k].v[static_cast<size_t>(c)];
                out << "\n";
            }
        }
        return 0;
    }
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "fave: " << e.what() << "\n";
        return 1;
    }
}
