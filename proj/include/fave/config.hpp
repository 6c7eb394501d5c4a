#pragma once

#include <string>

#include <json.hpp>

#include "fave/common.hpp"

namespace fave {

enum class TimeLaw { LogitNormal, Uniform };

inline TimeLaw parse_time_law(const std::string& s) {
    if (s == "logit_normal") return TimeLaw::LogitNormal;
    if (s == "uniform") return TimeLaw::Uniform;
    throw ConfigError("unknown time law '" + s + "'");
}

inline std::string time_law_name(TimeLaw law) {
    return law == TimeLaw::LogitNormal ? "logit_normal" : "uniform";
}

// Everything the two training stages and the evaluator need. Defaults
// follow the reference setup: d=128 with 4 heads, sequences capped at 50,
// batches of 512, and loss weights alpha=0.5, beta=0.2, gamma=0.1 with
// retention rho=0.75.
struct TrainConfig {
    i64 hidden_dim = 128;
    i64 heads = 4;
    i64 blocks = 2;
    i64 post_blocks = 1;   // fusion trunk depth; the pre-head state taps its output
    i64 ffn_mult = 2;
    i64 time_freqs = 64;
    i64 max_len = 50;
    i64 batch_size = 512;
    i64 microbatch = 64;
    i64 min_len = 5;

    double alpha = 0.5;
    double beta = 0.2;
    double gamma = 0.1;
    double rho = 0.75;
    double delta = 1.0;
    double p_end = 0.5;

    double lr = 1e-3;
    double warmup_frac = 0.05;
    double clip_norm = 5.0;
    i64 epochs_stage1 = 200;
    i64 epochs_stage2 = 100;
    i64 patience = 20;

    u64 seed = 42;
    std::string stage1_time_law = "logit_normal";
    std::string stage2_time_law = "uniform";
    bool detach_tangent = true;  // tangent fed to the JVP carries no gradient
    bool fd_jvp_check = false;   // cross-check the JVP against finite differences
    // Cross-check step. With time-embedding frequencies up to 1e4, the
    // classic 1e-4 step puts the difference a full radian apart and the
    // check would measure its own truncation error.
    double fd_eps = 1e-6;
    bool eval_full_retention = false;  // rho=1 at evaluation for reproducibility studies
    i64 eval_threads = 1;

    void validate() const {
        if (hidden_dim <= 0 || heads <= 0 || hidden_dim % heads != 0)
            throw ConfigError("hidden_dim must be a positive multiple of heads");
        if (blocks <= 0 || post_blocks <= 0 || max_len <= 0 || batch_size <= 0 || microbatch <= 0)
            throw ConfigError("architecture and batch sizes must be positive");
        if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("loss weights must be >= 0");
        if (rho < 0 || rho > 1) throw ConfigError("rho must lie in [0,1]");
        if (p_end < 0 || p_end > 1) throw ConfigError("p_end must lie in [0,1]");
        if (delta < 0) throw ConfigError("delta must be >= 0");
        if (min_len < 3) throw ConfigError("min_len must be >= 3");
        parse_time_law(stage1_time_law);
        parse_time_law(stage2_time_law);
    }

    TimeLaw time_law(int stage) const {
        return parse_time_law(stage == 1 ? stage1_time_law : stage2_time_law);
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return nlohmann::json{{"hidden_dim", c.hidden_dim},
                          {"heads", c.heads},
                          {"blocks", c.blocks},
                          {"post_blocks", c.post_blocks},
                          {"ffn_mult", c.ffn_mult},
                          {"time_freqs", c.time_freqs},
                          {"max_len", c.max_len},
                          {"batch_size", c.batch_size},
                          {"microbatch", c.microbatch},
                          {"min_len", c.min_len},
                          {"alpha", c.alpha},
                          {"beta", c.beta},
                          {"gamma", c.gamma},
                          {"rho", c.rho},
                          {"delta", c.delta},
                          {"p_end", c.p_end},
                          {"lr", c.lr},
                          {"warmup_frac", c.warmup_frac},
                          {"clip_norm", c.clip_norm},
                          {"epochs_stage1", c.epochs_stage1},
                          {"epochs_stage2", c.epochs_stage2},
                          {"patience", c.patience},
                          {"seed", c.seed},
                          {"stage1_time_law", c.stage1_time_law},
                          {"stage2_time_law", c.stage2_time_law},
                          {"detach_tangent", c.detach_tangent},
                          {"fd_jvp_check", c.fd_jvp_check},
                          {"fd_eps", c.fd_eps},
                          {"eval_full_retention", c.eval_full_retention},
                          {"eval_threads", c.eval_threads}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    nlohmann::json known = to_json(c);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    get("hidden_dim", c.hidden_dim);
    get("heads", c.heads);
    get("blocks", c.blocks);
    get("post_blocks", c.post_blocks);
    get("ffn_mult", c.ffn_mult);
    get("time_freqs", c.time_freqs);
    get("max_len", c.max_len);
    get("batch_size", c.batch_size);
    get("microbatch", c.microbatch);
    get("min_len", c.min_len);
    get("alpha", c.alpha);
    get("beta", c.beta);
    get("gamma", c.gamma);
    get("rho", c.rho);
    get("delta", c.delta);
    get("p_end", c.p_end);
    get("lr", c.lr);
    get("warmup_frac", c.warmup_frac);
    get("clip_norm", c.clip_norm);
    get("epochs_stage1", c.epochs_stage1);
    get("epochs_stage2", c.epochs_stage2);
    get("patience", c.patience);
    get("seed", c.seed);
    get("stage1_time_law", c.stage1_time_law);
    get("stage2_time_law", c.stage2_time_law);
    get("detach_tangent", c.detach_tangent);
    get("fd_jvp_check", c.fd_jvp_check);
    get("fd_eps", c.fd_eps);
    get("eval_full_retention", c.eval_full_retention);
    get("eval_threads", c.eval_threads);
    c.validate();
    return c;
}

// Canonical serialization used for checkpoint digests: nlohmann objects
// keep keys sorted, so identical configs serialize identically.
inline std::string canonical_config(const TrainConfig& c) { return to_json(c).dump(); }

}  // namespace fave
