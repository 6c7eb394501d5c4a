#pragma once

#include <numeric>

#include "fave/data.hpp"
#include "fave/rng.hpp"

namespace fave {

// Deterministic-transition corpus: every user walks a fixed random
// permutation of the catalog, starting from (user mod items). The next
// item is a pure function of the current one, so the task is memorizable.
inline InteractionLog synthetic_log(i64 users, i64 items, i64 len, u64 seed) {
    Rng rng(seed);
    std::vector<i64> perm(static_cast<size_t>(items));
    std::iota(perm.begin(), perm.end(), 0);
    for (i64 i = items - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.below(static_cast<u64>(i + 1)))]);

    InteractionLog log;
    log.num_users = users;
    log.num_items = items;
    for (i64 u = 0; u < users; ++u) {
        log.user_ids.push_back(u);
        i64 cur = u % items;
        for (i64 k = 0; k < len; ++k) {
            log.records.push_back({u, cur, k});
            cur = perm[static_cast<size_t>(cur)];
        }
    }
    for (i64 i = 0; i < items; ++i) log.item_ids.push_back(i);
    return log;
}

// Branching variant: each step follows one of two fixed permutations,
// chosen by a seeded coin. The next item is no longer a function of the
// history alone, so a model must lean on the flow state to pin it down.
inline InteractionLog synthetic_branching_log(i64 users, i64 items, i64 len, u64 seed) {
    Rng rng(seed);
    auto shuffled = [&] {
        std::vector<i64> p(static_cast<size_t>(items));
        std::iota(p.begin(), p.end(), 0);
        for (i64 i = items - 1; i > 0; --i)
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(rng.below(static_cast<u64>(i + 1)))]);
        return p;
    };
    std::vector<i64> pa = shuffled(), pb = shuffled();

    InteractionLog log;
    log.num_users = users;
    log.num_items = items;
    for (i64 u = 0; u < users; ++u) {
        log.user_ids.push_back(u);
        i64 cur = u % items;
        for (i64 k = 0; k < len; ++k) {
            log.records.push_back({u, cur, k});
            cur = rng.bernoulli(0.5) ? pa[static_cast<size_t>(cur)] : pb[static_cast<size_t>(cur)];
        }
    }
    for (i64 i = 0; i < items; ++i) log.item_ids.push_back(i);
    return log;
}

}  // namespace fave
