#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fave/rng.hpp"
#include "fave/tensor.hpp"

namespace fave {

// One (user, item, timestamp) event, already remapped to dense indices.
struct Interaction {
    i64 user;
    i64 item;
    i64 time;
};

struct InteractionLog {
    std::vector<Interaction> records;
    i64 num_users = 0;
    i64 num_items = 0;
    std::vector<i64> user_ids;  // dense -> original
    std::vector<i64> item_ids;  // dense -> original
};

enum class Column { User, Item, Time, Skip };

inline std::vector<Column> parse_columns(const std::string& spec) {
    std::vector<Column> cols;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "user") cols.push_back(Column::User);
        else if (tok == "item") cols.push_back(Column::Item);
        else if (tok == "time") cols.push_back(Column::Time);
        else if (tok == "skip") cols.push_back(Column::Skip);
        else throw ConfigError("unknown column role '" + tok + "'");
    }
    auto count = [&](Column c) { return std::count(cols.begin(), cols.end(), c); };
    if (count(Column::User) != 1 || count(Column::Item) != 1 || count(Column::Time) != 1)
        throw ConfigError("column spec must name user, item and time exactly once");
    return cols;
}

// Tab/whitespace separated interaction log. Ids are remapped to dense
// indices in order of first appearance, which makes the result a pure
// function of the input bytes.
inline InteractionLog ingest_tsv(const std::string& path,
                                 const std::string& columns = "user,item,time") {
    std::vector<Column> cols = parse_columns(columns);
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);

    InteractionLog log;
    std::unordered_map<i64, i64> umap, imap;
    std::string line;
    i64 lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        i64 user = -1, item = -1, time = -1;
        for (Column role : cols) {
            i64 field;
            if (!(ls >> field))
                throw DataError("parse error at line " + std::to_string(lineno) + ": '" + line + "'");
            switch (role) {
                case Column::User: user = field; break;
                case Column::Item: item = field; break;
                case Column::Time: time = field; break;
                case Column::Skip: break;
            }
        }
        auto dense = [](std::unordered_map<i64, i64>& m, std::vector<i64>& rev, i64 orig) {
            auto it = m.find(orig);
            if (it != m.end()) return it->second;
            i64 id = static_cast<i64>(rev.size());
            m.emplace(orig, id);
            rev.push_back(orig);
            return id;
        };
        log.records.push_back({dense(umap, log.user_ids, user), dense(imap, log.item_ids, item), time});
    }
    if (log.records.empty()) throw DataError("empty interaction file " + path);
    log.num_users = static_cast<i64>(log.user_ids.size());
    log.num_items = static_cast<i64>(log.item_ids.size());
    return log;
}

// Chronological per-user sequence; ties stay in file order.
struct UserSequence {
    i64 user;
    std::vector<i64> items;
};

inline std::vector<UserSequence> build_sequences(const InteractionLog& log) {
    std::vector<std::vector<std::pair<i64, i64>>> per_user(static_cast<size_t>(log.num_users));
    for (const auto& r : log.records) per_user[static_cast<size_t>(r.user)].push_back({r.time, r.item});
    std::vector<UserSequence> out;
    for (i64 u = 0; u < log.num_users; ++u) {
        auto& evs = per_user[static_cast<size_t>(u)];
        std::stable_sort(evs.begin(), evs.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        UserSequence s{u, {}};
        s.items.reserve(evs.size());
        for (auto& [t, i] : evs) s.items.push_back(i);
        out.push_back(std::move(s));
    }
    return out;
}

// Leave-one-out views over each retained user's sequence: the last item is
// the test target, the second-to-last the validation target, and the rest
// is the training prefix.
struct SplitDataset {
    struct UserSplit {
        i64 user;
        std::vector<i64> items;  // full chronological sequence

        std::span<const i64> train_prefix() const {
            return {items.data(), items.size() - 2};
        }
        std::span<const i64> valid_input() const { return train_prefix(); }
        i64 valid_target() const { return items[items.size() - 2]; }
        std::span<const i64> test_input() const { return {items.data(), items.size() - 1}; }
        i64 test_target() const { return items.back(); }
    };

    std::vector<UserSplit> users;
    i64 num_items = 0;
    i64 min_len = 0;
};

inline SplitDataset build_splits(const InteractionLog& log, i64 min_len = 5) {
    if (min_len < 3) throw DataError("min_len must be >= 3");
    SplitDataset ds;
    ds.num_items = log.num_items;
    ds.min_len = min_len;
    for (auto& s : build_sequences(log)) {
        if (static_cast<i64>(s.items.size()) < min_len) continue;
        ds.users.push_back({s.user, std::move(s.items)});
    }
    if (ds.users.empty()) throw DataError("no user meets the minimum sequence length");
    return ds;
}

// Binary membership over the catalog for a user's training prefix.
inline Tensor interaction_vector(std::span<const i64> prefix, i64 num_items) {
    Tensor a({num_items});
    for (i64 it : prefix) a.v[static_cast<size_t>(it)] = 1;
    return a;
}

// Right-aligned padded batch. The padding id is one past the real items.
struct Batch {
    i64 max_len = 0;
    i64 pad_id = 0;
    std::vector<i64> seq;      // [B, L] row-major
    Tensor mask;               // [B, L] 1 on real positions
    std::vector<i64> targets;  // [B]
    Tensor interactions;       // [B, |I|]

    i64 size() const { return static_cast<i64>(targets.size()); }
    std::span<const i64> row(i64 b) const { return {seq.data() + b * max_len, static_cast<size_t>(max_len)}; }
};

namespace detail {
inline void pad_into(Batch& batch, i64 b, std::span<const i64> items) {
    i64 L = batch.max_len;
    i64 n = std::min<i64>(static_cast<i64>(items.size()), L);
    std::span<const i64> recent = items.subspan(items.size() - static_cast<size_t>(n));
    for (i64 j = 0; j < L - n; ++j) {
        batch.seq[static_cast<size_t>(b * L + j)] = batch.pad_id;
        batch.mask.v[static_cast<size_t>(b * L + j)] = 0;
    }
    for (i64 j = 0; j < n; ++j) {
        batch.seq[static_cast<size_t>(b * L + L - n + j)] = recent[static_cast<size_t>(j)];
        batch.mask.v[static_cast<size_t>(b * L + L - n + j)] = 1;
    }
}
}  // namespace detail

// (input items, target, interaction prefix) triples to batch together.
struct BatchItem {
    std::span<const i64> input;
    i64 target;
    std::span<const i64> prefix;  // source of the interaction vector
};

inline Batch make_batch(const std::vector<BatchItem>& rows, i64 num_items, i64 max_len) {
    Batch batch;
    batch.max_len = max_len;
    batch.pad_id = num_items;
    i64 B = static_cast<i64>(rows.size());
    batch.seq.resize(static_cast<size_t>(B * max_len));
    batch.mask = Tensor({B, max_len});
    batch.targets.resize(static_cast<size_t>(B));
    batch.interactions = Tensor({B, num_items});
    for (i64 b = 0; b < B; ++b) {
        const BatchItem& it = rows[static_cast<size_t>(b)];
        if (it.input.empty()) throw DataError("batch row with empty input sequence");
        if (it.target < 0 || it.target >= num_items) throw DataError("target item out of range");
        detail::pad_into(batch, b, it.input);
        batch.targets[static_cast<size_t>(b)] = it.target;
        Tensor a = interaction_vector(it.prefix, num_items);
        std::copy(a.v.begin(), a.v.end(), batch.interactions.v.begin() + b * num_items);
    }
    return batch;
}

// One next-item training example: predict prefix[cut] from prefix[0..cut).
struct TrainInstance {
    i64 user_index;  // index into SplitDataset.users
    i64 cut;
};

inline std::vector<TrainInstance> train_instances(const SplitDataset& ds) {
    std::vector<TrainInstance> out;
    for (size_t ui = 0; ui < ds.users.size(); ++ui) {
        i64 n = static_cast<i64>(ds.users[ui].train_prefix().size());
        for (i64 cut = 1; cut < n; ++cut) out.push_back({static_cast<i64>(ui), cut});
    }
    return out;
}

inline Batch make_train_batch(const SplitDataset& ds, std::span<const TrainInstance> insts,
                              i64 max_len) {
    std::vector<BatchItem> rows;
    rows.reserve(insts.size());
    for (const auto& inst : insts) {
        const auto& u = ds.users[static_cast<size_t>(inst.user_index)];
        auto prefix = u.train_prefix();
        rows.push_back({prefix.subspan(0, static_cast<size_t>(inst.cut)),
                        prefix[static_cast<size_t>(inst.cut)], prefix});
    }
    return make_batch(rows, ds.num_items, max_len);
}

enum class EvalSplit { Valid, Test };

inline Batch make_eval_batch(const SplitDataset& ds, std::span<const i64> user_indices,
                             EvalSplit which, i64 max_len) {
    std::vector<BatchItem> rows;
    rows.reserve(user_indices.size());
    for (i64 ui : user_indices) {
        const auto& u = ds.users[static_cast<size_t>(ui)];
        if (which == EvalSplit::Valid)
            rows.push_back({u.valid_input(), u.valid_target(), u.train_prefix()});
        else
            rows.push_back({u.test_input(), u.test_target(), u.train_prefix()});
    }
    return make_batch(rows, ds.num_items, max_len);
}

// ---- on-disk dataset directory -------------------------------------------

// manifest.txt: one line per user "user i1 i2 ... | valid | test".
inline void write_dataset(const std::string& dir, const SplitDataset& ds,
                          const InteractionLog* log = nullptr) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir + "/manifest.txt", std::ios::binary);
        if (!out) throw DataError("cannot write " + dir + "/manifest.txt");
        for (const auto& u : ds.users) {
            out << u.user;
            for (i64 it : u.train_prefix()) out << ' ' << it;
            out << " | " << u.valid_target() << " | " << u.test_target() << '\n';
        }
    }
    {
        std::ofstream out(dir + "/meta.json", std::ios::binary);
        out << "{\"users\":" << ds.users.size() << ",\"items\":" << ds.num_items
            << ",\"min_len\":" << ds.min_len << "}\n";
    }
    if (log) {
        std::ofstream um(dir + "/user_map.tsv", std::ios::binary);
        for (size_t i = 0; i < log->user_ids.size(); ++i) um << i << '\t' << log->user_ids[i] << '\n';
        std::ofstream im(dir + "/item_map.tsv", std::ios::binary);
        for (size_t i = 0; i < log->item_ids.size(); ++i) im << i << '\t' << log->item_ids[i] << '\n';
    }
}

inline SplitDataset load_dataset(const std::string& dir) {
    std::ifstream meta(dir + "/meta.json");
    if (!meta) throw DataError("cannot open " + dir + "/meta.json");
    std::string mtext((std::istreambuf_iterator<char>(meta)), std::istreambuf_iterator<char>());
    auto grab = [&](const std::string& key) {
        auto pos = mtext.find("\"" + key + "\":");
        if (pos == std::string::npos) throw DataError("meta.json missing " + key);
        return std::stoll(mtext.substr(pos + key.size() + 3));
    };
    SplitDataset ds;
    ds.num_items = grab("items");
    ds.min_len = grab("min_len");

    std::ifstream in(dir + "/manifest.txt");
    if (!in) throw DataError("cannot open " + dir + "/manifest.txt");
    std::string line;
    i64 lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        SplitDataset::UserSplit u;
        if (!(ls >> u.user)) throw DataError("manifest parse error at line " + std::to_string(lineno));
        std::string tok;
        std::vector<i64> prefix;
        i64 valid = -1, test = -1;
        int section = 0;
        while (ls >> tok) {
            if (tok == "|") {
                ++section;
                continue;
            }
            i64 v = std::stoll(tok);
            if (section == 0) prefix.push_back(v);
            else if (section == 1) valid = v;
            else test = v;
        }
        if (section != 2 || valid < 0 || test < 0)
            throw DataError("manifest line " + std::to_string(lineno) + " lacks split markers");
        u.items = std::move(prefix);
        u.items.push_back(valid);
        u.items.push_back(test);
        ds.users.push_back(std::move(u));
    }
    if (ds.users.empty()) throw DataError("manifest has no users");
    return ds;
}

}  // namespace fave
