#include "retrec/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "retrec/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace retrec {

const ItemSequence* Corpus::find_user(const std::string& user_id) const {
    for (const auto& [uid, seq] : user_sequences)
        if (uid == user_id) return &seq;
    return nullptr;
}

namespace {

int64_t parse_i64(const std::string& s, const char* what, int line_no) {
    int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw DataError(std::string("bad ") + what + " at line " +
                        std::to_string(line_no) + ": '" + s + "'");
    return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t pos = line.find('\t', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

}  // namespace

std::vector<InteractionEvent> parse_events(std::istream& in) {
    std::vector<InteractionEvent> events;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_tabs(line);
        if (fields.size() != 3)
            throw DataError("expected 3 tab-separated fields at line " +
                            std::to_string(line_no));
        InteractionEvent ev;
        ev.user_id = fields[0];
        ev.item_key = fields[1];
        ev.timestamp = parse_i64(fields[2], "timestamp", line_no);
        if (ev.timestamp < 0)
            throw DataError("negative timestamp at line " + std::to_string(line_no));
        events.push_back(std::move(ev));
    }
    return events;
}

std::vector<InteractionEvent> load_events(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open events file: " + path);
    return parse_events(in);
}

Catalog parse_catalog(std::istream& in) {
    Catalog cat;
    std::string line;
    int line_no = 0;
    int32_t max_id = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_tabs(line);
        if (fields.size() != 2)
            throw DataError("expected 2 tab-separated fields at line " +
                            std::to_string(line_no));
        const int64_t id = parse_i64(fields[1], "item id", line_no);
        if (id < 0) throw DataError("negative item id at line " + std::to_string(line_no));
        auto [it, inserted] = cat.key_to_id.emplace(fields[0], static_cast<int32_t>(id));
        if (!inserted)
            throw DataError("duplicate catalog key '" + fields[0] + "' at line " +
                            std::to_string(line_no));
        max_id = std::max(max_id, static_cast<int32_t>(id));
    }
    cat.vocab_size = max_id + 1;
    return cat;
}

Catalog load_catalog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open catalog file: " + path);
    return parse_catalog(in);
}

std::vector<KeySession> segment_sessions(std::vector<InteractionEvent> events,
                                         int64_t gap_seconds, int min_len) {
    if (gap_seconds <= 0) throw ConfigError("gap_seconds must be positive");
    // Group by user preserving first-seen user order; stable-sort inside each
    // group so equal timestamps keep input order.
    std::vector<std::string> user_order;
    std::map<std::string, std::vector<InteractionEvent>> by_user;
    for (auto& ev : events) {
        auto it = by_user.find(ev.user_id);
        if (it == by_user.end()) {
            user_order.push_back(ev.user_id);
            it = by_user.emplace(ev.user_id, std::vector<InteractionEvent>{}).first;
        }
        it->second.push_back(std::move(ev));
    }
    std::vector<KeySession> sessions;
    for (const auto& uid : user_order) {
        auto& evs = by_user[uid];
        std::stable_sort(evs.begin(), evs.end(),
                         [](const InteractionEvent& a, const InteractionEvent& b) {
                             return a.timestamp < b.timestamp;
                         });
        KeySession cur;
        cur.user_id = uid;
        auto flush = [&]() {
            if (static_cast<int>(cur.keys.size()) >= min_len)
                sessions.push_back(cur);
            cur.keys.clear();
            cur.timestamps.clear();
        };
        for (size_t i = 0; i < evs.size(); ++i) {
            if (!cur.timestamps.empty() &&
                evs[i].timestamp - cur.timestamps.back() > gap_seconds)
                flush();
            cur.keys.push_back(evs[i].item_key);
            cur.timestamps.push_back(evs[i].timestamp);
        }
        flush();
    }
    return sessions;
}

std::vector<ItemSequence> align_items(const std::vector<KeySession>& sessions,
                                      const Catalog& catalog, int min_len) {
    std::vector<ItemSequence> out;
    for (const auto& s : sessions) {
        ItemSequence seq;
        for (const auto& key : s.keys) {
            auto it = catalog.key_to_id.find(key);
            if (it != catalog.key_to_id.end()) seq.items.push_back(it->second);
        }
        if (seq.length() >= min_len) out.push_back(std::move(seq));
    }
    return out;
}

Corpus filter_users(Corpus corpus, int min_interactions) {
    if (min_interactions < 1) throw ConfigError("min_interactions must be >= 1");
    std::vector<std::pair<std::string, ItemSequence>> kept;
    for (auto& entry : corpus.user_sequences)
        if (entry.second.length() >= min_interactions)
            kept.push_back(std::move(entry));
    if (kept.empty() && !corpus.user_sequences.empty())
        std::cerr << "warning: all users below min interaction threshold "
                  << min_interactions << "\n";
    corpus.user_sequences = std::move(kept);
    return corpus;
}

SplitSpec build_splits(const Corpus& corpus) {
    SplitSpec spec;
    for (const auto& [uid, seq] : corpus.user_sequences) {
        const int l = seq.length();
        if (l < 3) {
            std::cerr << "warning: user '" << uid << "' has " << l
                      << " interactions, excluded from splits\n";
            continue;
        }
        UserSplit us;
        us.user_id = uid;
        us.train.assign(seq.items.begin(), seq.items.end() - 2);
        us.valid.prefix = us.train;
        us.valid.target = seq.items[l - 2];
        us.test.prefix.assign(seq.items.begin(), seq.items.end() - 1);
        us.test.target = seq.items[l - 1];
        spec.users.push_back(std::move(us));
    }
    return spec;
}

ItemSequence truncate_recent(const ItemSequence& seq, int max_len) {
    if (seq.length() <= max_len) return seq;
    ItemSequence out;
    out.items.assign(seq.items.end() - max_len, seq.items.end());
    return out;
}

Corpus preprocess_events(const std::vector<InteractionEvent>& events,
                         const std::optional<std::vector<InteractionEvent>>& browsing_events,
                         const Catalog& catalog, int64_t gap_seconds,
                         int min_len, int max_len) {
    Corpus corpus;
    corpus.vocab_size = catalog.vocab_size;

    // User sequences: chronological aligned history per user.
    std::vector<std::string> user_order;
    std::map<std::string, std::vector<InteractionEvent>> by_user;
    for (const auto& ev : events) {
        auto it = by_user.find(ev.user_id);
        if (it == by_user.end()) {
            user_order.push_back(ev.user_id);
            it = by_user.emplace(ev.user_id, std::vector<InteractionEvent>{}).first;
        }
        it->second.push_back(ev);
    }
    for (const auto& uid : user_order) {
        auto& evs = by_user[uid];
        std::stable_sort(evs.begin(), evs.end(),
                         [](const InteractionEvent& a, const InteractionEvent& b) {
                             return a.timestamp < b.timestamp;
                         });
        ItemSequence seq;
        for (const auto& ev : evs) {
            auto it = catalog.key_to_id.find(ev.item_key);
            if (it != catalog.key_to_id.end()) seq.items.push_back(it->second);
        }
        corpus.user_sequences.emplace_back(uid, truncate_recent(seq, max_len));
    }
    corpus = filter_users(std::move(corpus), min_len);

    // Browsing sessions: gap-segmented, aligned, anonymized.
    const auto& src = browsing_events ? *browsing_events : events;
    auto sessions = segment_sessions(src, gap_seconds, min_len);
    for (auto& seq : align_items(sessions, catalog, min_len))
        corpus.browsing_sessions.push_back(truncate_recent(seq, max_len));
    return corpus;
}

void save_corpus(const std::string& dir, const Corpus& corpus,
                 const std::vector<std::string>& vocab_keys) {
    if (static_cast<int32_t>(vocab_keys.size()) != corpus.vocab_size)
        throw DataError("vocab keys size does not match vocab_size");
    fs::create_directories(dir);
    {
        std::ofstream os(fs::path(dir) / "vocab.tsv", std::ios::trunc);
        if (!os) throw DataError("cannot write vocab.tsv in " + dir);
        for (size_t i = 0; i < vocab_keys.size(); ++i)
            os << vocab_keys[i] << '\t' << i << '\n';
    }
    {
        std::ofstream os(fs::path(dir) / "users.jsonl", std::ios::trunc);
        if (!os) throw DataError("cannot write users.jsonl in " + dir);
        for (const auto& [uid, seq] : corpus.user_sequences) {
            json j;
            j["user_id"] = uid;
            j["items"] = seq.items;
            os << j.dump() << '\n';
        }
    }
    {
        std::ofstream os(fs::path(dir) / "browsing.jsonl", std::ios::trunc);
        if (!os) throw DataError("cannot write browsing.jsonl in " + dir);
        for (const auto& seq : corpus.browsing_sessions) {
            json j;
            j["items"] = seq.items;
            os << j.dump() << '\n';
        }
    }
}

std::vector<std::string> load_vocab_keys(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "vocab.tsv");
    if (!is) throw DataError("cannot open vocab.tsv in " + dir);
    std::vector<std::pair<int32_t, std::string>> entries;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = split_tabs(line);
        if (fields.size() != 2)
            throw DataError("bad vocab.tsv line " + std::to_string(line_no));
        entries.emplace_back(
            static_cast<int32_t>(parse_i64(fields[1], "vocab id", line_no)),
            fields[0]);
    }
    std::sort(entries.begin(), entries.end());
    std::vector<std::string> keys(entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].first != static_cast<int32_t>(i))
            throw DataError("vocab.tsv ids are not dense in " + dir);
        keys[i] = entries[i].second;
    }
    return keys;
}

Corpus load_corpus(const std::string& dir) {
    Corpus corpus;
    corpus.vocab_size = static_cast<int32_t>(load_vocab_keys(dir).size());

    auto load_jsonl = [&](const std::string& name, auto&& per_line) {
        std::ifstream is(fs::path(dir) / name);
        if (!is) throw DataError("cannot open " + name + " in " + dir);
        std::string line;
        int line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty()) continue;
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded())
                throw DataError(name + " line " + std::to_string(line_no) +
                                ": invalid JSON");
            per_line(j, line_no);
        }
    };

    load_jsonl("users.jsonl", [&](const json& j, int line_no) {
        ItemSequence seq;
        seq.items = j.at("items").get<std::vector<int32_t>>();
        corpus.user_sequences.emplace_back(j.at("user_id").get<std::string>(),
                                           std::move(seq));
        (void)line_no;
    });
    load_jsonl("browsing.jsonl", [&](const json& j, int line_no) {
        ItemSequence seq;
        seq.items = j.at("items").get<std::vector<int32_t>>();
        corpus.browsing_sessions.push_back(std::move(seq));
        (void)line_no;
    });
    return corpus;
}

void validate_corpus(const Corpus& corpus, int min_len) {
    auto check_seq = [&](const ItemSequence& seq, const std::string& what) {
        if (seq.length() < min_len)
            throw DataError(what + " shorter than " + std::to_string(min_len));
        for (int32_t id : seq.items)
            if (id < 0 || id >= corpus.vocab_size)
                throw DataError(what + " has item id " + std::to_string(id) +
                                " outside [0, " + std::to_string(corpus.vocab_size) + ")");
    };
    for (const auto& [uid, seq] : corpus.user_sequences)
        check_seq(seq, "user sequence '" + uid + "'");
    for (size_t i = 0; i < corpus.browsing_sessions.size(); ++i)
        check_seq(corpus.browsing_sessions[i],
                  "browsing session " + std::to_string(i));
}

}  // namespace retrec
