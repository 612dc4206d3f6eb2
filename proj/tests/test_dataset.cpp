#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "retrec/dataset.hpp"
#include "retrec/errors.hpp"
#include "retrec/rng.hpp"

using namespace retrec;
namespace fs = std::filesystem;

namespace {

InteractionEvent ev(const std::string& user, const std::string& key, int64_t ts) {
    return {user, key, ts};
}

constexpr int64_t kHour = 3600;

}  // namespace

TEST_CASE("segment_sessions: gap rule drops the short leading run") {
    // One user, timestamps [0,1h,2h, 9h,10h,11h,12h,13h], gap 4h, min_len 5:
    // the first three events form a length-3 session and are dropped.
    std::vector<InteractionEvent> events;
    for (int64_t h : {0, 1, 2, 9, 10, 11, 12, 13})
        events.push_back(ev("u", "k" + std::to_string(h), h * kHour));
    const auto sessions = segment_sessions(events, 4 * kHour, 5);
    REQUIRE(sessions.size() == 1);
    CHECK(sessions[0].keys ==
          std::vector<std::string>{"k9", "k10", "k11", "k12", "k13"});
}

TEST_CASE("segment_sessions: single event yields nothing") {
    const auto sessions = segment_sessions({ev("u", "a", 0)}, 4 * kHour, 5);
    CHECK(sessions.empty());
}

TEST_CASE("segment_sessions: six events a minute apart form one session") {
    std::vector<InteractionEvent> events;
    for (int i = 0; i < 6; ++i) events.push_back(ev("u", "k", i * 60));
    const auto sessions = segment_sessions(events, 4 * kHour, 5);
    REQUIRE(sessions.size() == 1);
    CHECK(sessions[0].keys.size() == 6);
}

TEST_CASE("segment_sessions: empty input, unsorted input, stable ties") {
    CHECK(segment_sessions({}, kHour, 5).empty());

    // Non-monotonic timestamps are sorted first, never an error.
    std::vector<InteractionEvent> events = {
        ev("u", "c", 200), ev("u", "a", 100), ev("u", "b", 100),
        ev("u", "d", 300), ev("u", "e", 400),
    };
    const auto sessions = segment_sessions(events, kHour, 5);
    REQUIRE(sessions.size() == 1);
    // a and b share a timestamp; input order breaks the tie.
    CHECK(sessions[0].keys == std::vector<std::string>{"a", "b", "c", "d", "e"});
}

TEST_CASE("segment_sessions properties: max gap bound and idempotence") {
    Rng rng(41);
    const int64_t gap = 2 * kHour;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<InteractionEvent> events;
        const int n_users = 1 + static_cast<int>(rng.uniform_int(3));
        for (int u = 0; u < n_users; ++u) {
            int64_t t = rng.uniform_int(1000);
            const int n = static_cast<int>(rng.uniform_int(30));
            for (int i = 0; i < n; ++i) {
                t += rng.uniform_int(3 * kHour);
                events.push_back(ev("u" + std::to_string(u),
                                    "k" + std::to_string(i), t));
            }
        }
        const auto sessions = segment_sessions(events, gap, 5);
        for (const auto& s : sessions) {
            REQUIRE(s.keys.size() >= 5);
            for (size_t i = 1; i < s.timestamps.size(); ++i)
                CHECK(s.timestamps[i] - s.timestamps[i - 1] <= gap);
        }
        // Re-segmenting the emitted sessions yields identical sessions.
        std::vector<InteractionEvent> replay;
        for (size_t si = 0; si < sessions.size(); ++si)
            for (size_t i = 0; i < sessions[si].keys.size(); ++i)
                replay.push_back(ev("s" + std::to_string(si), sessions[si].keys[i],
                                    sessions[si].timestamps[i]));
        const auto again = segment_sessions(replay, gap, 5);
        REQUIRE(again.size() == sessions.size());
        for (size_t si = 0; si < again.size(); ++si)
            CHECK(again[si].keys == sessions[si].keys);
    }
}

TEST_CASE("align_items: unmatched keys drop, short sessions drop") {
    Catalog cat;
    cat.key_to_id = {{"A", 0}, {"B", 1}, {"C", 2}, {"D", 3}, {"E", 4}};
    cat.vocab_size = 5;

    KeySession s1{"u", {"A", "B", "C", "D", "E", "F"}, {0, 1, 2, 3, 4, 5}};
    const auto aligned = align_items({s1}, cat, 5);
    REQUIRE(aligned.size() == 1);
    CHECK(aligned[0].items == std::vector<int32_t>{0, 1, 2, 3, 4});

    KeySession s2{"u", {"A", "B", "X", "Y", "Z"}, {0, 1, 2, 3, 4}};
    CHECK(align_items({s2}, cat, 5).empty());

    Catalog empty_cat;
    CHECK(align_items({s1}, empty_cat, 5).empty());
}

TEST_CASE("align_items: ids stay below vocab_size") {
    Catalog cat;
    cat.key_to_id = {{"A", 0}, {"B", 7}};
    cat.vocab_size = 8;
    KeySession s{"u", {"A", "B", "A", "B", "A"}, {0, 1, 2, 3, 4}};
    const auto aligned = align_items({s}, cat, 5);
    REQUIRE(aligned.size() == 1);
    for (int32_t id : aligned[0].items) CHECK(id < cat.vocab_size);
}

TEST_CASE("catalog parsing rejects duplicate keys") {
    std::istringstream ok("A\t0\nB\t1\n");
    const Catalog cat = parse_catalog(ok);
    CHECK(cat.vocab_size == 2);

    std::istringstream dup("A\t0\nA\t1\n");
    CHECK_THROWS_AS(parse_catalog(dup), DataError);
}

TEST_CASE("filter_users boundary behavior") {
    Corpus corpus;
    corpus.vocab_size = 10;
    ItemSequence four, five;
    four.items = {0, 1, 2, 3};
    five.items = {0, 1, 2, 3, 4};
    corpus.user_sequences = {{"four", four}, {"five", five}};
    const Corpus filtered = filter_users(corpus, 5);
    REQUIRE(filtered.user_sequences.size() == 1);
    CHECK(filtered.user_sequences[0].first == "five");

    Corpus all_short;
    all_short.vocab_size = 10;
    all_short.user_sequences = {{"a", four}};
    CHECK(filter_users(all_short, 5).user_sequences.empty());

    CHECK_THROWS_AS(filter_users(corpus, 0), ConfigError);
}

TEST_CASE("build_splits: protocol, boundaries, reconstruction") {
    Corpus corpus;
    corpus.vocab_size = 10;
    ItemSequence five, three, two;
    five.items = {1, 2, 3, 4, 5};
    three.items = {6, 7, 8};
    two.items = {1, 2};
    corpus.user_sequences = {{"five", five}, {"three", three}, {"two", two}};

    const SplitSpec spec = build_splits(corpus);
    REQUIRE(spec.users.size() == 2);  // "two" is excluded

    const UserSplit& u5 = spec.users[0];
    CHECK(u5.train == std::vector<int32_t>{1, 2, 3});
    CHECK(u5.valid.prefix == std::vector<int32_t>{1, 2, 3});
    CHECK(u5.valid.target == 4);
    CHECK(u5.test.prefix == std::vector<int32_t>{1, 2, 3, 4});
    CHECK(u5.test.target == 5);

    const UserSplit& u3 = spec.users[1];
    CHECK(u3.train.size() == 1);

    // Reconstruction: train + valid target + test target = original sequence.
    for (const auto& us : spec.users) {
        std::vector<int32_t> rebuilt = us.train;
        rebuilt.push_back(us.valid.target);
        rebuilt.push_back(us.test.target);
        const ItemSequence* orig = corpus.find_user(us.user_id);
        REQUIRE(orig != nullptr);
        CHECK(rebuilt == orig->items);
    }
}

TEST_CASE("truncate_recent keeps the most recent items") {
    ItemSequence seq;
    seq.items = {1, 2, 3, 4, 5, 6};
    CHECK(truncate_recent(seq, 4).items == std::vector<int32_t>{3, 4, 5, 6});
    CHECK(truncate_recent(seq, 10).items == seq.items);
}

TEST_CASE("event parsing validates fields") {
    std::istringstream ok("u1\tkey\t100\n# comment\nu2\tkey2\t200\n");
    const auto events = parse_events(ok);
    REQUIRE(events.size() == 2);
    CHECK(events[0].user_id == "u1");
    CHECK(events[1].timestamp == 200);

    std::istringstream bad_fields("u1\tkey\n");
    CHECK_THROWS_AS(parse_events(bad_fields), DataError);
    std::istringstream bad_ts("u1\tkey\tnope\n");
    CHECK_THROWS_AS(parse_events(bad_ts), DataError);
    std::istringstream neg_ts("u1\tkey\t-5\n");
    CHECK_THROWS_AS(parse_events(neg_ts), DataError);
}

TEST_CASE("corpus round trip through the directory format") {
    Corpus corpus;
    corpus.vocab_size = 6;
    ItemSequence a, b, s;
    a.items = {0, 1, 2, 3, 4};
    b.items = {5, 4, 3, 2, 1, 0};
    s.items = {1, 1, 2, 2, 3};
    corpus.user_sequences = {{"alice", a}, {"bob", b}};
    corpus.browsing_sessions = {s, b};
    const std::vector<std::string> keys = {"k0", "k1", "k2", "k3", "k4", "k5"};

    const std::string dir = "corpus_roundtrip_test";
    save_corpus(dir, corpus, keys);
    const Corpus loaded = load_corpus(dir);
    CHECK(loaded.vocab_size == corpus.vocab_size);
    REQUIRE(loaded.user_sequences.size() == 2);
    CHECK(loaded.user_sequences[0].first == "alice");
    CHECK(loaded.user_sequences[0].second.items == a.items);
    REQUIRE(loaded.browsing_sessions.size() == 2);
    CHECK(loaded.browsing_sessions[1].items == b.items);
    CHECK(load_vocab_keys(dir) == keys);
    CHECK_NOTHROW(validate_corpus(loaded, 5));
    fs::remove_all(dir);
}

TEST_CASE("preprocess_events builds user histories and browsing sessions") {
    Catalog cat;
    for (int i = 0; i < 8; ++i)
        cat.key_to_id["k" + std::to_string(i)] = static_cast<int32_t>(i);
    cat.vocab_size = 8;

    std::vector<InteractionEvent> events;
    // One user with six interactions split across two bursts.
    for (int i = 0; i < 3; ++i)
        events.push_back(ev("u1", "k" + std::to_string(i), i * 60));
    for (int i = 3; i < 6; ++i)
        events.push_back(ev("u1", "k" + std::to_string(i), 10 * kHour + i * 60));
    // A short user that gets filtered.
    events.push_back(ev("u2", "k0", 0));

    const Corpus corpus =
        preprocess_events(events, std::nullopt, cat, 4 * kHour, 5, 50);
    REQUIRE(corpus.user_sequences.size() == 1);
    CHECK(corpus.user_sequences[0].second.items ==
          std::vector<int32_t>{0, 1, 2, 3, 4, 5});
    // Neither 3-event burst survives the session min length.
    CHECK(corpus.browsing_sessions.empty());
}
