#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace retrec {

// One implicit-feedback event from a raw log line.
struct InteractionEvent {
    std::string user_id;
    std::string item_key;
    int64_t timestamp = 0;
};

// Ordered item ids; the unit of both user histories and browsing sessions.
// Valid ids are [0, vocab_size]; id == vocab_size is the reserved mask token.
struct ItemSequence {
    std::vector<int32_t> items;

    int length() const { return static_cast<int>(items.size()); }
    bool empty() const { return items.empty(); }
};

// Gap-segmented per-user event run, still keyed by entity string. Timestamps
// are retained so segmentation can be re-applied (idempotence).
struct KeySession {
    std::string user_id;
    std::vector<std::string> keys;
    std::vector<int64_t> timestamps;
};

struct Catalog {
    std::map<std::string, int32_t> key_to_id;
    int32_t vocab_size = 0;  // max id + 1
};

struct Corpus {
    std::vector<std::pair<std::string, ItemSequence>> user_sequences;
    std::vector<ItemSequence> browsing_sessions;
    int32_t vocab_size = 0;

    const ItemSequence* find_user(const std::string& user_id) const;
};

struct EvalCase {
    std::vector<int32_t> prefix;
    int32_t target = -1;
};

// Leave-one-out split: test target is the last item, validation target the
// second-to-last, the train prefix is everything before those.
struct UserSplit {
    std::string user_id;
    std::vector<int32_t> train;
    EvalCase valid;
    EvalCase test;
};

struct SplitSpec {
    std::vector<UserSplit> users;
};

inline constexpr int kMinSequenceLen = 5;

// --- parsing ---

// One event per line: `user_id \t item_key \t unix_timestamp`.
std::vector<InteractionEvent> parse_events(std::istream& in);
std::vector<InteractionEvent> load_events(const std::string& path);

// One entry per line: `item_key \t item_id`. Duplicate keys are rejected.
Catalog parse_catalog(std::istream& in);
Catalog load_catalog(const std::string& path);

// --- preprocessing operations ---

// Sorts each user's events by timestamp (stable on ties), then starts a new
// session whenever consecutive timestamps differ by more than gap_seconds.
// Sessions shorter than min_len are dropped.
std::vector<KeySession> segment_sessions(std::vector<InteractionEvent> events,
                                         int64_t gap_seconds, int min_len);

// Maps entity keys to item ids, dropping unmatched entities, then re-applies
// the min-length filter.
std::vector<ItemSequence> align_items(const std::vector<KeySession>& sessions,
                                      const Catalog& catalog, int min_len);

// Keeps only users with at least min_interactions items.
Corpus filter_users(Corpus corpus, int min_interactions);

// Users shorter than 3 are excluded with a warning.
SplitSpec build_splits(const Corpus& corpus);

// Keeps the most recent max_len items.
ItemSequence truncate_recent(const ItemSequence& seq, int max_len);

// Full ingest: user sequences are per-user chronological histories aligned to
// the catalog; browsing sessions are gap-segmented runs of browsing_events
// (or of the same events when no separate browsing log is given).
Corpus preprocess_events(const std::vector<InteractionEvent>& events,
                         const std::optional<std::vector<InteractionEvent>>& browsing_events,
                         const Catalog& catalog, int64_t gap_seconds,
                         int min_len, int max_len);

// --- corpus persistence ---
// Directory layout: vocab.tsv (item_key \t item_id), users.jsonl, browsing.jsonl.

void save_corpus(const std::string& dir, const Corpus& corpus,
                 const std::vector<std::string>& vocab_keys);
Corpus load_corpus(const std::string& dir);
std::vector<std::string> load_vocab_keys(const std::string& dir);

// Validates corpus invariants (id ranges, min lengths); throws DataError.
void validate_corpus(const Corpus& corpus, int min_len);

}  // namespace retrec
