#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "retrec/encoder.hpp"
#include "retrec/retrieval.hpp"

namespace retrec {

// Memoized per-position key-encoder states for retrieved sessions. The
// encoder snapshot is fixed at construction (the one that built the index),
// so cached states never go stale while the index is in use.
class SessionStateCache {
public:
    SessionStateCache(EncoderParams key_snapshot, const RetrievalIndex* index)
        : key_(std::move(key_snapshot)), index_(index) {}

    const Matrix& states(int64_t session_id);

    // Computes any missing entries in parallel; subsequent states() calls for
    // these ids are read-only.
    void prefetch(const std::vector<int64_t>& session_ids);

    const EncoderParams& key_params() const { return key_; }

private:
    EncoderParams key_;
    const RetrievalIndex* index_;
    std::unordered_map<int64_t, Matrix> cache_;
};

}  // namespace retrec
