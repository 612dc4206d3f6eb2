#include "retrec/session_states.hpp"

#include <algorithm>

namespace retrec {

const Matrix& SessionStateCache::states(int64_t session_id) {
    auto it = cache_.find(session_id);
    if (it == cache_.end()) {
        const ItemSequence seq = index_->session_sequence(session_id);
        it = cache_.emplace(session_id, encode(key_, seq).per_position).first;
    }
    return it->second;
}

void SessionStateCache::prefetch(const std::vector<int64_t>& session_ids) {
    std::vector<int64_t> missing;
    for (int64_t id : session_ids)
        if (!cache_.count(id)) missing.push_back(id);
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    if (missing.empty()) return;

    std::vector<Matrix> computed(missing.size());
    const int64_t n = static_cast<int64_t>(missing.size());
#pragma omp parallel for schedule(static) if (n > 1)
    for (int64_t i = 0; i < n; ++i) {
        computed[i] = encode(key_, index_->session_sequence(missing[i])).per_position;
    }
    for (int64_t i = 0; i < n; ++i)
        cache_.emplace(missing[i], std::move(computed[i]));
}

}  // namespace retrec
