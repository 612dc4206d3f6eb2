#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "retrec/augmentation.hpp"
#include "retrec/dataset.hpp"
#include "retrec/encoder.hpp"
#include "retrec/fusion.hpp"
#include "retrec/retrieval.hpp"
#include "retrec/session_states.hpp"

namespace retrec {

struct MetricReport {
    std::map<std::string, double> values;
    int64_t n_users = 0;
    int64_t n_candidates = 0;  // candidate pool size for the retrieval self-task
};

// rank is 1-based.
int hr_at_k(int rank, int k);
// Single-relevant-item NDCG: 1/log2(rank+1) for rank <= k, else 0.
double ndcg_at_k(int rank, int k);

// 1-based rank of `target` under `probs` (1×|V|); ties resolve toward the
// lower item id.
int rank_of_target(const Matrix& probs, int32_t target);

struct RecommendationModel {
    const EncoderParams* query = nullptr;
    const FusionHead* head = nullptr;
    const Matrix* output_emb = nullptr;   // head table or tied encoder table
    const RetrievalIndex* index = nullptr;  // null disables retrieval (¬RA path)
    SessionStateCache* session_states = nullptr;
    FusionConfig fusion;
};

// Full probability distribution over items for one history prefix.
Matrix predict_for_prefix(const RecommendationModel& model,
                          const std::vector<int32_t>& prefix);

// Leave-one-out evaluation over all items: hr@5/10 and ndcg@5/10 averaged
// over users. Optionally dumps `user_id \t rank` lines as TSV.
MetricReport evaluate_recommendation(const RecommendationModel& model,
                                     const SplitSpec& split, bool test_split,
                                     const std::optional<std::string>& dump_ranks = {});

// Retrieval self-task: embed an augmented view of each user sequence with the
// key encoder, hide it among all browsing-session embeddings, query with the
// query-encoder embedding of the original sequence; hit iff the view ranks in
// the top k. identity_views swaps the augmentation for an exact copy.
MetricReport evaluate_retrieval(const EncoderParams& query_encoder,
                                const EncoderParams& key_encoder,
                                const std::vector<ItemSequence>& user_sequences,
                                const std::vector<ItemSequence>& browsing_sessions,
                                const AugmentationConfig& aug, uint64_t seed,
                                const std::vector<int>& k_list = {10, 20},
                                bool identity_views = false);

}  // namespace retrec
