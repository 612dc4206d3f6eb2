#include "retrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "retrec/errors.hpp"
#include "retrec/kernels.hpp"

namespace retrec {

int hr_at_k(int rank, int k) {
    if (rank < 1) throw DataError("hr_at_k: rank must be >= 1");
    return rank <= k ? 1 : 0;
}

double ndcg_at_k(int rank, int k) {
    if (rank < 1) throw DataError("ndcg_at_k: rank must be >= 1");
    if (rank > k) return 0.0;
    return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

int rank_of_target(const Matrix& probs, int32_t target) {
    if (target < 0 || target >= probs.cols())
        throw DataError("rank_of_target: target out of range");
    const double* p = probs.row(0);
    const double pt = p[target];
    int rank = 1;
    for (int j = 0; j < probs.cols(); ++j) {
        if (j == target) continue;
        if (p[j] > pt || (p[j] == pt && j < target)) ++rank;
    }
    return rank;
}

Matrix predict_for_prefix(const RecommendationModel& model,
                          const std::vector<int32_t>& prefix) {
    const EncoderParams& q = *model.query;
    ItemSequence seq;
    seq.items = prefix;
    const SequenceEncoding enc = encode(q, truncate_recent(seq, q.cfg.max_len));
    Matrix hu(1, q.cfg.dim);
    kernels::l2_normalize(enc.pooled.row(0), hu.row(0), q.cfg.dim);

    std::vector<Matrix> states;
    std::vector<double> scores;
    if (model.index != nullptr && model.index->size() > 0) {
        const auto result = model.index->search(hu.row(0), model.fusion.k);
        states.reserve(result.hits.size());
        scores.reserve(result.hits.size());
        for (const auto& hit : result.hits) {
            states.push_back(model.session_states->states(hit.session_id));
            scores.push_back(hit.score);
        }
    }

    std::vector<Matrix> pooled;
    pooled.reserve(states.size());
    for (const auto& s : states)
        pooled.push_back(model.fusion.selector == SelectorKind::attentive
                             ? attentive_select(hu, s, *model.head).pooled
                             : mean_select(s).pooled);
    std::vector<double> applied = scores;
    if (model.fusion.normalize_scores && !scores.empty()) {
        Matrix sm(1, static_cast<int>(scores.size()));
        std::copy(scores.begin(), scores.end(), sm.row(0));
        kernels::softmax_rows(sm);
        applied.assign(sm.row(0), sm.row(0) + sm.cols());
    }
    const Matrix context = aggregate_context(applied, pooled, model.head->dim);
    return predict(hu, context, *model.head, *model.output_emb);
}

MetricReport evaluate_recommendation(const RecommendationModel& model,
                                     const SplitSpec& split, bool test_split,
                                     const std::optional<std::string>& dump_ranks) {
    MetricReport report;
    const int64_t n = static_cast<int64_t>(split.users.size());
    std::vector<int> ranks(n, 0);
    const int d = model.query->cfg.dim;

    // Phase 1: encode every prefix and run retrieval, so the shared state
    // cache can be filled before the fusion pass reads it concurrently.
    Matrix queries(static_cast<int>(n), d);
    std::vector<RetrievalResult> retrieved(n);
    const bool use_index = model.index != nullptr && model.index->size() > 0;
#pragma omp parallel for schedule(static) if (n > 1)
    for (int64_t i = 0; i < n; ++i) {
        const EvalCase& c = test_split ? split.users[i].test : split.users[i].valid;
        ItemSequence seq;
        seq.items = c.prefix;
        const auto enc =
            encode(*model.query, truncate_recent(seq, model.query->cfg.max_len));
        kernels::l2_normalize(enc.pooled.row(0), queries.row(i), d);
        if (use_index)
            retrieved[i] = model.index->search(queries.row(i), model.fusion.k);
    }
    if (use_index) {
        std::vector<int64_t> needed;
        for (const auto& r : retrieved)
            for (const auto& hit : r.hits) needed.push_back(hit.session_id);
        model.session_states->prefetch(needed);
    }

    // Phase 2: fusion and full-vocabulary ranking per user.
#pragma omp parallel for schedule(static) if (n > 1)
    for (int64_t i = 0; i < n; ++i) {
        const EvalCase& c = test_split ? split.users[i].test : split.users[i].valid;
        Matrix hu(1, d);
        std::copy(queries.row(i), queries.row(i) + d, hu.row(0));
        std::vector<Matrix> pooled;
        std::vector<double> scores;
        for (const auto& hit : retrieved[i].hits) {
            const Matrix& states = model.session_states->states(hit.session_id);
            pooled.push_back(model.fusion.selector == SelectorKind::attentive
                                 ? attentive_select(hu, states, *model.head).pooled
                                 : mean_select(states).pooled);
            scores.push_back(hit.score);
        }
        if (model.fusion.normalize_scores && !scores.empty()) {
            Matrix sm(1, static_cast<int>(scores.size()));
            std::copy(scores.begin(), scores.end(), sm.row(0));
            kernels::softmax_rows(sm);
            scores.assign(sm.row(0), sm.row(0) + sm.cols());
        }
        const Matrix context = aggregate_context(scores, pooled, model.head->dim);
        const Matrix probs = predict(hu, context, *model.head, *model.output_emb);
        ranks[i] = rank_of_target(probs, c.target);
    }

    double hr5 = 0, hr10 = 0, nd5 = 0, nd10 = 0;
    for (int64_t i = 0; i < n; ++i) {
        hr5 += hr_at_k(ranks[i], 5);
        hr10 += hr_at_k(ranks[i], 10);
        nd5 += ndcg_at_k(ranks[i], 5);
        nd10 += ndcg_at_k(ranks[i], 10);
    }
    report.n_users = n;
    if (n > 0) {
        report.values["hr@5"] = hr5 / n;
        report.values["hr@10"] = hr10 / n;
        report.values["ndcg@5"] = nd5 / n;
        report.values["ndcg@10"] = nd10 / n;
    }
    if (dump_ranks) {
        std::ofstream os(*dump_ranks, std::ios::trunc);
        if (!os) throw DataError("cannot open rank dump: " + *dump_ranks);
        for (int64_t i = 0; i < n; ++i)
            os << split.users[i].user_id << '\t' << ranks[i] << '\n';
    }
    return report;
}

MetricReport evaluate_retrieval(const EncoderParams& query_encoder,
                                const EncoderParams& key_encoder,
                                const std::vector<ItemSequence>& user_sequences,
                                const std::vector<ItemSequence>& browsing_sessions,
                                const AugmentationConfig& aug, uint64_t seed,
                                const std::vector<int>& k_list,
                                bool identity_views) {
    const int d = key_encoder.cfg.dim;
    const int64_t n_distract = static_cast<int64_t>(browsing_sessions.size());

    // Distractor embeddings under the key encoder.
    Matrix distractors(static_cast<int>(n_distract), d);
#pragma omp parallel for schedule(static) if (n_distract > 1)
    for (int64_t i = 0; i < n_distract; ++i) {
        const auto enc = encode(
            key_encoder, truncate_recent(browsing_sessions[i], key_encoder.cfg.max_len));
        kernels::l2_normalize(enc.pooled.row(0), distractors.row(i), d);
    }

    const int64_t n_users = static_cast<int64_t>(user_sequences.size());
    std::vector<int64_t> ranks(n_users, 0);
#pragma omp parallel for schedule(static) if (n_users > 1)
    for (int64_t u = 0; u < n_users; ++u) {
        const ItemSequence seq =
            truncate_recent(user_sequences[u], key_encoder.cfg.max_len);
        Rng rng(Rng::derive(seed, 0xeaa0 + static_cast<uint64_t>(u)));
        const ItemSequence view =
            identity_views
                ? seq
                : sample_view(seq, aug, key_encoder.cfg.mask_id(), rng);

        std::vector<double> q(d), v(d);
        const auto qe = encode(query_encoder, seq);
        kernels::l2_normalize(qe.pooled.row(0), q.data(), d);
        const auto ve = encode(key_encoder, view);
        kernels::l2_normalize(ve.pooled.row(0), v.data(), d);

        const double target_score = dot(q.data(), v.data(), d);
        int64_t rank = 1;
        for (int64_t i = 0; i < n_distract; ++i) {
            // Ties count against the planted view.
            if (dot(q.data(), distractors.row(i), d) >= target_score) ++rank;
        }
        ranks[u] = rank;
    }

    MetricReport report;
    report.n_users = n_users;
    report.n_candidates = n_distract + 1;
    for (int k : k_list) {
        double hits = 0;
        for (int64_t u = 0; u < n_users; ++u)
            if (ranks[u] <= k) hits += 1.0;
        report.values["hr@" + std::to_string(k)] = n_users > 0 ? hits / n_users : 0.0;
    }
    return report;
}

}  // namespace retrec
