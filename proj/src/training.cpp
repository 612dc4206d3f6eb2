#include "retrec/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <utility>

#include <json.hpp>

#include "retrec/errors.hpp"
#include "retrec/kernels.hpp"
#include "retrec/session_states.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace retrec {

Variant parse_variant(const std::string& name) {
    if (name == "full") return Variant::full;
    if (name == "no_ra") return Variant::no_ra;
    if (name == "no_mc") return Variant::no_mc;
    if (name == "no_da") return Variant::no_da;
    if (name == "no_as") return Variant::no_as;
    throw ConfigError("unknown variant '" + name +
                      "' (expected full|no_ra|no_mc|no_da|no_as)");
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_ra: return "no_ra";
        case Variant::no_mc: return "no_mc";
        case Variant::no_da: return "no_da";
        case Variant::no_as: return "no_as";
    }
    return "full";
}

void Adam::attach(const std::vector<Matrix*>& params) {
    t_ = 0;
    m_.clear();
    v_.clear();
    for (const Matrix* p : params) {
        m_.emplace_back(p->rows(), p->cols());
        v_.emplace_back(p->rows(), p->cols());
    }
}

void Adam::step(const std::vector<Matrix*>& params,
                const std::vector<const Matrix*>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw TrainingError("Adam: parameter set changed after attach");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        double* p = params[i]->data();
        const double* g = grads[i]->data();
        double* m = m_[i].data();
        double* v = v_[i].data();
        const size_t n = params[i]->size();
        for (size_t j = 0; j < n; ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

bool EarlyStopper::observe(int epoch, double value) {
    if (value > best) {
        best = value;
        best_epoch = epoch;
        epochs_since_improvement = 0;
        return true;
    }
    ++epochs_since_improvement;
    return false;
}

void batched_encoder_backward(const EncoderParams& params,
                              const std::vector<EncoderCache>& caches,
                              const std::vector<Matrix>& upstreams,
                              EncoderParams& grads,
                              std::vector<EncoderParams>& scratch) {
    if (caches.size() != upstreams.size())
        throw TrainingError("batched backward: caches/upstreams mismatch");
    constexpr int kChunk = 8;
    const int count = static_cast<int>(caches.size());
    const int nchunks = (count + kChunk - 1) / kChunk;
    while (static_cast<int>(scratch.size()) < nchunks)
        scratch.emplace_back(params.cfg);
    for (int c = 0; c < nchunks; ++c) scratch[c].zero();

#pragma omp parallel for schedule(static) if (nchunks > 1)
    for (int c = 0; c < nchunks; ++c) {
        const int begin = c * kChunk;
        const int end = std::min(count, begin + kChunk);
        for (int i = begin; i < end; ++i)
            encode_backward(params, caches[i], upstreams[i], scratch[c]);
    }

    grads.zero();
    auto dst = grads.tensors();
    for (int c = 0; c < nchunks; ++c) {
        auto src = scratch[c].tensors();
        for (size_t t = 0; t < dst.size(); ++t)
            kernels::add_inplace(*dst[t], *src[t]);
    }
}

namespace {

// Pooled-embedding normalization with the pieces needed for backward.
struct NormalizedPool {
    Matrix z;                   // count×dim unit rows
    std::vector<double> norms;  // pre-normalization norms
};

NormalizedPool normalize_pooled(const std::vector<EncoderCache>& caches, int dim) {
    NormalizedPool out;
    const int count = static_cast<int>(caches.size());
    out.z.resize(count, dim);
    out.norms.resize(count);
    for (int i = 0; i < count; ++i) {
        const int len = static_cast<int>(caches[i].ids.size());
        out.norms[i] =
            kernels::l2_normalize(caches[i].out.row(len - 1), out.z.row(i), dim);
    }
    return out;
}

// dz (1×dim) -> upstream matrix on the cache's per-position output.
Matrix pooled_grad_upstream(const EncoderCache& cache, const double* z,
                            double norm, const double* dz, int dim) {
    Matrix d_pooled(1, dim);
    kernels::l2_normalize_backward(z, norm, dz, d_pooled.row(0), dim);
    return pooled_upstream(static_cast<int>(cache.ids.size()), d_pooled);
}

std::vector<std::vector<int32_t>> truncated_user_ids(const Corpus& corpus,
                                                     int max_len) {
    std::vector<std::vector<int32_t>> out;
    out.reserve(corpus.user_sequences.size());
    for (const auto& [uid, seq] : corpus.user_sequences)
        out.push_back(truncate_recent(seq, max_len).items);
    return out;
}

std::vector<ItemSequence> truncated_sessions(const Corpus& corpus, int max_len) {
    std::vector<ItemSequence> out;
    out.reserve(corpus.browsing_sessions.size());
    for (const auto& seq : corpus.browsing_sessions)
        out.push_back(truncate_recent(seq, max_len));
    return out;
}

void shuffle_indices(std::vector<int64_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
}

// Cycles browsing sessions in shuffled order for memory-bank refresh.
class KeyFeed {
public:
    KeyFeed(int64_t count, uint64_t seed) : rng_(seed), order_(count) {
        std::iota(order_.begin(), order_.end(), 0);
        shuffle_indices(order_, rng_);
    }
    int64_t next() {
        if (cursor_ == order_.size()) {
            cursor_ = 0;
            shuffle_indices(order_, rng_);
        }
        return order_[cursor_++];
    }

private:
    Rng rng_;
    std::vector<int64_t> order_;
    size_t cursor_ = 0;
};

// Encodes a batch of browsing sessions with the key encoder and enqueues the
// normalized pooled embeddings.
void refresh_bank(MemoryBank& bank, const EncoderParams& key,
                  const std::vector<ItemSequence>& sessions, KeyFeed& feed,
                  int count) {
    if (bank.capacity() == 0 || sessions.empty()) return;
    std::vector<int64_t> picks(count);
    for (int i = 0; i < count; ++i) picks[i] = feed.next();
    Matrix rows(count, key.cfg.dim);
#pragma omp parallel for schedule(static) if (count > 1)
    for (int i = 0; i < count; ++i) {
        const auto enc = encode(key, sessions[picks[i]]);
        kernels::l2_normalize(enc.pooled.row(0), rows.row(i), key.cfg.dim);
    }
    bank.enqueue(rows);
}

std::vector<std::vector<int32_t>> make_views(
    const std::vector<std::vector<int32_t>>& batch_ids,
    const AugmentationConfig& aug, int32_t mask_id, bool identity, Rng& rng) {
    const size_t n = batch_ids.size();
    std::vector<std::vector<int32_t>> views(2 * n);
    for (size_t i = 0; i < n; ++i) {
        ItemSequence seq;
        seq.items = batch_ids[i];
        if (identity) {
            views[i] = seq.items;
            views[n + i] = seq.items;
        } else {
            views[i] = sample_view(seq, aug, mask_id, rng).items;
            views[n + i] = sample_view(seq, aug, mask_id, rng).items;
        }
    }
    return views;
}

uint64_t mix3(uint64_t a, uint64_t b, uint64_t c) {
    return splitmix64(a * 0x9e3779b97f4a7c15ULL + b * 0x100000001b3ULL + c);
}

}  // namespace

Stage1Result pretrain_stage1(const Corpus& corpus, const ExperimentConfig& cfg,
                             Variant variant,
                             const std::optional<std::string>& checkpoint_dir) {
    if (corpus.user_sequences.empty())
        throw DataError("pretrain: corpus has no user sequences");
    if (corpus.browsing_sessions.empty())
        throw DataError("pretrain: corpus has no browsing sessions");
    const EncoderConfig ecfg = cfg.encoder_config(corpus.vocab_size);
    const AugmentationConfig aug = cfg.aug_config();
    aug.validate();

    Rng init_rng(Rng::derive(cfg.seed, 0x1a17));
    EncoderParams query(ecfg);
    query.init_random(init_rng);
    EncoderParams key = query;  // momentum twin starts as a copy

    const int bank_capacity = variant == Variant::no_mc ? 0 : cfg.cts_bank_size;
    MemoryBank bank(bank_capacity, ecfg.dim);

    Adam adam(cfg.train_lr, cfg.train_adam_beta1, cfg.train_adam_beta2,
              cfg.train_adam_eps);
    adam.attach(query.tensors());

    const auto user_ids = truncated_user_ids(corpus, ecfg.max_len);
    const auto sessions = truncated_sessions(corpus, ecfg.max_len);
    KeyFeed key_feed(static_cast<int64_t>(sessions.size()),
                     Rng::derive(cfg.seed, 0xfeed));
    Rng shuffle_rng(Rng::derive(cfg.seed, 0x0dd5));
    Rng aug_rng(Rng::derive(cfg.seed, 0xa760));

    Stage1Result result;
    std::vector<int64_t> order(user_ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<EncoderParams> scratch;
    EncoderParams grads(ecfg);

    const int n_batch = cfg.cts_batch_size;
    for (int epoch = 1; epoch <= cfg.train_stage1_epochs; ++epoch) {
        shuffle_indices(order, shuffle_rng);
        double epoch_loss = 0.0;
        int64_t steps = 0;
        for (size_t start = 0; start < order.size(); start += n_batch) {
            const int nb =
                static_cast<int>(std::min<size_t>(n_batch, order.size() - start));
            std::vector<std::vector<int32_t>> batch_ids(nb);
            for (int i = 0; i < nb; ++i) batch_ids[i] = user_ids[order[start + i]];
            auto views = make_views(batch_ids, aug, ecfg.mask_id(),
                                    variant == Variant::no_da, aug_rng);

            const int total = 2 * nb;
            std::vector<EncoderCache> caches(total);
#pragma omp parallel for schedule(static) if (total > 1)
            for (int i = 0; i < total; ++i) {
                Rng drop_rng(mix3(Rng::derive(cfg.seed, 0xd801),
                                  static_cast<uint64_t>(epoch) * 100003 + steps,
                                  static_cast<uint64_t>(i)));
                encode_forward(query, views[i], caches[i], &drop_rng);
            }
            const NormalizedPool pool = normalize_pooled(caches, ecfg.dim);
            Matrix za(nb, ecfg.dim), zb(nb, ecfg.dim);
            for (int i = 0; i < nb; ++i) {
                std::copy(pool.z.row(i), pool.z.row(i) + ecfg.dim, za.row(i));
                std::copy(pool.z.row(nb + i), pool.z.row(nb + i) + ecfg.dim,
                          zb.row(i));
            }
            InfoNceResult nce = info_nce_loss(za, zb, cfg.cts_tau, bank);
            if (!std::isfinite(nce.total))
                throw TrainingError("stage 1 diverged: non-finite contrastive loss at epoch " +
                                    std::to_string(epoch));
            const double scale = 1.0 / total;
            epoch_loss += nce.total * scale;
            ++steps;

            std::vector<Matrix> upstreams(total);
            std::vector<double> dz(ecfg.dim);
            for (int i = 0; i < total; ++i) {
                const double* g =
                    i < nb ? nce.grad_a.row(i) : nce.grad_b.row(i - nb);
                for (int j = 0; j < ecfg.dim; ++j) dz[j] = g[j] * scale;
                upstreams[i] = pooled_grad_upstream(caches[i], pool.z.row(i),
                                                    pool.norms[i], dz.data(),
                                                    ecfg.dim);
            }
            batched_encoder_backward(query, caches, upstreams, grads, scratch);
            const auto grad_ptrs = grads.tensors();
            adam.step(query.tensors(),
                      std::vector<const Matrix*>(grad_ptrs.begin(), grad_ptrs.end()));
            momentum_update(query, key, cfg.cts_momentum);
            refresh_bank(bank, key, sessions, key_feed, nb);
        }
        EpochStats stats;
        stats.epoch = epoch;
        stats.cts_loss = steps > 0 ? epoch_loss / static_cast<double>(steps) : 0.0;
        result.history.push_back(stats);
        if (checkpoint_dir) {
            fs::create_directories(*checkpoint_dir);
            save_checkpoint((fs::path(*checkpoint_dir) / "query.bin").string(), query);
            save_checkpoint((fs::path(*checkpoint_dir) / "key.bin").string(), key);
        }
    }
    result.query = std::move(query);
    result.key = std::move(key);
    return result;
}

namespace {

struct Stage2Example {
    int64_t split_user = 0;  // index into SplitSpec::users
    int prefix_len = 0;
};

}  // namespace

Stage2Result train_stage2(const Corpus& corpus, const RetrievalIndex* index,
                          const EncoderParams& query_init,
                          const EncoderParams& key_snapshot,
                          const ExperimentConfig& cfg, Variant variant) {
    const EncoderConfig ecfg = cfg.encoder_config(corpus.vocab_size);
    if (!(query_init.cfg == ecfg))
        throw ConfigError("stage 2: checkpoint encoder config mismatch");
    const AugmentationConfig aug = cfg.aug_config();
    const FusionConfig fusion_cfg = cfg.fusion_config();
    const bool use_index = variant != Variant::no_ra && index != nullptr &&
                           index->size() > 0;
    const SelectorKind selector = variant == Variant::no_as
                                      ? SelectorKind::mean
                                      : fusion_cfg.selector;

    EncoderParams query = query_init;
    EncoderParams key = key_snapshot;
    Rng head_rng(Rng::derive(cfg.seed, 0xbead));
    FusionHead head(ecfg.dim, corpus.vocab_size, fusion_cfg.tie_item_embeddings);
    head.init_random(head_rng);

    const int bank_capacity = variant == Variant::no_mc ? 0 : cfg.cts_bank_size;
    MemoryBank bank(bank_capacity, ecfg.dim);

    SessionStateCache state_cache(key_snapshot, index);

    const SplitSpec splits = build_splits(corpus);
    std::vector<Stage2Example> examples;
    for (size_t u = 0; u < splits.users.size(); ++u) {
        const auto& train = splits.users[u].train;
        for (int p = 1; p < static_cast<int>(train.size()); ++p)
            examples.push_back({static_cast<int64_t>(u), p});
    }
    if (examples.empty())
        throw DataError("stage 2: no training examples (all train prefixes too short)");

    std::vector<Matrix*> opt_params = query.tensors();
    for (Matrix* t : head.tensors()) opt_params.push_back(t);
    Adam adam(cfg.train_lr, cfg.train_adam_beta1, cfg.train_adam_beta2,
              cfg.train_adam_eps);
    adam.attach(opt_params);

    const auto sessions = truncated_sessions(corpus, ecfg.max_len);
    KeyFeed key_feed(static_cast<int64_t>(sessions.size()),
                     Rng::derive(cfg.seed, 0x2fee));
    Rng shuffle_rng(Rng::derive(cfg.seed, 0x20dd));
    Rng aug_rng(Rng::derive(cfg.seed, 0x2a27));

    EncoderParams enc_grads(ecfg);
    std::vector<EncoderParams> scratch;
    EarlyStopper stopper{cfg.train_patience};
    Stage2Result result;
    result.key_index = key_snapshot;

    std::vector<int64_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);

    const Matrix* output_emb =
        fusion_cfg.tie_item_embeddings ? &query.item_emb : &head.item_out;

    for (int epoch = 1; epoch <= cfg.train_epochs; ++epoch) {
        shuffle_indices(order, shuffle_rng);
        double epoch_cf = 0.0, epoch_cts = 0.0;
        int64_t steps = 0;
        for (size_t start = 0; start < order.size();
             start += cfg.train_batch_size) {
            const int nb = static_cast<int>(
                std::min<size_t>(cfg.train_batch_size, order.size() - start));

            // Assemble prefixes and CTS views.
            std::vector<std::vector<int32_t>> prefixes(nb);
            std::vector<int32_t> targets(nb);
            for (int i = 0; i < nb; ++i) {
                const Stage2Example& ex = examples[order[start + i]];
                const auto& train = splits.users[ex.split_user].train;
                std::vector<int32_t> prefix(train.begin(),
                                            train.begin() + ex.prefix_len);
                if (static_cast<int>(prefix.size()) > ecfg.max_len)
                    prefix.erase(prefix.begin(),
                                 prefix.end() - ecfg.max_len);
                prefixes[i] = std::move(prefix);
                targets[i] = train[ex.prefix_len];
            }
            auto views = make_views(prefixes, aug, ecfg.mask_id(),
                                    variant == Variant::no_da, aug_rng);

            // Forward: prefixes (for CF) and views (for CTS).
            std::vector<EncoderCache> prefix_caches(nb);
            std::vector<EncoderCache> view_caches(2 * nb);
#pragma omp parallel for schedule(static) if (nb > 1)
            for (int i = 0; i < 3 * nb; ++i) {
                Rng drop_rng(mix3(Rng::derive(cfg.seed, 0xd802),
                                  static_cast<uint64_t>(epoch) * 100003 + steps,
                                  static_cast<uint64_t>(i)));
                if (i < nb)
                    encode_forward(query, prefixes[i], prefix_caches[i], &drop_rng);
                else
                    encode_forward(query, views[i - nb], view_caches[i - nb],
                                   &drop_rng);
            }
            const NormalizedPool prefix_pool = normalize_pooled(prefix_caches, ecfg.dim);
            const NormalizedPool view_pool = normalize_pooled(view_caches, ecfg.dim);

            // Retrieval against the fixed index.
            std::vector<RetrievalResult> retrieved(nb);
            if (use_index) {
#pragma omp parallel for schedule(static) if (nb > 1)
                for (int i = 0; i < nb; ++i)
                    retrieved[i] = index->search(prefix_pool.z.row(i), fusion_cfg.k,
                                                 cfg.index_nprobe);
                std::vector<int64_t> needed;
                for (const auto& r : retrieved)
                    for (const auto& hit : r.hits) needed.push_back(hit.session_id);
                state_cache.prefetch(needed);
            }

            // Fusion forward + CF loss.
            std::vector<FusionCache> fusion_caches(nb);
            std::vector<Matrix> d_logits(nb);
            std::vector<double> cf_terms(nb, 0.0);
#pragma omp parallel for schedule(static) if (nb > 1)
            for (int i = 0; i < nb; ++i) {
                Matrix hu(1, ecfg.dim);
                std::copy(prefix_pool.z.row(i), prefix_pool.z.row(i) + ecfg.dim,
                          hu.row(0));
                std::vector<Matrix> states;
                std::vector<double> scores;
                for (const auto& hit : retrieved[i].hits) {
                    states.push_back(state_cache.states(hit.session_id));
                    scores.push_back(hit.score);
                }
                fusion_forward(head, *output_emb, hu, states, scores, selector,
                               fusion_cfg.normalize_scores, fusion_caches[i]);
                double p = fusion_caches[i].probs.at(0, targets[i]);
                if (p < 1e-12) p = 1e-12;
                cf_terms[i] = -std::log(p);
                // dL/dlogits for mean cross entropy.
                d_logits[i] = fusion_caches[i].probs;
                d_logits[i].at(0, targets[i]) -= 1.0;
                kernels::scale(d_logits[i], 1.0 / nb);
            }
            double cf_value = 0.0;
            for (double t : cf_terms) cf_value += t;
            cf_value /= nb;

            // Contrastive loss on the same batch.
            Matrix za(nb, ecfg.dim), zb(nb, ecfg.dim);
            for (int i = 0; i < nb; ++i) {
                std::copy(view_pool.z.row(i), view_pool.z.row(i) + ecfg.dim,
                          za.row(i));
                std::copy(view_pool.z.row(nb + i), view_pool.z.row(nb + i) + ecfg.dim,
                          zb.row(i));
            }
            InfoNceResult nce = info_nce_loss(za, zb, cfg.cts_tau, bank);
            const double cts_value = nce.total / (2.0 * nb);
            if (!std::isfinite(cts_value) || !std::isfinite(cf_value))
                throw TrainingError("stage 2 diverged: non-finite loss at epoch " +
                                    std::to_string(epoch));
            epoch_cf += cf_value;
            epoch_cts += cts_value;
            ++steps;

            // Backward: fusion (chunked), then encoders.
            constexpr int kChunk = 8;
            const int nchunks = (nb + kChunk - 1) / kChunk;
            std::vector<FusionGrads> fgrads(nchunks);
            std::vector<Matrix> prefix_upstreams(nb);
#pragma omp parallel for schedule(static) if (nchunks > 1)
            for (int c = 0; c < nchunks; ++c) {
                for (int i = c * kChunk; i < std::min(nb, (c + 1) * kChunk); ++i) {
                    fusion_backward(head, *output_emb, fusion_caches[i],
                                    d_logits[i], fgrads[c]);
                    Matrix d_hu = std::move(fgrads[c].d_hu);
                    // Retrieval scores depend on hu: score_j = hu · r_j.
                    for (size_t j = 0; j < fgrads[c].d_scores.size(); ++j) {
                        const double ds = fgrads[c].d_scores[j];
                        if (ds == 0.0) continue;
                        // Index rows are keyed by position; hits store ids.
                        const int64_t sid = retrieved[i].hits[j].session_id;
                        const float* r = index->vector(sid);
                        for (int col = 0; col < ecfg.dim; ++col)
                            d_hu.at(0, col) += ds * static_cast<double>(r[col]);
                    }
                    prefix_upstreams[i] = pooled_grad_upstream(
                        prefix_caches[i], prefix_pool.z.row(i),
                        prefix_pool.norms[i], d_hu.row(0), ecfg.dim);
                }
            }

            std::vector<Matrix> view_upstreams(2 * nb);
            const double cts_scale = 1.0 / (2.0 * nb);
            std::vector<double> dz(ecfg.dim);
            for (int i = 0; i < 2 * nb; ++i) {
                const double* g = i < nb ? nce.grad_a.row(i) : nce.grad_b.row(i - nb);
                for (int j = 0; j < ecfg.dim; ++j) dz[j] = g[j] * cts_scale;
                view_upstreams[i] = pooled_grad_upstream(
                    view_caches[i], view_pool.z.row(i), view_pool.norms[i],
                    dz.data(), ecfg.dim);
            }

            std::vector<EncoderCache> all_caches;
            all_caches.reserve(3 * nb);
            std::vector<Matrix> all_upstreams;
            all_upstreams.reserve(3 * nb);
            for (int i = 0; i < nb; ++i) {
                all_caches.push_back(std::move(prefix_caches[i]));
                all_upstreams.push_back(std::move(prefix_upstreams[i]));
            }
            for (int i = 0; i < 2 * nb; ++i) {
                all_caches.push_back(std::move(view_caches[i]));
                all_upstreams.push_back(std::move(view_upstreams[i]));
            }
            batched_encoder_backward(query, all_caches, all_upstreams, enc_grads,
                                     scratch);

            // Merge fusion gradients in fixed chunk order.
            FusionHead head_grads(ecfg.dim, corpus.vocab_size,
                                  fusion_cfg.tie_item_embeddings);
            Matrix out_emb_grad(output_emb->rows(), ecfg.dim);
            for (int c = 0; c < nchunks; ++c) {
                if (fgrads[c].head.dim == 0) continue;
                auto dst = head_grads.tensors();
                auto src = fgrads[c].head.tensors();
                for (size_t t = 0; t < dst.size(); ++t)
                    kernels::add_inplace(*dst[t], *src[t]);
                kernels::add_inplace(out_emb_grad, fgrads[c].d_output_emb);
            }
            if (fusion_cfg.tie_item_embeddings) {
                kernels::add_inplace(enc_grads.item_emb, out_emb_grad);
            } else {
                kernels::add_inplace(head_grads.item_out, out_emb_grad);
            }

            std::vector<const Matrix*> all_grads;
            for (const Matrix* t : enc_grads.tensors()) all_grads.push_back(t);
            FusionHead& hg = head_grads;
            for (Matrix* t : hg.tensors()) all_grads.push_back(t);
            adam.step(opt_params, all_grads);
            momentum_update(query, key, cfg.cts_momentum);
            refresh_bank(bank, key, sessions, key_feed, nb);
        }

        // Validation for early stopping.
        RecommendationModel model;
        model.query = &query;
        model.head = &head;
        model.output_emb = output_emb;
        model.index = use_index ? index : nullptr;
        model.session_states = &state_cache;
        model.fusion = fusion_cfg;
        model.fusion.selector = selector;
        const MetricReport valid = evaluate_recommendation(model, splits, false);
        const double ndcg10 =
            valid.values.count("ndcg@10") ? valid.values.at("ndcg@10") : 0.0;

        EpochStats stats;
        stats.epoch = epoch;
        stats.cf_loss = steps > 0 ? epoch_cf / static_cast<double>(steps) : 0.0;
        stats.cts_loss = steps > 0 ? epoch_cts / static_cast<double>(steps) : 0.0;
        stats.valid_ndcg10 = ndcg10;
        result.history.push_back(stats);

        if (stopper.observe(epoch, ndcg10)) {
            result.query = query;
            result.key = key;
            result.head = head;
        }
        if (stopper.should_stop()) break;
    }
    result.best_epoch = stopper.best_epoch;
    result.best_valid_ndcg10 = stopper.best;
    return result;
}

ExperimentResult run_experiment(const Corpus& corpus, const ExperimentConfig& cfg,
                                Variant variant, const std::string& workdir,
                                const Stage1Result* stage1_override) {
    fs::create_directories(workdir);
    Stage1Result local_stage1;
    const Stage1Result* stage1 = stage1_override;
    if (stage1 == nullptr) {
        local_stage1 = pretrain_stage1(corpus, cfg, variant, workdir);
        stage1 = &local_stage1;
    }

    ExperimentResult result;
    RetrievalIndex index;
    const RetrievalIndex* index_ptr = nullptr;
    if (variant != Variant::no_ra) {
        const IndexMode mode = cfg.index_mode == "clustered" ? IndexMode::clustered
                                                             : IndexMode::exact;
        index = RetrievalIndex::build(corpus.browsing_sessions, stage1->key, mode,
                                      cfg.index_nlist, cfg.seed);
        result.index_path = (fs::path(workdir) / "index.bin").string();
        index.save(result.index_path);
        index_ptr = &index;
    }

    result.stage2 =
        train_stage2(corpus, index_ptr, stage1->query, stage1->key, cfg, variant);

    ModelArtifacts artifacts;
    artifacts.query = result.stage2.query;
    artifacts.key = result.stage2.key;
    artifacts.key_index = result.stage2.key_index;
    artifacts.head = result.stage2.head;
    artifacts.has_head = true;
    save_model_dir(workdir, artifacts, cfg, corpus.vocab_size);

    const FusionConfig fusion_cfg = cfg.fusion_config();
    SessionStateCache state_cache(result.stage2.key_index, index_ptr);
    RecommendationModel model;
    model.query = &result.stage2.query;
    model.head = &result.stage2.head;
    model.output_emb = fusion_cfg.tie_item_embeddings
                           ? &result.stage2.query.item_emb
                           : &result.stage2.head.item_out;
    model.index = index_ptr;
    model.session_states = &state_cache;
    model.fusion = fusion_cfg;
    if (variant == Variant::no_as) model.fusion.selector = SelectorKind::mean;

    const SplitSpec splits = build_splits(corpus);
    result.valid = evaluate_recommendation(model, splits, false);
    result.test = evaluate_recommendation(model, splits, true);

    std::vector<ItemSequence> user_seqs;
    user_seqs.reserve(corpus.user_sequences.size());
    for (const auto& [uid, seq] : corpus.user_sequences) user_seqs.push_back(seq);
    result.retrieval = evaluate_retrieval(result.stage2.query, result.stage2.key,
                                          user_seqs, corpus.browsing_sessions,
                                          cfg.aug_config(), cfg.seed);
    return result;
}

void save_model_dir(const std::string& dir, const ModelArtifacts& artifacts,
                    const ExperimentConfig& cfg, int vocab_size) {
    fs::create_directories(dir);
    save_checkpoint((fs::path(dir) / "query.bin").string(), artifacts.query);
    save_checkpoint((fs::path(dir) / "key.bin").string(), artifacts.key);
    save_checkpoint((fs::path(dir) / "key_index.bin").string(), artifacts.key_index);
    if (artifacts.has_head)
        save_fusion_head((fs::path(dir) / "fusion.bin").string(), artifacts.head);
    json meta;
    meta["format"] = 1;
    meta["vocab_size"] = vocab_size;
    meta["dim"] = cfg.encoder_dim;
    meta["layers"] = cfg.encoder_layers;
    meta["heads"] = cfg.encoder_heads;
    meta["max_len"] = cfg.encoder_max_len;
    meta["ff_mult"] = cfg.encoder_ff_mult;
    meta["dropout"] = cfg.encoder_dropout;
    meta["tied"] = cfg.fusion_tie_item_embeddings;
    meta["has_head"] = artifacts.has_head;
    std::ofstream os(fs::path(dir) / "meta.json", std::ios::trunc);
    if (!os) throw DataError("cannot write meta.json in " + dir);
    os << meta.dump(2) << "\n";
}

ModelArtifacts load_model_dir(const std::string& dir, const ExperimentConfig& cfg) {
    std::ifstream is(fs::path(dir) / "meta.json");
    if (!is) throw DataError("cannot open meta.json in " + dir);
    json meta = json::parse(is, nullptr, false);
    if (meta.is_discarded()) throw DataError("invalid meta.json in " + dir);

    EncoderConfig ecfg;
    ecfg.vocab_size = meta.at("vocab_size").get<int>();
    ecfg.dim = meta.at("dim").get<int>();
    ecfg.n_layers = meta.at("layers").get<int>();
    ecfg.n_heads = meta.at("heads").get<int>();
    ecfg.max_len = meta.at("max_len").get<int>();
    ecfg.ff_mult = meta.at("ff_mult").get<int>();
    ecfg.dropout = meta.at("dropout").get<double>();
    ecfg.validate();

    ModelArtifacts artifacts;
    artifacts.query = load_checkpoint((fs::path(dir) / "query.bin").string(), ecfg);
    artifacts.key = load_checkpoint((fs::path(dir) / "key.bin").string(), ecfg);
    const auto key_index_path = fs::path(dir) / "key_index.bin";
    artifacts.key_index =
        fs::exists(key_index_path)
            ? load_checkpoint(key_index_path.string(), ecfg)
            : artifacts.key;
    artifacts.has_head = meta.value("has_head", false);
    if (artifacts.has_head) {
        const bool tied = meta.value("tied", false);
        artifacts.head = load_fusion_head((fs::path(dir) / "fusion.bin").string(),
                                          ecfg.dim, ecfg.vocab_size, tied);
    }
    (void)cfg;
    return artifacts;
}

void save_stage1_dir(const std::string& dir, const Stage1Result& stage1,
                     const ExperimentConfig& cfg, int vocab_size) {
    ModelArtifacts artifacts;
    artifacts.query = stage1.query;
    artifacts.key = stage1.key;
    artifacts.key_index = stage1.key;
    artifacts.has_head = false;
    save_model_dir(dir, artifacts, cfg, vocab_size);
}

}  // namespace retrec
