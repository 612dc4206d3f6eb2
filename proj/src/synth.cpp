#include "retrec/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "retrec/errors.hpp"
#include "retrec/rng.hpp"

namespace retrec {

namespace {

struct TopicModel {
    int n_items = 0;
    int n_topics = 0;
    // Per topic: its item sequence in cycle order. With the default disjoint
    // partition every item belongs to exactly one topic; in shared-item mode
    // topic sets are sampled from the global pool and overlap, so the cycle a
    // walk follows is not identifiable from single items.
    std::vector<std::vector<int32_t>> cycle;

    int cycle_len(int topic) const { return static_cast<int>(cycle[topic].size()); }
};

TopicModel make_model(const ExperimentConfig& cfg, Rng& rng) {
    TopicModel m;
    m.n_topics = cfg.synth_topics;
    m.cycle.resize(m.n_topics);
    int per_topic = cfg.synth_items_per_topic;
    if (per_topic == 0) {
        per_topic = cfg.synth_items / cfg.synth_topics;
        if (per_topic < 2)
            throw ConfigError("synth: need at least 2 items per topic");
        m.n_items = per_topic * m.n_topics;  // drop remainder items
        std::vector<int32_t> order(per_topic);
        for (int t = 0; t < m.n_topics; ++t) {
            std::iota(order.begin(), order.end(), t * per_topic);
            for (int i = per_topic - 1; i > 0; --i) {
                const int j = static_cast<int>(rng.uniform_int(i + 1));
                std::swap(order[i], order[j]);
            }
            m.cycle[t] = order;
        }
    } else {
        if (per_topic < 2 || per_topic > cfg.synth_items)
            throw ConfigError("synth: items_per_topic out of range");
        m.n_items = cfg.synth_items;
        // Sample each topic's item set from the shared pool (no replacement
        // within a topic; topics overlap).
        std::vector<int32_t> pool(m.n_items);
        for (int t = 0; t < m.n_topics; ++t) {
            std::iota(pool.begin(), pool.end(), 0);
            for (int i = 0; i < per_topic; ++i) {
                const int j =
                    i + static_cast<int>(rng.uniform_int(m.n_items - i));
                std::swap(pool[i], pool[j]);
            }
            m.cycle[t].assign(pool.begin(), pool.begin() + per_topic);
        }
    }
    return m;
}

std::vector<int32_t> walk(const TopicModel& m, const ExperimentConfig& cfg,
                          int len, Rng& rng) {
    std::vector<int32_t> items(len);
    int topic = static_cast<int>(rng.uniform_int(m.n_topics));
    int pos = static_cast<int>(rng.uniform_int(m.cycle_len(topic)));
    items[0] = m.cycle[topic][pos];
    for (int i = 1; i < len; ++i) {
        if (rng.uniform() < cfg.synth_topic_switch) {
            topic = static_cast<int>(rng.uniform_int(m.n_topics));
            pos = static_cast<int>(rng.uniform_int(m.cycle_len(topic)));
        } else if (rng.uniform() < cfg.synth_p_succ) {
            pos = (pos + 1) % m.cycle_len(topic);
        } else {
            pos = static_cast<int>(rng.uniform_int(m.cycle_len(topic)));
        }
        items[i] = m.cycle[topic][pos];
    }
    return items;
}

int draw_len(int lo, int hi, Rng& rng) {
    return lo + static_cast<int>(rng.uniform_int(hi - lo + 1));
}

}  // namespace

SynthOutput generate_synthetic(const ExperimentConfig& cfg) {
    if (cfg.synth_users < 1 || cfg.synth_items < 1 || cfg.synth_topics < 1 ||
        cfg.synth_sessions < 1)
        throw ConfigError("synth: all counts must be >= 1");

    Rng model_rng(Rng::derive(cfg.seed, 0x10de1));
    const TopicModel model = make_model(cfg, model_rng);

    SynthOutput out;
    out.corpus.vocab_size = model.n_items;
    out.vocab_keys.resize(model.n_items);
    for (int i = 0; i < model.n_items; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "item_%05d", i);
        out.vocab_keys[i] = buf;
    }

    Rng sess_rng(Rng::derive(cfg.seed, 0x5e55));
    out.corpus.browsing_sessions.reserve(cfg.synth_sessions);
    for (int s = 0; s < cfg.synth_sessions; ++s) {
        ItemSequence seq;
        seq.items = walk(model, cfg,
                         draw_len(cfg.synth_sess_len_min, cfg.synth_sess_len_max,
                                  sess_rng),
                         sess_rng);
        out.corpus.browsing_sessions.push_back(std::move(seq));
    }

    Rng user_rng(Rng::derive(cfg.seed, 0xa5e7));
    out.corpus.user_sequences.reserve(cfg.synth_users);
    for (int u = 0; u < cfg.synth_users; ++u) {
        const int len = draw_len(cfg.synth_user_len_min, cfg.synth_user_len_max,
                                 user_rng);
        ItemSequence seq;
        if (user_rng.uniform() < cfg.synth_overlap) {
            // Re-trace a window of an existing browsing session, with noise.
            const auto& src =
                out.corpus
                    .browsing_sessions[user_rng.uniform_int(
                        out.corpus.browsing_sessions.size())]
                    .items;
            const int take = std::min<int>(len, static_cast<int>(src.size()));
            const int offset =
                static_cast<int>(user_rng.uniform_int(src.size() - take + 1));
            seq.items.assign(src.begin() + offset, src.begin() + offset + take);
            for (auto& item : seq.items) {
                if (user_rng.uniform() < cfg.synth_clone_noise)
                    item = static_cast<int32_t>(
                        user_rng.uniform_int(model.n_items));
            }
        } else {
            seq.items = walk(model, cfg, len, user_rng);
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "user_%06d", u);
        out.corpus.user_sequences.emplace_back(buf, std::move(seq));
    }
    return out;
}

}  // namespace retrec
