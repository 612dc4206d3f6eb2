#include "retrec/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "retrec/errors.hpp"

namespace retrec {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
        throw ConfigError("config: bad numeric value for " + key + ": '" + v + "'");
    return out;
}

int64_t parse_int(const std::string& key, const std::string& v) {
    int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
        throw ConfigError("config: bad integer value for " + key + ": '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean value for " + key + ": '" + v + "'");
}

struct Field {
    std::string key;
    std::string description;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define INT_FIELD(key, member, desc)                                          \
    Field {                                                                   \
        key, desc,                                                            \
            [](const ExperimentConfig& c) { return std::to_string(c.member); }, \
            [](ExperimentConfig& c, const std::string& v) {                   \
                c.member = static_cast<decltype(c.member)>(parse_int(key, v)); \
            }                                                                 \
    }
#define DBL_FIELD(key, member, desc)                                         \
    Field {                                                                  \
        key, desc, [](const ExperimentConfig& c) { return fmt_double(c.member); }, \
            [](ExperimentConfig& c, const std::string& v) {                  \
                c.member = parse_double(key, v);                             \
            }                                                                \
    }
#define BOOL_FIELD(key, member, desc)                                      \
    Field {                                                                \
        key, desc,                                                         \
            [](const ExperimentConfig& c) {                                \
                return std::string(c.member ? "true" : "false");           \
            },                                                             \
            [](ExperimentConfig& c, const std::string& v) {                \
                c.member = parse_bool(key, v);                             \
            }                                                              \
    }
#define STR_FIELD(key, member, desc)                                \
    Field {                                                         \
        key, desc, [](const ExperimentConfig& c) { return c.member; }, \
            [](ExperimentConfig& c, const std::string& v) { c.member = v; } \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        INT_FIELD("seed", seed, "run seed; all randomness derives from it"),
        INT_FIELD("threads", threads, "worker threads; 1 guarantees bitwise determinism"),
        INT_FIELD("encoder.dim", encoder_dim, "embedding/hidden size"),
        INT_FIELD("encoder.layers", encoder_layers, "transformer layers"),
        INT_FIELD("encoder.heads", encoder_heads, "attention heads"),
        INT_FIELD("encoder.max_len", encoder_max_len, "maximum sequence length"),
        INT_FIELD("encoder.ff_mult", encoder_ff_mult, "feed-forward width multiple"),
        DBL_FIELD("encoder.dropout", encoder_dropout, "dropout rate (training only)"),
        DBL_FIELD("aug.gamma", aug_gamma, "mask probability"),
        DBL_FIELD("aug.eta", aug_eta, "crop length ratio"),
        DBL_FIELD("aug.mu", aug_mu, "reorder window ratio"),
        DBL_FIELD("cts.tau", cts_tau, "InfoNCE temperature"),
        INT_FIELD("cts.bank_size", cts_bank_size, "memory bank capacity K"),
        DBL_FIELD("cts.momentum", cts_momentum, "key-encoder momentum m"),
        INT_FIELD("cts.batch_size", cts_batch_size, "stage-1 contrastive batch N"),
        INT_FIELD("fusion.k", fusion_k, "retrieved sessions per query"),
        STR_FIELD("fusion.selector", fusion_selector, "attentive|mean"),
        BOOL_FIELD("fusion.normalize_scores", fusion_normalize_scores,
                   "softmax retrieval scores before weighting"),
        BOOL_FIELD("fusion.tie_item_embeddings", fusion_tie_item_embeddings,
                   "reuse encoder input embeddings as output table"),
        DBL_FIELD("train.lr", train_lr, "Adam learning rate"),
        INT_FIELD("train.epochs", train_epochs, "stage-2 epoch cap"),
        INT_FIELD("train.patience", train_patience, "early-stop patience (epochs)"),
        INT_FIELD("train.stage1_epochs", train_stage1_epochs, "stage-1 epochs before index freeze"),
        INT_FIELD("train.batch_size", train_batch_size, "stage-2 batch size"),
        DBL_FIELD("train.adam_beta1", train_adam_beta1, "Adam beta1"),
        DBL_FIELD("train.adam_beta2", train_adam_beta2, "Adam beta2"),
        DBL_FIELD("train.adam_eps", train_adam_eps, "Adam epsilon"),
        STR_FIELD("index.mode", index_mode, "exact|clustered"),
        INT_FIELD("index.nlist", index_nlist, "clusters for clustered mode (0 = sqrt(M))"),
        INT_FIELD("index.nprobe", index_nprobe, "probed lists per query (0 = default)"),
        INT_FIELD("synth.users", synth_users, "synthetic users"),
        INT_FIELD("synth.items", synth_items, "synthetic catalog size"),
        INT_FIELD("synth.topics", synth_topics, "latent topics"),
        INT_FIELD("synth.sessions", synth_sessions, "synthetic browsing sessions"),
        INT_FIELD("synth.items_per_topic", synth_items_per_topic,
                  "topic set size; 0 = disjoint partition, >0 = shared-pool topics"),
        INT_FIELD("synth.user_len_min", synth_user_len_min, "user sequence min length"),
        INT_FIELD("synth.user_len_max", synth_user_len_max, "user sequence max length"),
        INT_FIELD("synth.sess_len_min", synth_sess_len_min, "browsing session min length"),
        INT_FIELD("synth.sess_len_max", synth_sess_len_max, "browsing session max length"),
        DBL_FIELD("synth.p_succ", synth_p_succ, "probability of following the item successor"),
        DBL_FIELD("synth.topic_switch", synth_topic_switch, "topic jump probability"),
        DBL_FIELD("synth.overlap", synth_overlap,
                  "fraction of user walks cloned from browsing sessions"),
        DBL_FIELD("synth.clone_noise", synth_clone_noise, "per-item resample rate when cloning"),
        DBL_FIELD("data.gap_hours", data_gap_hours, "session gap threshold (hours)"),
        INT_FIELD("data.min_len", data_min_len, "minimum sequence/session length"),
        INT_FIELD("data.max_len", data_max_len, "maximum kept length (most recent)"),
    };
    return table;
}

#undef INT_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD
#undef STR_FIELD

}  // namespace

void ExperimentConfig::apply(const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(*this, value);
            return;
        }
    }
    throw ConfigError("config: unknown key '" + key + "'");
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        // Strip comments and whitespace.
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value");
        cfg.apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str());
}

void ExperimentConfig::validate() const {
    aug_config().validate();
    if (cts_tau <= 0.0) throw ConfigError("cts.tau must be positive");
    if (cts_bank_size < 0) throw ConfigError("cts.bank_size must be >= 0");
    if (cts_momentum < 0.0 || cts_momentum >= 1.0)
        throw ConfigError("cts.momentum must lie in [0, 1)");
    if (cts_batch_size < 1 || train_batch_size < 1)
        throw ConfigError("batch sizes must be >= 1");
    if (train_patience < 1) throw ConfigError("train.patience must be >= 1");
    if (train_epochs < 1 || train_stage1_epochs < 1)
        throw ConfigError("epoch counts must be >= 1");
    if (train_lr < 0.0) throw ConfigError("train.lr must be >= 0");
    if (fusion_k < 1) throw ConfigError("fusion.k must be >= 1");
    if (fusion_selector != "attentive" && fusion_selector != "mean")
        throw ConfigError("fusion.selector must be attentive or mean");
    if (index_mode != "exact" && index_mode != "clustered")
        throw ConfigError("index.mode must be exact or clustered");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (data_gap_hours <= 0.0) throw ConfigError("data.gap_hours must be positive");
    if (synth_user_len_min < 1 || synth_user_len_max < synth_user_len_min ||
        synth_sess_len_min < 1 || synth_sess_len_max < synth_sess_len_min)
        throw ConfigError("synth length ranges are invalid");
}

std::string ExperimentConfig::to_text() const {
    std::ostringstream os;
    for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << "\n";
    return os.str();
}

std::string ExperimentConfig::hash() const {
    const std::string text = to_text();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string ExperimentConfig::describe_keys() {
    ExperimentConfig defaults;
    std::ostringstream os;
    os << "Config keys (key = default): \n";
    for (const auto& f : fields())
        os << "  " << f.key << " = " << f.get(defaults) << "\n      " << f.description
           << "\n";
    return os.str();
}

EncoderConfig ExperimentConfig::encoder_config(int vocab_size) const {
    EncoderConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.max_len = encoder_max_len;
    cfg.dim = encoder_dim;
    cfg.n_layers = encoder_layers;
    cfg.n_heads = encoder_heads;
    cfg.ff_mult = encoder_ff_mult;
    cfg.dropout = encoder_dropout;
    cfg.validate();
    return cfg;
}

AugmentationConfig ExperimentConfig::aug_config() const {
    AugmentationConfig cfg;
    cfg.gamma = aug_gamma;
    cfg.eta = aug_eta;
    cfg.mu = aug_mu;
    return cfg;
}

FusionConfig ExperimentConfig::fusion_config() const {
    FusionConfig cfg;
    cfg.k = fusion_k;
    cfg.selector = fusion_selector == "mean" ? SelectorKind::mean
                                             : SelectorKind::attentive;
    cfg.normalize_scores = fusion_normalize_scores;
    cfg.tie_item_embeddings = fusion_tie_item_embeddings;
    return cfg;
}

}  // namespace retrec
