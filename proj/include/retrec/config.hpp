#pragma once

#include <cstdint>
#include <string>

#include "retrec/augmentation.hpp"
#include "retrec/encoder.hpp"
#include "retrec/fusion.hpp"

namespace retrec {

// Resolved union of all module config keys. Parsed from a flat key=value
// text file; unknown keys are rejected. `to_text()` is the canonical
// serialization used for run manifests and the config hash.
struct ExperimentConfig {
    uint64_t seed = 1;
    int threads = 1;

    int encoder_dim = 128;
    int encoder_layers = 2;
    int encoder_heads = 2;
    int encoder_max_len = 50;
    int encoder_ff_mult = 4;
    double encoder_dropout = 0.2;

    double aug_gamma = 0.3;
    double aug_eta = 0.6;
    double aug_mu = 0.3;

    double cts_tau = 0.1;
    int cts_bank_size = 8096;
    double cts_momentum = 0.999;
    int cts_batch_size = 64;

    int fusion_k = 10;
    std::string fusion_selector = "attentive";  // attentive|mean
    bool fusion_normalize_scores = false;
    bool fusion_tie_item_embeddings = false;

    double train_lr = 1e-3;
    int train_epochs = 500;
    int train_patience = 20;
    int train_stage1_epochs = 50;
    int train_batch_size = 128;
    double train_adam_beta1 = 0.9;
    double train_adam_beta2 = 0.999;
    double train_adam_eps = 1e-8;

    std::string index_mode = "exact";  // exact|clustered
    int index_nlist = 0;               // 0 = sqrt(M)
    int index_nprobe = 0;              // 0 = stored default

    int synth_users = 2000;
    int synth_items = 600;
    int synth_topics = 30;
    int synth_items_per_topic = 0;
    int synth_sessions = 10000;
    int synth_user_len_min = 6;
    int synth_user_len_max = 12;
    int synth_sess_len_min = 20;
    int synth_sess_len_max = 40;
    double synth_p_succ = 0.5;
    double synth_topic_switch = 0.05;
    double synth_overlap = 0.8;
    double synth_clone_noise = 0.1;

    double data_gap_hours = 4.0;
    int data_min_len = 5;
    int data_max_len = 50;

    static ExperimentConfig from_file(const std::string& path);
    static ExperimentConfig from_text(const std::string& text);
    void apply(const std::string& key, const std::string& value);
    void validate() const;

    std::string to_text() const;
    // FNV-1a 64 of the canonical text, as hex.
    std::string hash() const;
    // One `key  default  description` line per key, for --help.
    static std::string describe_keys();

    EncoderConfig encoder_config(int vocab_size) const;
    AugmentationConfig aug_config() const;
    FusionConfig fusion_config() const;
};

}  // namespace retrec
