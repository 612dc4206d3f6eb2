#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "retrec/config.hpp"
#include "retrec/contrastive.hpp"
#include "retrec/dataset.hpp"
#include "retrec/encoder.hpp"
#include "retrec/evaluation.hpp"
#include "retrec/fusion.hpp"
#include "retrec/retrieval.hpp"

namespace retrec {

enum class Variant { full, no_ra, no_mc, no_da, no_as };
Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

class Adam {
public:
    Adam(double lr, double beta1, double beta2, double eps)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void attach(const std::vector<Matrix*>& params);
    void step(const std::vector<Matrix*>& params,
              const std::vector<const Matrix*>& grads);
    long steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Matrix> m_, v_;
};

// Strict-improvement early stopping on a maximized metric.
struct EarlyStopper {
    int patience = 20;
    double best = -std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    int epochs_since_improvement = 0;

    // Returns true if `value` improved on the best seen.
    bool observe(int epoch, double value);
    bool should_stop() const { return epochs_since_improvement >= patience; }
};

struct EpochStats {
    int epoch = 0;
    double cts_loss = 0.0;
    double cf_loss = 0.0;
    double valid_ndcg10 = 0.0;
};

// Deterministic chunked gradient accumulation: chunks are processed in
// parallel, then reduced in fixed chunk order, so results do not depend on
// the thread count.
void batched_encoder_backward(const EncoderParams& params,
                              const std::vector<EncoderCache>& caches,
                              const std::vector<Matrix>& upstreams,
                              EncoderParams& grads,
                              std::vector<EncoderParams>& scratch);

struct Stage1Result {
    EncoderParams query;
    EncoderParams key;
    std::vector<EpochStats> history;
};

// Momentum-contrastive pretraining of the query/key encoder pair. When
// checkpoint_dir is set, per-epoch checkpoints are written so the last good
// pair survives a divergence abort.
Stage1Result pretrain_stage1(const Corpus& corpus, const ExperimentConfig& cfg,
                             Variant variant = Variant::full,
                             const std::optional<std::string>& checkpoint_dir = {});

struct Stage2Result {
    EncoderParams query;      // best-epoch parameters
    EncoderParams key;        // momentum twin at the best epoch
    EncoderParams key_index;  // snapshot that built the fixed index
    FusionHead head;
    std::vector<EpochStats> history;
    int best_epoch = -1;
    double best_valid_ndcg10 = 0.0;
};

// Joint optimization of the contrastive and next-item losses against a fixed
// index. `key_snapshot` must be the key encoder that built `index`; it also
// produces the per-position states of retrieved sessions. The optimizer never
// touches the key encoder.
Stage2Result train_stage2(const Corpus& corpus, const RetrievalIndex* index,
                          const EncoderParams& query_init,
                          const EncoderParams& key_snapshot,
                          const ExperimentConfig& cfg, Variant variant);

// --- experiment orchestration shared by the CLI verbs ---

struct ExperimentResult {
    Stage2Result stage2;
    MetricReport valid;
    MetricReport test;
    MetricReport retrieval;  // self-task on the final encoders
    std::string index_path;
};

// stage-1 -> index freeze -> stage-2 -> evaluation, with all artifacts under
// workdir. Variant wiring: no_ra drops the retriever, no_mc sets the bank
// size to 0, no_da uses identity views, no_as mean-pools the selector.
ExperimentResult run_experiment(const Corpus& corpus, const ExperimentConfig& cfg,
                                Variant variant, const std::string& workdir,
                                const Stage1Result* stage1_override = nullptr);

// --- model directory (checkpoints + meta) ---

struct ModelArtifacts {
    EncoderParams query;
    EncoderParams key;
    EncoderParams key_index;
    FusionHead head;
    bool has_head = false;
};

void save_model_dir(const std::string& dir, const ModelArtifacts& artifacts,
                    const ExperimentConfig& cfg, int vocab_size);
ModelArtifacts load_model_dir(const std::string& dir, const ExperimentConfig& cfg);
void save_stage1_dir(const std::string& dir, const Stage1Result& stage1,
                     const ExperimentConfig& cfg, int vocab_size);

}  // namespace retrec
