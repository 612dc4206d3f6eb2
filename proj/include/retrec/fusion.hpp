#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "retrec/matrix.hpp"
#include "retrec/rng.hpp"

namespace retrec {

enum class SelectorKind { attentive, mean };

struct FusionConfig {
    int k = 10;
    SelectorKind selector = SelectorKind::attentive;
    bool normalize_scores = false;       // softmax over retrieval scores
    bool tie_item_embeddings = false;    // reuse encoder input embeddings as w_j
};

// Attentive-selector projections, the two-layer predictor MLP and the output
// item embedding table.
struct FusionHead {
    int dim = 0;
    int vocab_size = 0;
    Matrix w1, w2;            // 1×d scalar-logit projections
    Matrix mlp_w1, mlp_b1;    // 2d×d, 1×d
    Matrix mlp_w2, mlp_b2;    // d×d, 1×d
    Matrix item_out;          // |V|×d; empty when embeddings are tied

    FusionHead() = default;
    FusionHead(int dim, int vocab_size, bool tied);
    void init_random(Rng& rng);
    void visit(const std::function<void(const std::string&, Matrix&)>& fn);
    void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;
    std::vector<Matrix*> tensors();
    void zero();
};

void save_fusion_head(const std::string& path, const FusionHead& head);
FusionHead load_fusion_head(const std::string& path, int dim, int vocab_size, bool tied);

struct AttentionSelection {
    std::vector<double> weights;  // alpha, sums to 1
    Matrix pooled;                // 1×d weighted state
};

// alpha_j = softmax_j(w1·h_u + w2·s_j); pooled = sum_j alpha_j s_j.
AttentionSelection attentive_select(const Matrix& h_u, const Matrix& session_states,
                                    const FusionHead& head);
// Uniform weights (the mean-pooling selector).
AttentionSelection mean_select(const Matrix& session_states);

// o = sum_i scores[i] * per_sequence[i]; empty input yields the zero vector.
Matrix aggregate_context(const std::vector<double>& scores,
                         const std::vector<Matrix>& per_sequence, int dim);

// softmax over w_j · MLP(h_u ∥ o); output_emb is head.item_out or the tied
// encoder table (first |V| rows are used).
Matrix predict(const Matrix& h_u, const Matrix& context, const FusionHead& head,
               const Matrix& output_emb);

// Mean (or sum) of -log p[target]; probabilities clamp at 1e-12 with a warning.
double cf_loss(const std::vector<Matrix>& probs, const std::vector<int32_t>& targets,
               bool mean_reduction = true);

// --- cached forward/backward used by training ---

struct FusionCache {
    Matrix h_u;                         // 1×d input
    std::vector<Matrix> session_states; // copies of the retrieved states
    std::vector<double> scores_in;      // raw retrieval scores
    std::vector<double> scores;         // weights actually applied to o_i
    std::vector<AttentionSelection> selections;
    Matrix context;                     // 1×d
    Matrix mlp_in;                      // 1×2d
    Matrix mlp_pre, mlp_hidden;         // 1×d (pre-activation, tanh output)
    Matrix mlp_out;                     // 1×d
    Matrix probs;                       // 1×|V|
    SelectorKind selector = SelectorKind::attentive;
    bool normalize_scores = false;
};

// `head` and `d_output_emb` accumulate across calls (batch accumulation);
// `d_hu`, `d_states` and `d_scores` are overwritten per call.
struct FusionGrads {
    FusionHead head;            // same shapes as the head (zero-filled)
    Matrix d_hu;                // 1×d
    std::vector<Matrix> d_states;
    std::vector<double> d_scores;
    Matrix d_output_emb;        // matches the output table shape
};

void fusion_forward(const FusionHead& head, const Matrix& output_emb,
                    const Matrix& h_u, const std::vector<Matrix>& session_states,
                    const std::vector<double>& scores, SelectorKind selector,
                    bool normalize_scores, FusionCache& cache);

// d_logits is the gradient on the pre-softmax item logits (1×|V|).
void fusion_backward(const FusionHead& head, const Matrix& output_emb,
                     const FusionCache& cache, const Matrix& d_logits,
                     FusionGrads& grads);

}  // namespace retrec
