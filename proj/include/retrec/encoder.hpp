#pragma once

#include <functional>
#include <string>
#include <vector>

#include "retrec/dataset.hpp"
#include "retrec/matrix.hpp"
#include "retrec/rng.hpp"

namespace retrec {

struct EncoderConfig {
    int vocab_size = 0;  // |V|; item-embedding row vocab_size is the mask token
    int max_len = 50;
    int dim = 128;
    int n_layers = 2;
    int n_heads = 2;
    int ff_mult = 4;
    double dropout = 0.2;

    int ff_dim() const { return dim * ff_mult; }
    int head_dim() const { return dim / n_heads; }
    int mask_id() const { return vocab_size; }
    void validate() const;

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct LayerParams {
    Matrix wq, wk, wv, wo;  // dim×dim
    Matrix bq, bk, bv, bo;  // 1×dim
    Matrix ln1_g, ln1_b;    // 1×dim
    Matrix w1, b1;          // dim×ff, 1×ff
    Matrix w2, b2;          // ff×dim, 1×dim
    Matrix ln2_g, ln2_b;    // 1×dim
};

// All learnable tensors of one encoder. The query and key encoders are two
// instances of this struct with identical shapes.
struct EncoderParams {
    EncoderConfig cfg;
    Matrix item_emb;  // (vocab_size+1)×dim
    Matrix pos_emb;   // max_len×dim
    std::vector<LayerParams> layers;

    EncoderParams() = default;
    explicit EncoderParams(const EncoderConfig& cfg);  // zero-initialized
    void init_random(Rng& rng);

    void visit(const std::function<void(const std::string&, Matrix&)>& fn);
    void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;
    std::vector<Matrix*> tensors();
    std::vector<const Matrix*> tensors() const;
    bool same_shape(const EncoderParams& o) const;
    void zero();
};

struct SequenceEncoding {
    Matrix pooled;        // 1×dim: hidden state at the last position
    Matrix per_position;  // len×dim
};

struct LayerCache {
    Matrix x_in, q, k, v;
    std::vector<Matrix> probs;  // per head, len×len
    Matrix concat;              // heads reassembled, before the output projection
    Matrix drop_attn;
    Matrix r1, x1;
    std::vector<double> ln1_mean, ln1_rstd;
    Matrix ffn_pre, ffn_act;
    Matrix drop_ffn;
    Matrix r2;
    std::vector<double> ln2_mean, ln2_rstd;
};

struct EncoderCache {
    std::vector<int32_t> ids;
    Matrix x0;
    Matrix drop_emb;
    std::vector<LayerCache> layers;
    Matrix out;  // len×dim
};

// Deterministic eval-mode encode (no dropout).
SequenceEncoding encode(const EncoderParams& params, const ItemSequence& seq);

// Same computation carried out in width-row buffers (width >= len); padding
// positions hold the mask token and are excluded from attention. Outputs are
// bitwise identical to encode().
SequenceEncoding encode_at_width(const EncoderParams& params,
                                 const ItemSequence& seq, int width);

std::vector<SequenceEncoding> encode_batch(const EncoderParams& params,
                                           const std::vector<ItemSequence>& seqs);

// Training-mode forward; dropout is applied when dropout_rng is non-null and
// cfg.dropout > 0. The per-position output lands in cache.out.
void encode_forward(const EncoderParams& params, const std::vector<int32_t>& ids,
                    EncoderCache& cache, Rng* dropout_rng = nullptr);

// Accumulates parameter gradients for the recorded forward pass; d_out is the
// gradient on cache.out. Throws TrainingError on non-finite gradients.
void encode_backward(const EncoderParams& params, const EncoderCache& cache,
                     const Matrix& d_out, EncoderParams& grads);

// Upstream helper: gradient matrix that is zero everywhere except the pooled
// (last) row.
Matrix pooled_upstream(int len, const Matrix& d_pooled);

void save_checkpoint(const std::string& path, const EncoderParams& params);
EncoderParams load_checkpoint(const std::string& path, const EncoderConfig& expected);

}  // namespace retrec
