#include "retrec/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "retrec/errors.hpp"
#include "retrec/io.hpp"
#include "retrec/kernels.hpp"

namespace retrec {

namespace k = kernels;

void EncoderConfig::validate() const {
    if (vocab_size <= 0) throw ConfigError("encoder: vocab_size must be positive");
    if (max_len < 1) throw ConfigError("encoder: max_len must be >= 1");
    if (dim < 1 || n_layers < 1 || n_heads < 1)
        throw ConfigError("encoder: dim, layers and heads must be >= 1");
    if (dim % n_heads != 0)
        throw ConfigError("encoder: dim must be divisible by n_heads");
    if (ff_mult < 1) throw ConfigError("encoder: ff_mult must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0)
        throw ConfigError("encoder: dropout must be in [0, 1)");
}

EncoderParams::EncoderParams(const EncoderConfig& c) : cfg(c) {
    cfg.validate();
    item_emb.resize(cfg.vocab_size + 1, cfg.dim);
    pos_emb.resize(cfg.max_len, cfg.dim);
    layers.resize(cfg.n_layers);
    for (auto& l : layers) {
        l.wq.resize(cfg.dim, cfg.dim);
        l.wk.resize(cfg.dim, cfg.dim);
        l.wv.resize(cfg.dim, cfg.dim);
        l.wo.resize(cfg.dim, cfg.dim);
        l.bq.resize(1, cfg.dim);
        l.bk.resize(1, cfg.dim);
        l.bv.resize(1, cfg.dim);
        l.bo.resize(1, cfg.dim);
        l.ln1_g.resize(1, cfg.dim);
        l.ln1_b.resize(1, cfg.dim);
        l.w1.resize(cfg.dim, cfg.ff_dim());
        l.b1.resize(1, cfg.ff_dim());
        l.w2.resize(cfg.ff_dim(), cfg.dim);
        l.b2.resize(1, cfg.dim);
        l.ln2_g.resize(1, cfg.dim);
        l.ln2_b.resize(1, cfg.dim);
    }
}

void EncoderParams::init_random(Rng& rng) {
    constexpr double kStd = 0.02;
    item_emb.randn(rng, kStd);
    pos_emb.randn(rng, kStd);
    for (auto& l : layers) {
        l.wq.randn(rng, kStd);
        l.wk.randn(rng, kStd);
        l.wv.randn(rng, kStd);
        l.wo.randn(rng, kStd);
        l.bq.zero();
        l.bk.zero();
        l.bv.zero();
        l.bo.zero();
        l.ln1_g.fill(1.0);
        l.ln1_b.zero();
        l.w1.randn(rng, kStd);
        l.b1.zero();
        l.w2.randn(rng, kStd);
        l.b2.zero();
        l.ln2_g.fill(1.0);
        l.ln2_b.zero();
    }
}

namespace {

template <typename Self, typename Fn>
void visit_impl(Self& self, const Fn& fn) {
    fn("item_emb", self.item_emb);
    fn("pos_emb", self.pos_emb);
    for (size_t i = 0; i < self.layers.size(); ++i) {
        auto& l = self.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        fn(p + "wq", l.wq);
        fn(p + "bq", l.bq);
        fn(p + "wk", l.wk);
        fn(p + "bk", l.bk);
        fn(p + "wv", l.wv);
        fn(p + "bv", l.bv);
        fn(p + "wo", l.wo);
        fn(p + "bo", l.bo);
        fn(p + "ln1_g", l.ln1_g);
        fn(p + "ln1_b", l.ln1_b);
        fn(p + "w1", l.w1);
        fn(p + "b1", l.b1);
        fn(p + "w2", l.w2);
        fn(p + "b2", l.b2);
        fn(p + "ln2_g", l.ln2_g);
        fn(p + "ln2_b", l.ln2_b);
    }
}

}  // namespace

void EncoderParams::visit(const std::function<void(const std::string&, Matrix&)>& fn) {
    visit_impl(*this, fn);
}

void EncoderParams::visit(
    const std::function<void(const std::string&, const Matrix&)>& fn) const {
    visit_impl(*this, fn);
}

std::vector<Matrix*> EncoderParams::tensors() {
    std::vector<Matrix*> out;
    visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
}

std::vector<const Matrix*> EncoderParams::tensors() const {
    std::vector<const Matrix*> out;
    visit([&](const std::string&, const Matrix& m) { out.push_back(&m); });
    return out;
}

bool EncoderParams::same_shape(const EncoderParams& o) const {
    auto a = tensors();
    auto b = o.tensors();
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (!a[i]->same_shape(*b[i])) return false;
    return true;
}

void EncoderParams::zero() {
    visit([](const std::string&, Matrix& m) { m.zero(); });
}

namespace {

void check_sequence(const EncoderConfig& cfg, const std::vector<int32_t>& ids) {
    if (ids.empty()) throw DataError("encode: empty sequence");
    if (static_cast<int>(ids.size()) > cfg.max_len)
        throw DataError("encode: sequence length " + std::to_string(ids.size()) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
    for (int32_t id : ids)
        if (id < 0 || id > cfg.vocab_size)
            throw DataError("encode: item id " + std::to_string(id) +
                            " outside [0, " + std::to_string(cfg.vocab_size) + "]");
}

// Inverted dropout mask: entries are 0 or 1/(1-p).
void draw_dropout(Matrix& mask, int rows, int cols, double p, Rng& rng) {
    mask.resize(rows, cols);
    const double scale = 1.0 / (1.0 - p);
    double* d = mask.data();
    for (size_t i = 0; i < mask.size(); ++i)
        d[i] = rng.uniform() < p ? 0.0 : scale;
}

void apply_mask(Matrix& x, const Matrix& mask) {
    double* xd = x.data();
    const double* md = mask.data();
    for (size_t i = 0; i < x.size(); ++i) xd[i] *= md[i];
}

void colsum_into(const Matrix& x, Matrix& out) {
    double* o = out.row(0);
    for (int i = 0; i < x.rows(); ++i) {
        const double* r = x.row(i);
        for (int j = 0; j < x.cols(); ++j) o[j] += r[j];
    }
}

// Forward over `width` rows of which the first `valid` are real positions.
// Attention keys/values are restricted to the valid prefix, so rows < valid
// never depend on padding contents.
void forward_impl(const EncoderParams& params, const std::vector<int32_t>& ids,
                  int valid, EncoderCache& cache, Rng* dropout_rng) {
    const EncoderConfig& cfg = params.cfg;
    const int width = static_cast<int>(ids.size());
    const int d = cfg.dim, heads = cfg.n_heads, dh = cfg.head_dim();
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool drop = dropout_rng != nullptr && cfg.dropout > 0.0;

    cache.ids = ids;
    cache.x0.resize(width, d);
    for (int t = 0; t < width; ++t) {
        const double* emb = params.item_emb.row(ids[t]);
        const double* pos = params.pos_emb.row(t);
        double* x = cache.x0.row(t);
        for (int j = 0; j < d; ++j) x[j] = emb[j] + pos[j];
    }
    if (drop) {
        draw_dropout(cache.drop_emb, width, d, cfg.dropout, *dropout_rng);
        apply_mask(cache.x0, cache.drop_emb);
    } else {
        cache.drop_emb.resize(0, 0);
    }

    cache.layers.resize(cfg.n_layers);
    Matrix x = cache.x0;
    Matrix qh(0, 0), kh(0, 0), vh(0, 0), scores(0, 0), oh(0, 0);
    for (int li = 0; li < cfg.n_layers; ++li) {
        const LayerParams& lp = params.layers[li];
        LayerCache& lc = cache.layers[li];
        lc.x_in = x;

        lc.q.resize(width, d);
        lc.k.resize(width, d);
        lc.v.resize(width, d);
        k::matmul(x, lp.wq, lc.q);
        k::add_row_vector(lc.q, lp.bq);
        k::matmul(x, lp.wk, lc.k);
        k::add_row_vector(lc.k, lp.bk);
        k::matmul(x, lp.wv, lc.v);
        k::add_row_vector(lc.v, lp.bv);

        lc.probs.assign(heads, Matrix());
        lc.concat.resize(width, d);
        qh.resize(width, dh);
        kh.resize(valid, dh);
        vh.resize(valid, dh);
        scores.resize(width, valid);
        oh.resize(width, dh);
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            for (int i = 0; i < width; ++i) {
                const double* src = lc.q.row(i) + off;
                std::copy(src, src + dh, qh.row(i));
            }
            for (int i = 0; i < valid; ++i) {
                const double* ks = lc.k.row(i) + off;
                std::copy(ks, ks + dh, kh.row(i));
                const double* vs = lc.v.row(i) + off;
                std::copy(vs, vs + dh, vh.row(i));
            }
            k::matmul_nt(qh, kh, scores);
            k::scale(scores, attn_scale);
            k::softmax_rows(scores);
            lc.probs[h] = scores;
            k::matmul(scores, vh, oh);
            for (int i = 0; i < width; ++i) {
                const double* src = oh.row(i);
                std::copy(src, src + dh, lc.concat.row(i) + off);
            }
        }

        Matrix proj(width, d);
        k::matmul(lc.concat, lp.wo, proj);
        k::add_row_vector(proj, lp.bo);
        if (drop) {
            draw_dropout(lc.drop_attn, width, d, cfg.dropout, *dropout_rng);
            apply_mask(proj, lc.drop_attn);
        } else {
            lc.drop_attn.resize(0, 0);
        }

        lc.r1 = lc.x_in;
        k::add_inplace(lc.r1, proj);
        lc.x1.resize(width, d);
        k::layer_norm(lc.r1, lp.ln1_g, lp.ln1_b, lc.x1, lc.ln1_mean, lc.ln1_rstd);

        lc.ffn_pre.resize(width, cfg.ff_dim());
        k::matmul(lc.x1, lp.w1, lc.ffn_pre);
        k::add_row_vector(lc.ffn_pre, lp.b1);
        lc.ffn_act.resize(width, cfg.ff_dim());
        k::gelu(lc.ffn_pre, lc.ffn_act);
        Matrix ffn_out(width, d);
        k::matmul(lc.ffn_act, lp.w2, ffn_out);
        k::add_row_vector(ffn_out, lp.b2);
        if (drop) {
            draw_dropout(lc.drop_ffn, width, d, cfg.dropout, *dropout_rng);
            apply_mask(ffn_out, lc.drop_ffn);
        } else {
            lc.drop_ffn.resize(0, 0);
        }

        lc.r2 = lc.x1;
        k::add_inplace(lc.r2, ffn_out);
        x.resize(width, d);
        k::layer_norm(lc.r2, lp.ln2_g, lp.ln2_b, x, lc.ln2_mean, lc.ln2_rstd);
    }
    cache.out = std::move(x);
}

SequenceEncoding slice_encoding(const EncoderCache& cache, int valid, int dim) {
    SequenceEncoding enc;
    enc.per_position.resize(valid, dim);
    for (int i = 0; i < valid; ++i)
        std::copy(cache.out.row(i), cache.out.row(i) + dim, enc.per_position.row(i));
    enc.pooled.resize(1, dim);
    std::copy(cache.out.row(valid - 1), cache.out.row(valid - 1) + dim,
              enc.pooled.row(0));
    return enc;
}

}  // namespace

SequenceEncoding encode(const EncoderParams& params, const ItemSequence& seq) {
    check_sequence(params.cfg, seq.items);
    EncoderCache cache;
    forward_impl(params, seq.items, seq.length(), cache, nullptr);
    return slice_encoding(cache, seq.length(), params.cfg.dim);
}

SequenceEncoding encode_at_width(const EncoderParams& params,
                                 const ItemSequence& seq, int width) {
    check_sequence(params.cfg, seq.items);
    if (width < seq.length() || width > params.cfg.max_len)
        throw DataError("encode_at_width: width outside [len, max_len]");
    std::vector<int32_t> padded = seq.items;
    padded.resize(width, static_cast<int32_t>(params.cfg.mask_id()));
    EncoderCache cache;
    forward_impl(params, padded, seq.length(), cache, nullptr);
    return slice_encoding(cache, seq.length(), params.cfg.dim);
}

std::vector<SequenceEncoding> encode_batch(const EncoderParams& params,
                                           const std::vector<ItemSequence>& seqs) {
    std::vector<SequenceEncoding> out(seqs.size());
    const int64_t n = static_cast<int64_t>(seqs.size());
#pragma omp parallel for schedule(static) if (n > 1)
    for (int64_t i = 0; i < n; ++i) out[i] = encode(params, seqs[i]);
    return out;
}

void encode_forward(const EncoderParams& params, const std::vector<int32_t>& ids,
                    EncoderCache& cache, Rng* dropout_rng) {
    check_sequence(params.cfg, ids);
    forward_impl(params, ids, static_cast<int>(ids.size()), cache, dropout_rng);
}

Matrix pooled_upstream(int len, const Matrix& d_pooled) {
    Matrix up(len, d_pooled.cols());
    std::copy(d_pooled.row(0), d_pooled.row(0) + d_pooled.cols(), up.row(len - 1));
    return up;
}

void encode_backward(const EncoderParams& params, const EncoderCache& cache,
                     const Matrix& d_out, EncoderParams& grads) {
    const EncoderConfig& cfg = params.cfg;
    const int len = static_cast<int>(cache.ids.size());
    const int d = cfg.dim, heads = cfg.n_heads, dh = cfg.head_dim();
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (d_out.rows() != len || d_out.cols() != d)
        throw std::invalid_argument("encode_backward: upstream shape mismatch");
    if (!grads.same_shape(params))
        throw std::invalid_argument("encode_backward: grads shape mismatch");

    Matrix dx = d_out;
    Matrix dqh(len, dh), dkh(len, dh), dvh(len, dh), dscores(len, len),
        dprobs(len, len), qh(len, dh), kh(len, dh), vh(len, dh);
    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        const LayerParams& lp = params.layers[li];
        const LayerCache& lc = cache.layers[li];
        LayerParams& gp = grads.layers[li];

        // LN2
        Matrix dr2(len, d);
        k::layer_norm_backward(lc.r2, lp.ln2_g, lc.ln2_mean, lc.ln2_rstd, dx, dr2,
                               gp.ln2_g, gp.ln2_b);
        Matrix dx1 = dr2;        // residual branch
        Matrix dffn_out = dr2;   // ffn branch
        if (!lc.drop_ffn.empty()) apply_mask(dffn_out, lc.drop_ffn);

        // FFN
        Matrix dact(len, cfg.ff_dim());
        k::matmul_nt(dffn_out, lp.w2, dact);
        k::matmul_tn(lc.ffn_act, dffn_out, gp.w2, /*accumulate=*/true);
        colsum_into(dffn_out, gp.b2);
        Matrix dpre(len, cfg.ff_dim());
        k::gelu_backward(lc.ffn_pre, dact, dpre);
        k::matmul_nt(dpre, lp.w1, dx1, /*accumulate=*/true);
        k::matmul_tn(lc.x1, dpre, gp.w1, /*accumulate=*/true);
        colsum_into(dpre, gp.b1);

        // LN1
        Matrix dr1(len, d);
        k::layer_norm_backward(lc.r1, lp.ln1_g, lc.ln1_mean, lc.ln1_rstd, dx1, dr1,
                               gp.ln1_g, gp.ln1_b);
        Matrix dx_in = dr1;     // residual branch
        Matrix dproj = dr1;     // attention branch
        if (!lc.drop_attn.empty()) apply_mask(dproj, lc.drop_attn);

        // Output projection
        Matrix dconcat(len, d);
        k::matmul_nt(dproj, lp.wo, dconcat);
        k::matmul_tn(lc.concat, dproj, gp.wo, /*accumulate=*/true);
        colsum_into(dproj, gp.bo);

        // Attention heads
        Matrix dq(len, d), dk_(len, d), dv(len, d);
        Matrix doh(len, dh);
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            for (int i = 0; i < len; ++i) {
                std::copy(dconcat.row(i) + off, dconcat.row(i) + off + dh, doh.row(i));
                std::copy(lc.q.row(i) + off, lc.q.row(i) + off + dh, qh.row(i));
                std::copy(lc.k.row(i) + off, lc.k.row(i) + off + dh, kh.row(i));
                std::copy(lc.v.row(i) + off, lc.v.row(i) + off + dh, vh.row(i));
            }
            const Matrix& probs = lc.probs[h];
            k::matmul_nt(doh, vh, dprobs);
            k::matmul_tn(probs, doh, dvh);
            k::softmax_rows_backward(probs, dprobs, dscores);
            k::scale(dscores, attn_scale);
            k::matmul(dscores, kh, dqh);
            k::matmul_tn(dscores, qh, dkh);
            for (int i = 0; i < len; ++i) {
                std::copy(dqh.row(i), dqh.row(i) + dh, dq.row(i) + off);
                std::copy(dkh.row(i), dkh.row(i) + dh, dk_.row(i) + off);
                std::copy(dvh.row(i), dvh.row(i) + dh, dv.row(i) + off);
            }
        }

        // Input projections
        k::matmul_nt(dq, lp.wq, dx_in, /*accumulate=*/true);
        k::matmul_nt(dk_, lp.wk, dx_in, /*accumulate=*/true);
        k::matmul_nt(dv, lp.wv, dx_in, /*accumulate=*/true);
        k::matmul_tn(lc.x_in, dq, gp.wq, /*accumulate=*/true);
        k::matmul_tn(lc.x_in, dk_, gp.wk, /*accumulate=*/true);
        k::matmul_tn(lc.x_in, dv, gp.wv, /*accumulate=*/true);
        colsum_into(dq, gp.bq);
        colsum_into(dk_, gp.bk);
        colsum_into(dv, gp.bv);

        dx = std::move(dx_in);
    }

    if (!cache.drop_emb.empty()) apply_mask(dx, cache.drop_emb);
    for (int t = 0; t < len; ++t) {
        const double* g = dx.row(t);
        double* ge = grads.item_emb.row(cache.ids[t]);
        double* gpos = grads.pos_emb.row(t);
        for (int j = 0; j < d; ++j) {
            ge[j] += g[j];
            gpos[j] += g[j];
        }
    }

    for (const Matrix* t : grads.tensors()) {
        const double* p = t->data();
        for (size_t i = 0; i < t->size(); ++i)
            if (!std::isfinite(p[i]))
                throw TrainingError("non-finite gradient in encoder backward");
    }
}

void save_checkpoint(const std::string& path, const EncoderParams& params) {
    std::vector<std::pair<std::string, const Matrix*>> tensors;
    params.visit([&](const std::string& name, const Matrix& m) {
        tensors.emplace_back(name, &m);
    });
    io::save_tensor_file(path, tensors);
}

EncoderParams load_checkpoint(const std::string& path, const EncoderConfig& expected) {
    EncoderParams params(expected);
    std::vector<std::pair<std::string, Matrix*>> tensors;
    params.visit([&](const std::string& name, Matrix& m) {
        tensors.emplace_back(name, &m);
    });
    io::load_tensor_file(path, tensors);
    return params;
}

}  // namespace retrec
