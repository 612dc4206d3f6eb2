#include "retrec/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "retrec/errors.hpp"
#include "retrec/io.hpp"
#include "retrec/kernels.hpp"

namespace retrec {

namespace k = kernels;

FusionHead::FusionHead(int dim_, int vocab, bool tied) : dim(dim_), vocab_size(vocab) {
    if (dim < 1 || vocab < 1) throw ConfigError("fusion head: bad dimensions");
    w1.resize(1, dim);
    w2.resize(1, dim);
    mlp_w1.resize(2 * dim, dim);
    mlp_b1.resize(1, dim);
    mlp_w2.resize(dim, dim);
    mlp_b2.resize(1, dim);
    if (!tied) item_out.resize(vocab, dim);
}

void FusionHead::init_random(Rng& rng) {
    constexpr double kStd = 0.02;
    w1.randn(rng, kStd);
    w2.randn(rng, kStd);
    mlp_w1.randn(rng, kStd);
    mlp_b1.zero();
    mlp_w2.randn(rng, kStd);
    mlp_b2.zero();
    if (!item_out.empty()) item_out.randn(rng, kStd);
}

namespace {

template <typename Self, typename Fn>
void head_visit(Self& self, const Fn& fn) {
    fn("w1", self.w1);
    fn("w2", self.w2);
    fn("mlp_w1", self.mlp_w1);
    fn("mlp_b1", self.mlp_b1);
    fn("mlp_w2", self.mlp_w2);
    fn("mlp_b2", self.mlp_b2);
    if (!self.item_out.empty()) fn("item_out", self.item_out);
}

}  // namespace

void FusionHead::visit(const std::function<void(const std::string&, Matrix&)>& fn) {
    head_visit(*this, fn);
}

void FusionHead::visit(
    const std::function<void(const std::string&, const Matrix&)>& fn) const {
    head_visit(*this, fn);
}

std::vector<Matrix*> FusionHead::tensors() {
    std::vector<Matrix*> out;
    visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
}

void FusionHead::zero() {
    visit([](const std::string&, Matrix& m) { m.zero(); });
}

void save_fusion_head(const std::string& path, const FusionHead& head) {
    std::vector<std::pair<std::string, const Matrix*>> tensors;
    head.visit([&](const std::string& name, const Matrix& m) {
        tensors.emplace_back(name, &m);
    });
    io::save_tensor_file(path, tensors);
}

FusionHead load_fusion_head(const std::string& path, int dim, int vocab_size,
                            bool tied) {
    FusionHead head(dim, vocab_size, tied);
    std::vector<std::pair<std::string, Matrix*>> tensors;
    head.visit([&](const std::string& name, Matrix& m) {
        tensors.emplace_back(name, &m);
    });
    io::load_tensor_file(path, tensors);
    return head;
}

AttentionSelection attentive_select(const Matrix& h_u, const Matrix& session_states,
                                    const FusionHead& head) {
    const int l = session_states.rows();
    const int d = session_states.cols();
    if (l < 1) throw DataError("attentive_select: empty session states");

    const double base = dot(head.w1.row(0), h_u.row(0), d);
    Matrix logits(1, l);
    for (int j = 0; j < l; ++j)
        logits.at(0, j) = base + dot(head.w2.row(0), session_states.row(j), d);
    k::softmax_rows(logits);

    AttentionSelection sel;
    sel.weights.assign(logits.row(0), logits.row(0) + l);
    sel.pooled.resize(1, d);
    sel.pooled.zero();
    for (int j = 0; j < l; ++j) {
        const double a = sel.weights[j];
        const double* s = session_states.row(j);
        double* o = sel.pooled.row(0);
        for (int c = 0; c < d; ++c) o[c] += a * s[c];
    }
    return sel;
}

AttentionSelection mean_select(const Matrix& session_states) {
    const int l = session_states.rows();
    const int d = session_states.cols();
    if (l < 1) throw DataError("mean_select: empty session states");
    AttentionSelection sel;
    sel.weights.assign(l, 1.0 / l);
    sel.pooled.resize(1, d);
    sel.pooled.zero();
    for (int j = 0; j < l; ++j) {
        const double* s = session_states.row(j);
        double* o = sel.pooled.row(0);
        for (int c = 0; c < d; ++c) o[c] += s[c] / l;
    }
    return sel;
}

Matrix aggregate_context(const std::vector<double>& scores,
                         const std::vector<Matrix>& per_sequence, int dim) {
    if (scores.size() != per_sequence.size())
        throw DataError("aggregate_context: scores/sequences size mismatch");
    Matrix o(1, dim);
    for (size_t i = 0; i < scores.size(); ++i) {
        const double* oi = per_sequence[i].row(0);
        double* od = o.row(0);
        for (int c = 0; c < dim; ++c) od[c] += scores[i] * oi[c];
    }
    return o;
}

namespace {

void mlp_forward(const FusionHead& head, const Matrix& h_u, const Matrix& context,
                 Matrix& mlp_in, Matrix& pre, Matrix& hidden, Matrix& out) {
    const int d = head.dim;
    mlp_in.resize(1, 2 * d);
    std::copy(h_u.row(0), h_u.row(0) + d, mlp_in.row(0));
    std::copy(context.row(0), context.row(0) + d, mlp_in.row(0) + d);
    pre.resize(1, d);
    k::matmul(mlp_in, head.mlp_w1, pre);
    k::add_row_vector(pre, head.mlp_b1);
    hidden.resize(1, d);
    k::tanh_forward(pre, hidden);
    out.resize(1, d);
    k::matmul(hidden, head.mlp_w2, out);
    k::add_row_vector(out, head.mlp_b2);
}

Matrix item_logits(const FusionHead& head, const Matrix& output_emb,
                   const Matrix& mlp_out) {
    if (output_emb.rows() < head.vocab_size || output_emb.cols() != head.dim)
        throw DataError("fusion: output embedding table shape mismatch");
    Matrix logits(1, head.vocab_size);
    const double* z = mlp_out.row(0);
    for (int j = 0; j < head.vocab_size; ++j)
        logits.at(0, j) = dot(output_emb.row(j), z, head.dim);
    return logits;
}

}  // namespace

Matrix predict(const Matrix& h_u, const Matrix& context, const FusionHead& head,
               const Matrix& output_emb) {
    Matrix mlp_in, pre, hidden, out;
    mlp_forward(head, h_u, context, mlp_in, pre, hidden, out);
    Matrix logits = item_logits(head, output_emb, out);
    k::softmax_rows(logits);
    return logits;
}

double cf_loss(const std::vector<Matrix>& probs, const std::vector<int32_t>& targets,
               bool mean_reduction) {
    if (probs.size() != targets.size() || probs.empty())
        throw DataError("cf_loss: probabilities/targets size mismatch");
    double total = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        const int32_t t = targets[i];
        if (t < 0 || t >= probs[i].cols())
            throw DataError("cf_loss: target id out of range");
        double p = probs[i].at(0, t);
        if (p < 1e-12) {
            std::cerr << "warning: clamping zero probability for target " << t << "\n";
            p = 1e-12;
        }
        total += -std::log(p);
    }
    return mean_reduction ? total / static_cast<double>(probs.size()) : total;
}

void fusion_forward(const FusionHead& head, const Matrix& output_emb,
                    const Matrix& h_u, const std::vector<Matrix>& session_states,
                    const std::vector<double>& scores, SelectorKind selector,
                    bool normalize_scores, FusionCache& cache) {
    if (scores.size() != session_states.size())
        throw DataError("fusion_forward: scores/states size mismatch");
    cache.h_u = h_u;
    cache.session_states = session_states;
    cache.scores_in = scores;
    cache.selector = selector;
    cache.normalize_scores = normalize_scores;

    cache.scores = scores;
    if (normalize_scores && !scores.empty()) {
        Matrix s(1, static_cast<int>(scores.size()));
        std::copy(scores.begin(), scores.end(), s.row(0));
        k::softmax_rows(s);
        cache.scores.assign(s.row(0), s.row(0) + s.cols());
    }

    cache.selections.clear();
    cache.selections.reserve(session_states.size());
    std::vector<Matrix> pooled;
    pooled.reserve(session_states.size());
    for (const auto& states : session_states) {
        cache.selections.push_back(selector == SelectorKind::attentive
                                       ? attentive_select(h_u, states, head)
                                       : mean_select(states));
        pooled.push_back(cache.selections.back().pooled);
    }
    cache.context = aggregate_context(cache.scores, pooled, head.dim);
    mlp_forward(head, h_u, cache.context, cache.mlp_in, cache.mlp_pre,
                cache.mlp_hidden, cache.mlp_out);
    cache.probs = item_logits(head, output_emb, cache.mlp_out);
    k::softmax_rows(cache.probs);
}

void fusion_backward(const FusionHead& head, const Matrix& output_emb,
                     const FusionCache& cache, const Matrix& d_logits,
                     FusionGrads& grads) {
    const int d = head.dim;
    const int vocab = head.vocab_size;
    if (d_logits.rows() != 1 || d_logits.cols() != vocab)
        throw DataError("fusion_backward: d_logits shape mismatch");
    if (grads.head.dim == 0)
        grads.head = FusionHead(head.dim, head.vocab_size, head.item_out.empty());
    if (grads.d_output_emb.empty())
        grads.d_output_emb.resize(output_emb.rows(), d);

    // Item logits: logits_j = w_j · z.
    Matrix d_mlp_out(1, d);
    const double* dl = d_logits.row(0);
    const double* z = cache.mlp_out.row(0);
    for (int j = 0; j < vocab; ++j) {
        if (dl[j] == 0.0) continue;
        const double* wj = output_emb.row(j);
        double* gz = d_mlp_out.row(0);
        double* gw = grads.d_output_emb.row(j);
        for (int c = 0; c < d; ++c) {
            gz[c] += dl[j] * wj[c];
            gw[c] += dl[j] * z[c];
        }
    }

    // MLP
    Matrix d_hidden(1, d);
    k::matmul_nt(d_mlp_out, head.mlp_w2, d_hidden);
    k::matmul_tn(cache.mlp_hidden, d_mlp_out, grads.head.mlp_w2, /*accumulate=*/true);
    for (int c = 0; c < d; ++c) grads.head.mlp_b2.at(0, c) += d_mlp_out.at(0, c);

    Matrix d_pre(1, d);
    for (int c = 0; c < d; ++c) {
        const double h = cache.mlp_hidden.at(0, c);
        d_pre.at(0, c) = d_hidden.at(0, c) * (1.0 - h * h);
    }
    k::matmul_tn(cache.mlp_in, d_pre, grads.head.mlp_w1, /*accumulate=*/true);
    for (int c = 0; c < d; ++c) grads.head.mlp_b1.at(0, c) += d_pre.at(0, c);

    Matrix d_mlp_in(1, 2 * d);
    k::matmul_nt(d_pre, head.mlp_w1, d_mlp_in);
    Matrix d_hu(1, d), d_context(1, d);
    std::copy(d_mlp_in.row(0), d_mlp_in.row(0) + d, d_hu.row(0));
    std::copy(d_mlp_in.row(0) + d, d_mlp_in.row(0) + 2 * d, d_context.row(0));

    // Context aggregation: o = sum_i s_i * o_i.
    const size_t n_sessions = cache.session_states.size();
    grads.d_states.assign(n_sessions, Matrix());
    grads.d_scores.assign(n_sessions, 0.0);
    std::vector<double> d_applied(n_sessions, 0.0);
    for (size_t i = 0; i < n_sessions; ++i) {
        d_applied[i] = dot(d_context.row(0), cache.selections[i].pooled.row(0), d);
    }
    if (cache.normalize_scores && n_sessions > 0) {
        // Backward through the score softmax.
        double acc = 0.0;
        for (size_t i = 0; i < n_sessions; ++i) acc += d_applied[i] * cache.scores[i];
        for (size_t i = 0; i < n_sessions; ++i)
            grads.d_scores[i] = cache.scores[i] * (d_applied[i] - acc);
    } else {
        grads.d_scores = d_applied;
    }

    for (size_t i = 0; i < n_sessions; ++i) {
        const Matrix& states = cache.session_states[i];
        const AttentionSelection& sel = cache.selections[i];
        const int l = states.rows();
        Matrix& d_states = grads.d_states[i];
        d_states.resize(l, d);
        d_states.zero();

        // d o_i = s_i * d o
        Matrix d_oi(1, d);
        for (int c = 0; c < d; ++c)
            d_oi.at(0, c) = cache.scores[i] * d_context.at(0, c);

        if (cache.selector == SelectorKind::mean) {
            for (int j = 0; j < l; ++j)
                for (int c = 0; c < d; ++c)
                    d_states.at(j, c) += d_oi.at(0, c) / l;
            continue;
        }

        std::vector<double> d_alpha(l, 0.0);
        for (int j = 0; j < l; ++j) {
            d_alpha[j] = dot(d_oi.row(0), states.row(j), d);
            for (int c = 0; c < d; ++c)
                d_states.at(j, c) += sel.weights[j] * d_oi.at(0, c);
        }
        double acc = 0.0;
        for (int j = 0; j < l; ++j) acc += d_alpha[j] * sel.weights[j];
        double d_logit_sum = 0.0;
        for (int j = 0; j < l; ++j) {
            const double d_logit = sel.weights[j] * (d_alpha[j] - acc);
            d_logit_sum += d_logit;
            // logit_j = w1·h_u + w2·s_j
            for (int c = 0; c < d; ++c) {
                grads.head.w2.at(0, c) += d_logit * states.at(j, c);
                d_states.at(j, c) += d_logit * head.w2.at(0, c);
            }
        }
        for (int c = 0; c < d; ++c) {
            grads.head.w1.at(0, c) += d_logit_sum * cache.h_u.at(0, c);
            d_hu.at(0, c) += d_logit_sum * head.w1.at(0, c);
        }
    }

    grads.d_hu = std::move(d_hu);
}

}  // namespace retrec
