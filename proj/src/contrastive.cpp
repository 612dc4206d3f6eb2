#include "retrec/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "retrec/errors.hpp"

namespace retrec {

MemoryBank::MemoryBank(int capacity, int dim)
    : capacity_(capacity), dim_(dim), buffer_(capacity, dim) {
    if (capacity < 0) throw ConfigError("memory bank capacity must be >= 0");
    if (dim <= 0) throw ConfigError("memory bank dim must be positive");
}

void MemoryBank::enqueue_row(const double* row) {
    if (capacity_ == 0) return;
    double norm_sq = 0.0;
    for (int j = 0; j < dim_; ++j) {
        if (!std::isfinite(row[j]))
            throw DataError("memory bank: rejected non-finite embedding row");
        norm_sq += row[j] * row[j];
    }
    if (std::abs(std::sqrt(norm_sq) - 1.0) > 1e-5)
        throw DataError("memory bank: rejected row with non-unit norm " +
                        std::to_string(std::sqrt(norm_sq)));
    std::copy(row, row + dim_, buffer_.row(head_));
    head_ = (head_ + 1) % capacity_;
    if (filled_ < capacity_) ++filled_;
}

void MemoryBank::enqueue(const Matrix& rows) {
    if (rows.cols() != dim_)
        throw DataError("memory bank: row dimension mismatch");
    for (int i = 0; i < rows.rows(); ++i) enqueue_row(rows.row(i));
}

void MemoryBank::clear() {
    head_ = 0;
    filled_ = 0;
    buffer_.zero();
}

Matrix MemoryBank::snapshot() const {
    Matrix out(filled_, dim_);
    // Oldest entry sits at head_ once the ring has wrapped.
    const int start = filled_ < capacity_ ? 0 : head_;
    for (int i = 0; i < filled_; ++i) {
        const int slot = (start + i) % capacity_;
        std::copy(buffer_.row(slot), buffer_.row(slot) + dim_, out.row(i));
    }
    return out;
}

void momentum_update_tensor(const Matrix& q, Matrix& k, double m) {
    if (!q.same_shape(k))
        throw ConfigError("momentum update: tensor shape mismatch");
    if (m < 0.0 || m >= 1.0)
        throw ConfigError("momentum coefficient must lie in [0, 1)");
    const double* qd = q.data();
    double* kd = k.data();
    for (size_t i = 0; i < q.size(); ++i) kd[i] = m * kd[i] + (1.0 - m) * qd[i];
}

void momentum_update(const EncoderParams& theta_q, EncoderParams& theta_k, double m) {
    if (!theta_q.same_shape(theta_k))
        throw ConfigError("momentum update: encoder shape mismatch");
    auto q = theta_q.tensors();
    auto k = theta_k.tensors();
    for (size_t i = 0; i < q.size(); ++i) momentum_update_tensor(*q[i], *k[i], m);
}

InfoNceResult info_nce_loss(const Matrix& views_a, const Matrix& views_b,
                            double tau, const MemoryBank& bank) {
    if (tau <= 0.0) throw ConfigError("InfoNCE temperature must be positive");
    if (!views_a.same_shape(views_b) || views_a.rows() < 1)
        throw DataError("InfoNCE: paired views must share a nonempty shape");
    const int n = views_a.rows();
    const int d = views_a.cols();
    const int two_n = 2 * n;
    const int filled = bank.filled();
    if (filled > 0 && bank.dim() != d)
        throw DataError("InfoNCE: bank dimension mismatch");

    auto view_row = [&](int u) -> const double* {
        return u < n ? views_a.row(u) : views_b.row(u - n);
    };
    auto positive_of = [&](int u) { return u < n ? u + n : u - n; };

    InfoNceResult res;
    res.per_anchor.assign(two_n, 0.0);
    res.grad_a.resize(n, d);
    res.grad_a.zero();
    res.grad_b.resize(n, d);
    res.grad_b.zero();
    auto grad_row = [&](int u) -> double* {
        return u < n ? res.grad_a.row(u) : res.grad_b.row(u - n);
    };

    // Softmax weights of every batch view in every anchor's denominator;
    // needed serially afterwards to push gradient into the negatives.
    Matrix batch_weights(two_n, two_n);
    batch_weights.zero();
    const double inv_tau = 1.0 / tau;

#pragma omp parallel for schedule(static) if (two_n > 2)
    for (int u = 0; u < two_n; ++u) {
        const double* hu = view_row(u);
        const int p = positive_of(u);
        std::vector<double> sims(two_n, 0.0);
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < two_n; ++i) {
            if (i == u) continue;
            sims[i] = dot(hu, view_row(i), d) * inv_tau;
            mx = std::max(mx, sims[i]);
        }
        std::vector<double> bank_sims(filled, 0.0);
        for (int i = 0; i < filled; ++i) {
            bank_sims[i] = dot(hu, bank.stored_row(i), d) * inv_tau;
            mx = std::max(mx, bank_sims[i]);
        }
        double denom = 0.0;
        for (int i = 0; i < two_n; ++i)
            if (i != u) denom += std::exp(sims[i] - mx);
        for (int i = 0; i < filled; ++i) denom += std::exp(bank_sims[i] - mx);

        const double s_pos = sims[p];
        res.per_anchor[u] = -s_pos + mx + std::log(denom);

        // Gradient w.r.t. the anchor itself; bank rows are constants.
        double* gu = grad_row(u);
        const double* hp = view_row(p);
        for (int j = 0; j < d; ++j) gu[j] -= hp[j] * inv_tau;
        for (int i = 0; i < two_n; ++i) {
            if (i == u) continue;
            const double w = std::exp(sims[i] - mx) / denom;
            batch_weights.at(u, i) = w;
            const double* hi = view_row(i);
            const double c = w * inv_tau;
            for (int j = 0; j < d; ++j) gu[j] += c * hi[j];
        }
        for (int i = 0; i < filled; ++i) {
            const double c = std::exp(bank_sims[i] - mx) / denom * inv_tau;
            const double* hb = bank.stored_row(i);
            for (int j = 0; j < d; ++j) gu[j] += c * hb[j];
        }
    }

    // Cross terms: anchor u pushes gradient into the other views.
    for (int u = 0; u < two_n; ++u) {
        const double* hu = view_row(u);
        const int p = positive_of(u);
        for (int i = 0; i < two_n; ++i) {
            if (i == u) continue;
            double w = batch_weights.at(u, i);
            if (i == p) w -= 1.0;  // numerator term
            if (w == 0.0) continue;
            double* gi = grad_row(i);
            const double c = w * inv_tau;
            for (int j = 0; j < d; ++j) gi[j] += c * hu[j];
        }
        res.total += res.per_anchor[u];
    }
    return res;
}

}  // namespace retrec
