#pragma once

#include <vector>

#include "retrec/encoder.hpp"
#include "retrec/matrix.hpp"

namespace retrec {

// Fixed-capacity FIFO ring of unit-norm key embeddings used as contrastive
// negatives. Rows are gradient-detached by construction: the loss only ever
// reads them. Single writer; reads within a step see a consistent state.
class MemoryBank {
public:
    MemoryBank(int capacity, int dim);

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int filled() const { return filled_; }

    // Appends rows in order, overwriting the oldest entries once full.
    // Rows must be finite and unit-norm within 1e-5.
    void enqueue(const Matrix& rows);
    void enqueue_row(const double* row);
    void clear();

    // Contents in arrival order, oldest first; filled()×dim.
    Matrix snapshot() const;

    // Storage-order access used by the loss (order does not matter there).
    const double* stored_row(int i) const { return buffer_.row(i); }

private:
    int capacity_ = 0;
    int dim_ = 0;
    int head_ = 0;    // next write slot
    int filled_ = 0;
    Matrix buffer_;   // capacity×dim
};

// theta_k <- m*theta_k + (1-m)*theta_q elementwise; theta_q is untouched.
void momentum_update_tensor(const Matrix& q, Matrix& k, double m);
void momentum_update(const EncoderParams& theta_q, EncoderParams& theta_k, double m);

struct InfoNceResult {
    double total = 0.0;                // sum over the 2N anchors
    std::vector<double> per_anchor;    // anchors ordered [a_0..a_{N-1}, b_0..b_{N-1}]
    Matrix grad_a, grad_b;             // N×dim each
};

// (2N+K)-way InfoNCE. For anchor u with positive u', the denominator sums
// exp(h_u·h_i/tau) over the other 2N-1 batch views plus every filled bank
// row. Bank rows receive no gradient.
InfoNceResult info_nce_loss(const Matrix& views_a, const Matrix& views_b,
                            double tau, const MemoryBank& bank);

}  // namespace retrec
