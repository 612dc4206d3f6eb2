#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "retrec/matrix.hpp"

// Dense kernels behind the encoder, the contrastive loss and the index scan.
// The hot paths are OpenMP-parallel over independent output rows, so results
// do not depend on the thread count. The `ref` namespace keeps naive serial
// implementations that the unit tests and the benchmark compare against.
namespace retrec::kernels {

namespace ref {

void matmul(const Matrix& a, const Matrix& b, Matrix& c);     // c = a·b
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c);  // c = a·bᵀ
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c);  // c = aᵀ·b
void softmax_rows(Matrix& x);
std::vector<std::pair<double, int64_t>> topk_inner_product(
    const float* vectors, int64_t count, int dim, const double* query, int k);

}  // namespace ref

// c = a·b, or c += a·b when accumulate is set.
void matmul(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
// c = a·bᵀ
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
// c = aᵀ·b
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);

// Adds a 1×cols bias row to every row of x.
void add_row_vector(Matrix& x, const Matrix& bias);
void scale(Matrix& x, double s);
// y += x elementwise (same shape).
void add_inplace(Matrix& y, const Matrix& x);

// In-place, max-subtracted row softmax.
void softmax_rows(Matrix& x);
// dlogits from probs and dprobs: p ⊙ (dp − Σ dp ⊙ p) rowwise.
void softmax_rows_backward(const Matrix& probs, const Matrix& dprobs, Matrix& dlogits);

inline constexpr double kLayerNormEps = 1e-5;

// Rowwise layer norm; caches per-row mean and reciprocal stddev for backward.
void layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                Matrix& y, std::vector<double>& mean, std::vector<double>& rstd);
void layer_norm_backward(const Matrix& x, const Matrix& gamma,
                         const std::vector<double>& mean,
                         const std::vector<double>& rstd, const Matrix& dy,
                         Matrix& dx, Matrix& dgamma, Matrix& dbeta);

// Exact (erf-based) GELU.
void gelu(const Matrix& x, Matrix& y);
void gelu_backward(const Matrix& x, const Matrix& dy, Matrix& dx);

void tanh_forward(const Matrix& x, Matrix& y);

double l2_norm(const double* v, int n);
// y = x / ‖x‖; returns the norm. Throws TrainingError on a zero vector.
double l2_normalize(const double* x, double* y, int n);
// Backward of y = x/‖x‖: dx += (dy − y·(y·dy)) / norm.
void l2_normalize_backward(const double* y, double norm, const double* dy,
                           double* dx, int n);

// Top-k rows of an f32 block by inner product with a double query.
// Ties break toward the lower row id. Scores accumulate in double.
std::vector<std::pair<double, int64_t>> topk_inner_product(
    const float* vectors, int64_t count, int dim, const double* query, int k);

}  // namespace retrec::kernels
