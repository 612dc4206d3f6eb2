#include "retrec/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <stdexcept>

#include "retrec/errors.hpp"

namespace retrec::kernels {

namespace {

void check_shapes(int ar, int ac, int br, int bc, int cr, int cc,
                  const char* what) {
    if (ac != br || cr != ar || cc != bc)
        throw std::invalid_argument(std::string("matmul shape mismatch in ") + what);
}

}  // namespace

namespace ref {

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
    check_shapes(a.rows(), a.cols(), b.rows(), b.cols(), c.rows(), c.cols(), "ref::matmul");
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    check_shapes(a.rows(), a.cols(), b.cols(), b.rows(), c.rows(), c.cols(), "ref::matmul_nt");
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(j, k);
            c.at(i, j) = s;
        }
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c) {
    check_shapes(a.cols(), a.rows(), b.rows(), b.cols(), c.rows(), c.cols(), "ref::matmul_tn");
    for (int i = 0; i < a.cols(); ++i)
        for (int j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.rows(); ++k) s += a.at(k, i) * b.at(k, j);
            c.at(i, j) = s;
        }
}

void softmax_rows(Matrix& x) {
    for (int i = 0; i < x.rows(); ++i) {
        double* r = x.row(i);
        double mx = r[0];
        for (int j = 1; j < x.cols(); ++j) mx = std::max(mx, r[j]);
        double sum = 0.0;
        for (int j = 0; j < x.cols(); ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        for (int j = 0; j < x.cols(); ++j) r[j] /= sum;
    }
}

std::vector<std::pair<double, int64_t>> topk_inner_product(
    const float* vectors, int64_t count, int dim, const double* query, int k) {
    std::vector<std::pair<double, int64_t>> scored(count);
    for (int64_t i = 0; i < count; ++i) {
        const float* row = vectors + i * dim;
        double s = 0.0;
        for (int j = 0; j < dim; ++j) s += static_cast<double>(row[j]) * query[j];
        scored[i] = {s, i};
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    if (static_cast<int64_t>(k) < count) scored.resize(k);
    return scored;
}

}  // namespace ref

void matmul(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    check_shapes(a.rows(), a.cols(), b.rows(), b.cols(), c.rows(), c.cols(), "matmul");
    const int m = a.rows(), n = b.cols(), kk = a.cols();
#pragma omp parallel for schedule(static) if (m > 4)
    for (int i = 0; i < m; ++i) {
        double* crow = c.row(i);
        if (!accumulate)
            for (int j = 0; j < n; ++j) crow[j] = 0.0;
        const double* arow = a.row(i);
        for (int k = 0; k < kk; ++k) {
            const double av = arow[k];
            const double* brow = b.row(k);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    check_shapes(a.rows(), a.cols(), b.cols(), b.rows(), c.rows(), c.cols(), "matmul_nt");
    const int m = a.rows(), n = b.rows(), kk = a.cols();
#pragma omp parallel for schedule(static) if (m > 4)
    for (int i = 0; i < m; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (int j = 0; j < n; ++j) {
            double s = dot(arow, b.row(j), kk);
            crow[j] = accumulate ? crow[j] + s : s;
        }
    }
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    check_shapes(a.cols(), a.rows(), b.rows(), b.cols(), c.rows(), c.cols(), "matmul_tn");
    const int m = a.cols(), n = b.cols(), kk = a.rows();
#pragma omp parallel for schedule(static) if (m > 4)
    for (int i = 0; i < m; ++i) {
        double* crow = c.row(i);
        if (!accumulate)
            for (int j = 0; j < n; ++j) crow[j] = 0.0;
        for (int k = 0; k < kk; ++k) {
            const double av = a.at(k, i);
            const double* brow = b.row(k);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void add_row_vector(Matrix& x, const Matrix& bias) {
    assert(bias.rows() == 1 && bias.cols() == x.cols());
    const double* b = bias.row(0);
    for (int i = 0; i < x.rows(); ++i) {
        double* r = x.row(i);
        for (int j = 0; j < x.cols(); ++j) r[j] += b[j];
    }
}

void scale(Matrix& x, double s) {
    double* d = x.data();
    for (size_t i = 0; i < x.size(); ++i) d[i] *= s;
}

void add_inplace(Matrix& y, const Matrix& x) {
    assert(y.same_shape(x));
    double* yd = y.data();
    const double* xd = x.data();
    for (size_t i = 0; i < y.size(); ++i) yd[i] += xd[i];
}

void softmax_rows(Matrix& x) {
    const int rows = x.rows(), cols = x.cols();
#pragma omp parallel for schedule(static) if (rows > 8)
    for (int i = 0; i < rows; ++i) {
        double* r = x.row(i);
        double mx = r[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, r[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        for (int j = 0; j < cols; ++j) r[j] /= sum;
    }
}

void softmax_rows_backward(const Matrix& probs, const Matrix& dprobs, Matrix& dlogits) {
    assert(probs.same_shape(dprobs) && probs.same_shape(dlogits));
    for (int i = 0; i < probs.rows(); ++i) {
        const double* p = probs.row(i);
        const double* dp = dprobs.row(i);
        double* dl = dlogits.row(i);
        double acc = 0.0;
        for (int j = 0; j < probs.cols(); ++j) acc += dp[j] * p[j];
        for (int j = 0; j < probs.cols(); ++j) dl[j] = p[j] * (dp[j] - acc);
    }
}

void layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                Matrix& y, std::vector<double>& mean, std::vector<double>& rstd) {
    const int rows = x.rows(), cols = x.cols();
    mean.resize(rows);
    rstd.resize(rows);
    const double* g = gamma.row(0);
    const double* b = beta.row(0);
    for (int i = 0; i < rows; ++i) {
        const double* r = x.row(i);
        double m = 0.0;
        for (int j = 0; j < cols; ++j) m += r[j];
        m /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = r[j] - m;
            var += d * d;
        }
        var /= cols;
        const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        mean[i] = m;
        rstd[i] = rs;
        double* out = y.row(i);
        for (int j = 0; j < cols; ++j) out[j] = (r[j] - m) * rs * g[j] + b[j];
    }
}

void layer_norm_backward(const Matrix& x, const Matrix& gamma,
                         const std::vector<double>& mean,
                         const std::vector<double>& rstd, const Matrix& dy,
                         Matrix& dx, Matrix& dgamma, Matrix& dbeta) {
    const int rows = x.rows(), cols = x.cols();
    const double* g = gamma.row(0);
    double* dg = dgamma.row(0);
    double* db = dbeta.row(0);
    for (int i = 0; i < rows; ++i) {
        const double* r = x.row(i);
        const double* dyr = dy.row(i);
        double* dxr = dx.row(i);
        const double m = mean[i], rs = rstd[i];
        double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double xhat = (r[j] - m) * rs;
            const double dyg = dyr[j] * g[j];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
        }
        const double inv = 1.0 / cols;
        for (int j = 0; j < cols; ++j) {
            const double xhat = (r[j] - m) * rs;
            const double dyg = dyr[j] * g[j];
            dxr[j] = rs * (dyg - sum_dyg * inv - xhat * sum_dyg_xhat * inv);
        }
    }
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244008443621048490393;
constexpr double kInvSqrt2Pi = 0.3989422804014326779399460599343818685;
}  // namespace

void gelu(const Matrix& x, Matrix& y) {
    assert(x.same_shape(y));
    const double* xd = x.data();
    double* yd = y.data();
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = xd[i];
        yd[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
}

void gelu_backward(const Matrix& x, const Matrix& dy, Matrix& dx) {
    assert(x.same_shape(dy) && x.same_shape(dx));
    const double* xd = x.data();
    const double* dyd = dy.data();
    double* dxd = dx.data();
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = xd[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        dxd[i] = dyd[i] * (cdf + v * pdf);
    }
}

void tanh_forward(const Matrix& x, Matrix& y) {
    assert(x.same_shape(y));
    const double* xd = x.data();
    double* yd = y.data();
    for (size_t i = 0; i < x.size(); ++i) yd[i] = std::tanh(xd[i]);
}

double l2_norm(const double* v, int n) {
    return std::sqrt(dot(v, v, n));
}

double l2_normalize(const double* x, double* y, int n) {
    const double norm = l2_norm(x, n);
    if (!(norm > 0.0) || !std::isfinite(norm))
        throw TrainingError("cannot normalize zero or non-finite vector");
    const double inv = 1.0 / norm;
    for (int i = 0; i < n; ++i) y[i] = x[i] * inv;
    return norm;
}

void l2_normalize_backward(const double* y, double norm, const double* dy,
                           double* dx, int n) {
    const double proj = dot(y, dy, n);
    const double inv = 1.0 / norm;
    for (int i = 0; i < n; ++i) dx[i] += (dy[i] - y[i] * proj) * inv;
}

std::vector<std::pair<double, int64_t>> topk_inner_product(
    const float* vectors, int64_t count, int dim, const double* query, int k) {
    // Heap ordered by "better" so the weakest kept hit sits at the front.
    auto better = [](const std::pair<double, int64_t>& a,
                     const std::pair<double, int64_t>& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    };
    std::vector<std::pair<double, int64_t>> heap;
    heap.reserve(k);
    for (int64_t i = 0; i < count; ++i) {
        const float* row = vectors + i * dim;
        double s = 0.0;
        for (int j = 0; j < dim; ++j) s += static_cast<double>(row[j]) * query[j];
        std::pair<double, int64_t> cand{s, i};
        if (static_cast<int>(heap.size()) < k) {
            heap.push_back(cand);
            std::push_heap(heap.begin(), heap.end(), better);
        } else if (better(cand, heap.front())) {
            std::pop_heap(heap.begin(), heap.end(), better);
            heap.back() = cand;
            std::push_heap(heap.begin(), heap.end(), better);
        }
    }
    std::sort(heap.begin(), heap.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    return heap;
}

}  // namespace retrec::kernels
