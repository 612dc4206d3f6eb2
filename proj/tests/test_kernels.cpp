#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "retrec/kernels.hpp"
#include "retrec/matrix.hpp"
#include "retrec/rng.hpp"

using namespace retrec;
namespace k = retrec::kernels;

namespace {

Matrix random_matrix(int rows, int cols, Rng& rng) {
    Matrix m(rows, cols);
    m.randn(rng, 1.0);
    return m;
}

void check_close(const Matrix& a, const Matrix& b, double tol = 1e-12) {
    REQUIRE(a.rows() == b.rows());
    REQUIRE(a.cols() == b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j)
            CHECK(a.at(i, j) == doctest::Approx(b.at(i, j)).epsilon(tol));
}

}  // namespace

TEST_CASE("matmul variants match the serial reference") {
    Rng rng(7);
    for (auto [m, n, p] : {std::tuple{3, 4, 5}, std::tuple{1, 8, 2},
                           std::tuple{17, 13, 11}, std::tuple{32, 32, 32}}) {
        Matrix a = random_matrix(m, n, rng);
        Matrix b = random_matrix(n, p, rng);
        Matrix c(m, p), c_ref(m, p);
        k::matmul(a, b, c);
        k::ref::matmul(a, b, c_ref);
        check_close(c, c_ref);

        Matrix bt = random_matrix(p, n, rng);
        Matrix d(m, p), d_ref(m, p);
        k::matmul_nt(a, bt, d);
        k::ref::matmul_nt(a, bt, d_ref);
        check_close(d, d_ref);

        Matrix at = random_matrix(n, m, rng);
        Matrix e(m, p), e_ref(m, p);
        Matrix b2 = random_matrix(n, p, rng);
        k::matmul_tn(at, b2, e);
        k::ref::matmul_tn(at, b2, e_ref);
        check_close(e, e_ref);
    }
}

TEST_CASE("matmul accumulate adds on top of existing values") {
    Rng rng(9);
    Matrix a = random_matrix(4, 6, rng), b = random_matrix(6, 3, rng);
    Matrix base = random_matrix(4, 3, rng);
    Matrix c = base;
    k::matmul(a, b, c, /*accumulate=*/true);
    Matrix prod(4, 3);
    k::ref::matmul(a, b, prod);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(c.at(i, j) ==
                  doctest::Approx(base.at(i, j) + prod.at(i, j)).epsilon(1e-12));
}

TEST_CASE("matmul rejects mismatched shapes") {
    Matrix a(2, 3), b(4, 2), c(2, 2);
    CHECK_THROWS_AS(k::matmul(a, b, c), std::invalid_argument);
}

TEST_CASE("softmax rows: sums to one, matches reference, shift invariant") {
    Rng rng(11);
    Matrix x = random_matrix(6, 9, rng);
    Matrix x_ref = x;
    k::softmax_rows(x);
    k::ref::softmax_rows(x_ref);
    CHECK(x == x_ref);  // identical per-row arithmetic
    for (int i = 0; i < x.rows(); ++i) {
        double sum = 0;
        for (int j = 0; j < x.cols(); ++j) {
            CHECK(x.at(i, j) >= 0.0);
            sum += x.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }

    Matrix shifted = x_ref;
    Rng rng2(11);
    Matrix y = random_matrix(6, 9, rng2);
    Matrix y_shift = y;
    for (int i = 0; i < y.rows(); ++i)
        for (int j = 0; j < y.cols(); ++j) y_shift.at(i, j) += 3.75;
    k::softmax_rows(y);
    k::softmax_rows(y_shift);
    check_close(y, y_shift, 1e-12);
}

TEST_CASE("softmax backward matches finite differences") {
    Rng rng(13);
    const int cols = 5;
    Matrix logits = random_matrix(2, cols, rng);
    Matrix dprobs = random_matrix(2, cols, rng);

    Matrix probs = logits;
    k::softmax_rows(probs);
    Matrix dlogits(2, cols);
    k::softmax_rows_backward(probs, dprobs, dlogits);

    const double eps = 1e-6;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < cols; ++j) {
            Matrix lp = logits, lm = logits;
            lp.at(i, j) += eps;
            lm.at(i, j) -= eps;
            k::softmax_rows(lp);
            k::softmax_rows(lm);
            double fd = 0;
            for (int c = 0; c < cols; ++c)
                fd += dprobs.at(i, c) * (lp.at(i, c) - lm.at(i, c)) / (2 * eps);
            CHECK(dlogits.at(i, j) == doctest::Approx(fd).epsilon(1e-6));
        }
}

TEST_CASE("layer norm backward matches finite differences") {
    Rng rng(17);
    const int rows = 3, cols = 8;
    Matrix x = random_matrix(rows, cols, rng);
    Matrix gamma = random_matrix(1, cols, rng);
    Matrix beta = random_matrix(1, cols, rng);
    Matrix dy = random_matrix(rows, cols, rng);

    Matrix y(rows, cols);
    std::vector<double> mean, rstd;
    k::layer_norm(x, gamma, beta, y, mean, rstd);

    Matrix dx(rows, cols), dgamma(1, cols), dbeta(1, cols);
    k::layer_norm_backward(x, gamma, mean, rstd, dy, dx, dgamma, dbeta);

    auto loss = [&](const Matrix& xx, const Matrix& g, const Matrix& b) {
        Matrix yy(rows, cols);
        std::vector<double> m2, r2;
        k::layer_norm(xx, g, b, yy, m2, r2);
        double s = 0;
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) s += dy.at(i, j) * yy.at(i, j);
        return s;
    };

    const double eps = 1e-6;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            Matrix xp = x, xm = x;
            xp.at(i, j) += eps;
            xm.at(i, j) -= eps;
            const double fd = (loss(xp, gamma, beta) - loss(xm, gamma, beta)) / (2 * eps);
            CHECK(dx.at(i, j) == doctest::Approx(fd).epsilon(1e-5));
        }
    for (int j = 0; j < cols; ++j) {
        Matrix gp = gamma, gm = gamma;
        gp.at(0, j) += eps;
        gm.at(0, j) -= eps;
        CHECK(dgamma.at(0, j) ==
              doctest::Approx((loss(x, gp, beta) - loss(x, gm, beta)) / (2 * eps))
                  .epsilon(1e-5));
        Matrix bp = beta, bm = beta;
        bp.at(0, j) += eps;
        bm.at(0, j) -= eps;
        CHECK(dbeta.at(0, j) ==
              doctest::Approx((loss(x, gamma, bp) - loss(x, gamma, bm)) / (2 * eps))
                  .epsilon(1e-5));
    }
}

TEST_CASE("gelu backward matches finite differences") {
    Rng rng(19);
    Matrix x = random_matrix(4, 6, rng);
    Matrix dy = random_matrix(4, 6, rng);
    Matrix dx(4, 6);
    k::gelu_backward(x, dy, dx);

    const double eps = 1e-6;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j) {
            Matrix xp = x, xm = x;
            xp.at(i, j) += eps;
            xm.at(i, j) -= eps;
            Matrix yp(4, 6), ym(4, 6);
            k::gelu(xp, yp);
            k::gelu(xm, ym);
            const double fd = dy.at(i, j) * (yp.at(i, j) - ym.at(i, j)) / (2 * eps);
            CHECK(dx.at(i, j) == doctest::Approx(fd).epsilon(1e-6));
        }
}

TEST_CASE("l2 normalize: unit output and finite-difference backward") {
    Rng rng(23);
    const int n = 7;
    std::vector<double> x(n), y(n), dy(n);
    for (auto& v : x) v = rng.normal();
    for (auto& v : dy) v = rng.normal();
    const double norm = k::l2_normalize(x.data(), y.data(), n);
    CHECK(k::l2_norm(y.data(), n) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(norm == doctest::Approx(k::l2_norm(x.data(), n)).epsilon(1e-12));

    std::vector<double> dx(n, 0.0);
    k::l2_normalize_backward(y.data(), norm, dy.data(), dx.data(), n);
    const double eps = 1e-7;
    for (int i = 0; i < n; ++i) {
        auto loss = [&](double delta) {
            std::vector<double> xp = x, yp(n);
            xp[i] += delta;
            k::l2_normalize(xp.data(), yp.data(), n);
            double s = 0;
            for (int j = 0; j < n; ++j) s += dy[j] * yp[j];
            return s;
        };
        CHECK(dx[i] == doctest::Approx((loss(eps) - loss(-eps)) / (2 * eps))
                           .epsilon(1e-5));
    }
}

TEST_CASE("l2 normalize rejects the zero vector") {
    std::vector<double> x(4, 0.0), y(4);
    CHECK_THROWS(k::l2_normalize(x.data(), y.data(), 4));
}

TEST_CASE("topk inner product equals the sorting reference") {
    Rng rng(29);
    const int64_t m = 500;
    const int d = 16;
    std::vector<float> vectors(m * d);
    for (auto& v : vectors) v = static_cast<float>(rng.normal());
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> q(d);
        for (auto& v : q) v = rng.normal();
        for (int kk : {1, 7, 32}) {
            const auto got = k::topk_inner_product(vectors.data(), m, d, q.data(), kk);
            const auto want = k::ref::topk_inner_product(vectors.data(), m, d, q.data(), kk);
            REQUIRE(got.size() == want.size());
            for (size_t i = 0; i < got.size(); ++i) {
                CHECK(got[i].second == want[i].second);
                CHECK(got[i].first == doctest::Approx(want[i].first).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("topk breaks score ties toward the lower row id") {
    const int d = 2;
    // Three identical rows, then a weaker one.
    std::vector<float> vectors = {1, 0, 1, 0, 1, 0, 0.5f, 0};
    std::vector<double> q = {1, 0};
    const auto got = k::topk_inner_product(vectors.data(), 4, d, q.data(), 2);
    REQUIRE(got.size() == 2);
    CHECK(got[0].second == 0);
    CHECK(got[1].second == 1);
}
