#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "retrec/errors.hpp"
#include "retrec/fusion.hpp"
#include "retrec/kernels.hpp"

using namespace retrec;

namespace {

FusionHead toy_head(int dim, int vocab, uint64_t seed = 5, bool tied = false) {
    FusionHead head(dim, vocab, tied);
    Rng rng(seed);
    head.init_random(rng);
    return head;
}

Matrix random_row(int dim, Rng& rng) {
    Matrix m(1, dim);
    m.randn(rng, 1.0);
    return m;
}

}  // namespace

TEST_CASE("attentive_select: identical states give uniform weights") {
    const int d = 4;
    FusionHead head = toy_head(d, 10);
    Rng rng(3);
    const Matrix hu = random_row(d, rng);
    Matrix states(3, d);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < d; ++j) states.at(i, j) = 0.5 * j - 1.0;

    const AttentionSelection sel = attentive_select(hu, states, head);
    REQUIRE(sel.weights.size() == 3);
    for (double w : sel.weights) CHECK(w == doctest::Approx(1.0 / 3).epsilon(1e-12));
    for (int j = 0; j < d; ++j)
        CHECK(sel.pooled.at(0, j) == doctest::Approx(states.at(0, j)).epsilon(1e-12));
}

TEST_CASE("attentive_select: single state gets weight 1") {
    const int d = 4;
    FusionHead head = toy_head(d, 10);
    Rng rng(5);
    const Matrix hu = random_row(d, rng);
    const Matrix states = random_row(d, rng);
    const AttentionSelection sel = attentive_select(hu, states, head);
    REQUIRE(sel.weights.size() == 1);
    CHECK(sel.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
    for (int j = 0; j < d; ++j)
        CHECK(sel.pooled.at(0, j) == doctest::Approx(states.at(0, j)).epsilon(1e-12));
}

TEST_CASE("attentive_select: logits [0, ln2] give weights [1/3, 2/3]") {
    const int d = 2;
    FusionHead head(d, 10, false);
    // w1 = 0 so the query adds nothing; w2 = e1 reads the first coordinate.
    head.w2.at(0, 0) = 1.0;
    Matrix hu(1, d);
    Matrix states(2, d);
    states.at(0, 0) = 0.0;
    states.at(0, 1) = 3.0;
    states.at(1, 0) = std::log(2.0);
    states.at(1, 1) = -1.0;

    const AttentionSelection sel = attentive_select(hu, states, head);
    CHECK(sel.weights[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(sel.weights[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));
    // Hand-computed weighted sum.
    CHECK(sel.pooled.at(0, 0) ==
          doctest::Approx(std::log(2.0) * 2.0 / 3.0).epsilon(1e-12));
    CHECK(sel.pooled.at(0, 1) ==
          doctest::Approx(3.0 / 3.0 - 2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("attention weights: nonnegative and sum to 1 (property)") {
    Rng rng(7);
    const int d = 6;
    FusionHead head = toy_head(d, 10, 11);
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix hu = random_row(d, rng);
        Matrix states(1 + static_cast<int>(rng.uniform_int(8)), d);
        states.randn(rng, 2.0);
        const AttentionSelection sel = attentive_select(hu, states, head);
        double sum = 0;
        for (double w : sel.weights) {
            CHECK(w >= 0.0);
            sum += w;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        // o_i lies in the convex hull: each coordinate within [min, max].
        for (int j = 0; j < d; ++j) {
            double lo = states.at(0, j), hi = states.at(0, j);
            for (int i = 1; i < states.rows(); ++i) {
                lo = std::min(lo, states.at(i, j));
                hi = std::max(hi, states.at(i, j));
            }
            CHECK(sel.pooled.at(0, j) >= lo - 1e-9);
            CHECK(sel.pooled.at(0, j) <= hi + 1e-9);
        }
    }
}

TEST_CASE("mean_select matches uniform attentive weights") {
    Rng rng(9);
    Matrix states(4, 3);
    states.randn(rng, 1.0);
    const AttentionSelection sel = mean_select(states);
    for (double w : sel.weights) CHECK(w == doctest::Approx(0.25).epsilon(1e-12));
    for (int j = 0; j < 3; ++j) {
        double mean = 0;
        for (int i = 0; i < 4; ++i) mean += states.at(i, j) / 4;
        CHECK(sel.pooled.at(0, j) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("aggregate_context: single hit, cancellation, recompute oracle") {
    Rng rng(11);
    const int d = 5;
    Matrix o1 = random_row(d, rng);

    const Matrix single = aggregate_context({1.0}, {o1}, d);
    for (int j = 0; j < d; ++j)
        CHECK(single.at(0, j) == doctest::Approx(o1.at(0, j)).epsilon(1e-12));

    Matrix o2 = o1;
    kernels::scale(o2, -1.0);
    const Matrix zero = aggregate_context({0.5, 0.5}, {o1, o2}, d);
    for (int j = 0; j < d; ++j) CHECK(zero.at(0, j) == doctest::Approx(0.0));

    std::vector<double> scores = {0.3, -0.2, 1.7};
    std::vector<Matrix> os = {random_row(d, rng), random_row(d, rng),
                              random_row(d, rng)};
    const Matrix got = aggregate_context(scores, os, d);
    for (int j = 0; j < d; ++j) {
        double want = 0;
        for (int i = 0; i < 3; ++i) want += scores[i] * os[i].at(0, j);
        CHECK(got.at(0, j) == doctest::Approx(want).epsilon(1e-6));
    }

    const Matrix empty = aggregate_context({}, {}, d);
    for (int j = 0; j < d; ++j) CHECK(empty.at(0, j) == 0.0);
}

TEST_CASE("predict: distribution sums to 1 and is shift invariant") {
    Rng rng(13);
    const int d = 4, vocab = 7;
    FusionHead head = toy_head(d, vocab, 17);
    const Matrix hu = random_row(d, rng);
    const Matrix context = random_row(d, rng);
    const Matrix probs = predict(hu, context, head, head.item_out);
    REQUIRE(probs.cols() == vocab);
    double sum = 0;
    for (int j = 0; j < vocab; ++j) {
        CHECK(probs.at(0, j) >= 0.0);
        sum += probs.at(0, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("predict: |V|=3 hand-computed softmax") {
    const int d = 2, vocab = 3;
    FusionHead head(d, vocab, false);
    // Identity-ish MLP: w2 = I so mlp_out = tanh(mlp_in · w1).
    head.mlp_w2.at(0, 0) = 1.0;
    head.mlp_w2.at(1, 1) = 1.0;
    head.mlp_w1.at(0, 0) = 1.0;  // hidden_0 = hu_0
    head.mlp_w1.at(1, 1) = 1.0;  // hidden_1 = hu_1
    head.item_out.at(0, 0) = 1.0;                              // w_0 = e1
    head.item_out.at(1, 1) = 1.0;                              // w_1 = e2
    head.item_out.at(2, 0) = head.item_out.at(2, 1) = 0.5;     // w_2

    Matrix hu(1, d);
    hu.at(0, 0) = 0.3;
    hu.at(0, 1) = -0.8;
    Matrix context(1, d);  // zero context

    const double z0 = std::tanh(0.3), z1 = std::tanh(-0.8);
    const double l0 = z0, l1 = z1, l2 = 0.5 * (z0 + z1);
    const double mx = std::max({l0, l1, l2});
    const double denom =
        std::exp(l0 - mx) + std::exp(l1 - mx) + std::exp(l2 - mx);
    const Matrix probs = predict(hu, context, head, head.item_out);
    CHECK(probs.at(0, 0) == doctest::Approx(std::exp(l0 - mx) / denom).epsilon(1e-12));
    CHECK(probs.at(0, 1) == doctest::Approx(std::exp(l1 - mx) / denom).epsilon(1e-12));
    CHECK(probs.at(0, 2) == doctest::Approx(std::exp(l2 - mx) / denom).epsilon(1e-12));
}

TEST_CASE("cf_loss: exact values") {
    Matrix certain(1, 4);
    certain.at(0, 2) = 1.0;
    CHECK(cf_loss({certain}, {2}) == doctest::Approx(0.0).epsilon(1e-12));

    Matrix uniform(1, 4);
    uniform.fill(0.25);
    CHECK(cf_loss({uniform}, {1}) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));

    Matrix p1(1, 4), p2(1, 4);
    p1.at(0, 0) = 0.7;
    p1.at(0, 1) = 0.1;
    p1.at(0, 2) = 0.1;
    p1.at(0, 3) = 0.1;
    p2.at(0, 0) = 0.2;
    p2.at(0, 1) = 0.5;
    p2.at(0, 2) = 0.2;
    p2.at(0, 3) = 0.1;
    const double want = 0.5 * (-std::log(0.7) - std::log(0.5));
    CHECK(cf_loss({p1, p2}, {0, 1}) == doctest::Approx(want).epsilon(1e-12));
    const double want_sum = -std::log(0.7) - std::log(0.5);
    CHECK(cf_loss({p1, p2}, {0, 1}, /*mean_reduction=*/false) ==
          doctest::Approx(want_sum).epsilon(1e-12));

    // Zero probability clamps rather than exploding.
    Matrix zerop(1, 2);
    zerop.at(0, 0) = 1.0;
    CHECK(cf_loss({zerop}, {1}) == doctest::Approx(-std::log(1e-12)).epsilon(1e-9));
    CHECK_THROWS_AS(cf_loss({zerop}, {5}), DataError);
}

TEST_CASE("fusion end-to-end gradients match finite differences") {
    Rng rng(19);
    const int d = 4, vocab = 6;
    FusionHead head = toy_head(d, vocab, 23);
    Matrix hu = random_row(d, rng);
    std::vector<Matrix> states = {Matrix(3, d), Matrix(2, d)};
    states[0].randn(rng, 1.0);
    states[1].randn(rng, 1.0);
    std::vector<double> scores = {0.8, 0.35};
    const int32_t target = 2;

    auto loss_value = [&]() {
        FusionCache cache;
        fusion_forward(head, head.item_out, hu, states, scores,
                       SelectorKind::attentive, false, cache);
        double p = cache.probs.at(0, target);
        return -std::log(p);
    };

    FusionCache cache;
    fusion_forward(head, head.item_out, hu, states, scores,
                   SelectorKind::attentive, false, cache);
    Matrix d_logits = cache.probs;
    d_logits.at(0, target) -= 1.0;  // d(-log p_t)/d logits
    FusionGrads grads;
    fusion_backward(head, head.item_out, cache, d_logits, grads);

    const double eps = 1e-6;
    auto fd_scalar = [&](double* v) {
        const double orig = *v;
        *v = orig + eps;
        const double up = loss_value();
        *v = orig - eps;
        const double down = loss_value();
        *v = orig;
        return (up - down) / (2 * eps);
    };
    auto check_grad = [&](double analytic, double fd, const char* what) {
        const double tol = 1e-3 * std::max(1.0, std::abs(analytic));
        CHECK_MESSAGE(std::abs(analytic - fd) <= tol, what, ": analytic ",
                      analytic, " vs fd ", fd);
    };

    // Head parameters.
    std::vector<std::string> names;
    std::vector<Matrix*> tensors;
    head.visit([&](const std::string& n, Matrix& m) {
        names.push_back(n);
        tensors.push_back(&m);
    });
    std::vector<Matrix*> grad_tensors = grads.head.tensors();
    for (size_t t = 0; t < tensors.size(); ++t) {
        Matrix* analytic = names[t] == "item_out" ? &grads.d_output_emb
                                                  : grad_tensors[t];
        for (size_t i = 0; i < tensors[t]->size(); i += 3)
            check_grad(analytic->data()[i], fd_scalar(tensors[t]->data() + i),
                       names[t].c_str());
    }
    // Inputs: h_u, session states, scores.
    for (size_t i = 0; i < hu.size(); ++i)
        check_grad(grads.d_hu.data()[i], fd_scalar(hu.data() + i), "h_u");
    for (size_t s = 0; s < states.size(); ++s)
        for (size_t i = 0; i < states[s].size(); ++i)
            check_grad(grads.d_states[s].data()[i],
                       fd_scalar(states[s].data() + i), "states");
    for (size_t s = 0; s < scores.size(); ++s)
        check_grad(grads.d_scores[s], fd_scalar(&scores[s]), "scores");
}

TEST_CASE("fusion gradients with mean selector and normalized scores") {
    Rng rng(29);
    const int d = 3, vocab = 4;
    FusionHead head = toy_head(d, vocab, 31);
    Matrix hu = random_row(d, rng);
    std::vector<Matrix> states = {Matrix(2, d)};
    states[0].randn(rng, 1.0);
    std::vector<double> scores = {0.6};
    const int32_t target = 1;

    for (bool normalize : {false, true}) {
        auto loss_value = [&]() {
            FusionCache cache;
            fusion_forward(head, head.item_out, hu, states, scores,
                           SelectorKind::mean, normalize, cache);
            return -std::log(cache.probs.at(0, target));
        };
        FusionCache cache;
        fusion_forward(head, head.item_out, hu, states, scores,
                       SelectorKind::mean, normalize, cache);
        Matrix d_logits = cache.probs;
        d_logits.at(0, target) -= 1.0;
        FusionGrads grads;
        fusion_backward(head, head.item_out, cache, d_logits, grads);

        const double eps = 1e-6;
        for (size_t i = 0; i < hu.size(); ++i) {
            const double orig = hu.data()[i];
            hu.data()[i] = orig + eps;
            const double up = loss_value();
            hu.data()[i] = orig - eps;
            const double down = loss_value();
            hu.data()[i] = orig;
            const double fd = (up - down) / (2 * eps);
            CHECK(std::abs(grads.d_hu.data()[i] - fd) <=
                  1e-3 * std::max(1.0, std::abs(grads.d_hu.data()[i])));
        }
    }
}

TEST_CASE("zero context degenerate path: empty retrieval still predicts") {
    Rng rng(37);
    const int d = 4, vocab = 5;
    FusionHead head = toy_head(d, vocab, 41);
    const Matrix hu = random_row(d, rng);

    FusionCache cache;
    fusion_forward(head, head.item_out, hu, {}, {}, SelectorKind::attentive,
                   false, cache);
    double sum = 0;
    for (int j = 0; j < vocab; ++j) sum += cache.probs.at(0, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    // Context half of the MLP input is zero.
    for (int j = d; j < 2 * d; ++j) CHECK(cache.mlp_in.at(0, j) == 0.0);
}

TEST_CASE("fusion head checkpoint round trip") {
    FusionHead head = toy_head(3, 8, 43);
    save_fusion_head("fusion_head_test.bin", head);
    const FusionHead loaded = load_fusion_head("fusion_head_test.bin", 3, 8, false);
    // float32 round trip keeps values within 1e-6.
    CHECK(loaded.w1.at(0, 0) == doctest::Approx(head.w1.at(0, 0)).epsilon(1e-6));
    CHECK(loaded.item_out.at(7, 2) ==
          doctest::Approx(head.item_out.at(7, 2)).epsilon(1e-6));
    CHECK_THROWS(load_fusion_head("fusion_head_test.bin", 4, 8, false));
    std::remove("fusion_head_test.bin");
}
