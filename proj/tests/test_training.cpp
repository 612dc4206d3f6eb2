#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "retrec/errors.hpp"
#include "retrec/kernels.hpp"
#include "retrec/synth.hpp"
#include "retrec/training.hpp"

using namespace retrec;
namespace fs = std::filesystem;

namespace {

// Small corpus that trains in a couple of seconds.
SynthOutput tiny_corpus(uint64_t seed = 3) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.synth_users = 60;
    cfg.synth_items = 60;
    cfg.synth_topics = 6;
    cfg.synth_sessions = 120;
    cfg.synth_user_len_min = 6;
    cfg.synth_user_len_max = 9;
    cfg.synth_sess_len_min = 8;
    cfg.synth_sess_len_max = 14;
    return generate_synthetic(cfg);
}

ExperimentConfig tiny_train_config(uint64_t seed = 3) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.encoder_dim = 16;
    cfg.encoder_layers = 1;
    cfg.encoder_heads = 1;
    cfg.encoder_max_len = 16;
    cfg.encoder_dropout = 0.0;
    cfg.cts_batch_size = 16;
    cfg.cts_bank_size = 64;
    cfg.train_batch_size = 16;
    cfg.train_stage1_epochs = 3;
    cfg.train_epochs = 2;
    cfg.train_patience = 5;
    cfg.fusion_k = 4;
    return cfg;
}

}  // namespace

TEST_CASE("Adam: converges on a quadratic and matches the first-step size") {
    Matrix p(1, 2);
    p.at(0, 0) = 3.0;
    p.at(0, 1) = -2.0;
    Adam adam(0.1, 0.9, 0.999, 1e-8);
    adam.attach({&p});
    // First step moves each coordinate by ~lr against the gradient sign.
    Matrix g(1, 2);
    g.at(0, 0) = 2.0 * p.at(0, 0);
    g.at(0, 1) = 2.0 * p.at(0, 1);
    adam.step({&p}, {&g});
    CHECK(p.at(0, 0) == doctest::Approx(3.0 - 0.1).epsilon(1e-6));
    CHECK(p.at(0, 1) == doctest::Approx(-2.0 + 0.1).epsilon(1e-6));

    for (int t = 0; t < 500; ++t) {
        g.at(0, 0) = 2.0 * p.at(0, 0);
        g.at(0, 1) = 2.0 * p.at(0, 1);
        adam.step({&p}, {&g});
    }
    CHECK(std::abs(p.at(0, 0)) < 0.05);
    CHECK(std::abs(p.at(0, 1)) < 0.05);
}

TEST_CASE("early stopping trace: flat scores stop at epoch 22 with best 2") {
    EarlyStopper stopper{20};
    int stopped_at = -1;
    for (int epoch = 1; epoch <= 100; ++epoch) {
        const double score = epoch == 1 ? 0.10 : 0.11;
        stopper.observe(epoch, score);
        if (stopper.should_stop()) {
            stopped_at = epoch;
            break;
        }
    }
    CHECK(stopped_at == 22);
    CHECK(stopper.best_epoch == 2);
    CHECK(stopper.best == doctest::Approx(0.11));
}

TEST_CASE("early stopping requires strict improvement") {
    EarlyStopper stopper{2};
    CHECK(stopper.observe(1, 0.5));
    CHECK_FALSE(stopper.observe(2, 0.5));
    CHECK_FALSE(stopper.observe(3, 0.4));
    CHECK(stopper.should_stop());
}

TEST_CASE("variant names round trip") {
    for (const char* name : {"full", "no_ra", "no_mc", "no_da", "no_as"})
        CHECK(variant_name(parse_variant(name)) == name);
    CHECK_THROWS_AS(parse_variant("bogus"), ConfigError);
}

TEST_CASE("stage 1 with lr=0: theta_q frozen, theta_k converges to it") {
    const SynthOutput synth = tiny_corpus();
    ExperimentConfig cfg = tiny_train_config();
    cfg.train_lr = 0.0;
    cfg.train_stage1_epochs = 1;
    cfg.cts_momentum = 0.5;

    const Stage1Result result = pretrain_stage1(synth.corpus, cfg);

    // Rebuild the initial query params the way the trainer does.
    const EncoderConfig ecfg = cfg.encoder_config(synth.corpus.vocab_size);
    Rng init_rng(Rng::derive(cfg.seed, 0x1a17));
    EncoderParams q0(ecfg);
    q0.init_random(init_rng);

    auto a = result.query.tensors();
    auto b = q0.tensors();
    for (size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);

    // With theta_q fixed and copy-init, theta_k stays equal to theta_q under
    // the momentum recursion.
    auto k = result.key.tensors();
    for (size_t i = 0; i < k.size(); ++i) CHECK(*k[i] == *a[i]);
}

TEST_CASE("stage 1 smoke: contrastive loss decreases on synthetic data") {
    const SynthOutput synth = tiny_corpus(7);
    ExperimentConfig cfg = tiny_train_config(7);
    cfg.train_stage1_epochs = 5;
    const Stage1Result result = pretrain_stage1(synth.corpus, cfg);
    REQUIRE(result.history.size() == 5);
    CHECK(result.history.back().cts_loss < result.history.front().cts_loss);
}

TEST_CASE("stage 1 separation: positive pairs beat bank negatives on average") {
    const SynthOutput synth = tiny_corpus(11);
    ExperimentConfig cfg = tiny_train_config(11);
    cfg.train_stage1_epochs = 6;
    const Stage1Result result = pretrain_stage1(synth.corpus, cfg);

    const EncoderConfig ecfg = cfg.encoder_config(synth.corpus.vocab_size);
    const AugmentationConfig aug = cfg.aug_config();
    Rng rng(Rng::derive(cfg.seed, 0x7e57));
    double pos_sum = 0, neg_sum = 0;
    int64_t pos_n = 0, neg_n = 0;
    std::vector<double> qv(ecfg.dim), vv(ecfg.dim), sv(ecfg.dim);
    for (int u = 0; u < 30; ++u) {
        const ItemSequence seq =
            truncate_recent(synth.corpus.user_sequences[u].second, ecfg.max_len);
        ItemSequence view = sample_view(seq, aug, ecfg.mask_id(), rng);
        const auto qe = encode(result.query, seq);
        const auto ve = encode(result.query, view);
        kernels::l2_normalize(qe.pooled.row(0), qv.data(), ecfg.dim);
        kernels::l2_normalize(ve.pooled.row(0), vv.data(), ecfg.dim);
        pos_sum += dot(qv.data(), vv.data(), ecfg.dim);
        ++pos_n;
        for (int s = 0; s < 10; ++s) {
            const auto& sess = synth.corpus.browsing_sessions[rng.uniform_int(
                synth.corpus.browsing_sessions.size())];
            const auto se = encode(result.key, truncate_recent(sess, ecfg.max_len));
            kernels::l2_normalize(se.pooled.row(0), sv.data(), ecfg.dim);
            neg_sum += dot(qv.data(), sv.data(), ecfg.dim);
            ++neg_n;
        }
    }
    CHECK(pos_sum / pos_n > neg_sum / neg_n);
}

TEST_CASE("theta_k equals the momentum recursion replayed from theta_q steps") {
    // Tiny run with one batch per epoch so the recursion is easy to replay.
    const SynthOutput synth = tiny_corpus(13);
    ExperimentConfig cfg = tiny_train_config(13);
    cfg.cts_batch_size = 64;  // one step per epoch (60 users)
    cfg.train_stage1_epochs = 4;
    cfg.cts_momentum = 0.9;

    // Instrumented replay: run stage 1 twice with the same seed; the second
    // run's query trajectory is identical, so replaying Eq-style updates on
    // the logged checkpoints must reproduce theta_k exactly.
    const std::string dir = "stage1_replay_test";
    fs::remove_all(dir);
    const Stage1Result run = pretrain_stage1(synth.corpus, cfg, Variant::full, dir);

    // Replay: theta_k(0) = theta_q(0); after each step k = m*k + (1-m)*q(t).
    const EncoderConfig ecfg = cfg.encoder_config(synth.corpus.vocab_size);
    Rng init_rng(Rng::derive(cfg.seed, 0x1a17));
    EncoderParams q_replay(ecfg);
    q_replay.init_random(init_rng);
    EncoderParams k_replay = q_replay;

    // One-step-per-epoch run: the per-epoch checkpoints are exactly the
    // per-step q values.
    for (int epoch = 1; epoch <= cfg.train_stage1_epochs; ++epoch) {
        // Checkpoints were overwritten each epoch; rerun a fresh single-epoch
        // training to fetch q(t) instead.
        ExperimentConfig sub = cfg;
        sub.train_stage1_epochs = epoch;
        const Stage1Result partial = pretrain_stage1(synth.corpus, sub);
        momentum_update(partial.query, k_replay, cfg.cts_momentum);
    }
    auto got = run.key.tensors();
    auto want = k_replay.tensors();
    for (size_t i = 0; i < got.size(); ++i) {
        REQUIRE(got[i]->size() == want[i]->size());
        for (size_t j = 0; j < got[i]->size(); ++j)
            CHECK(got[i]->data()[j] ==
                  doctest::Approx(want[i]->data()[j]).epsilon(1e-12));
    }
    fs::remove_all(dir);
}

TEST_CASE("stage 2 smoke: runs, early-stops, keeps the index file fixed") {
    const SynthOutput synth = tiny_corpus(17);
    ExperimentConfig cfg = tiny_train_config(17);
    const Stage1Result stage1 = pretrain_stage1(synth.corpus, cfg);

    const RetrievalIndex index = RetrievalIndex::build(
        synth.corpus.browsing_sessions, stage1.key, IndexMode::exact);
    const std::string index_path = "stage2_index_test.bin";
    index.save(index_path);
    std::ifstream f1(index_path, std::ios::binary);
    const std::string before((std::istreambuf_iterator<char>(f1)),
                             std::istreambuf_iterator<char>());

    const Stage2Result result = train_stage2(synth.corpus, &index, stage1.query,
                                             stage1.key, cfg, Variant::full);
    CHECK(result.best_epoch >= 1);
    CHECK(result.history.size() >= 1);
    CHECK(result.best_valid_ndcg10 >= 0.0);

    // The fixed-index contract: the file is untouched by training.
    std::ifstream f2(index_path, std::ios::binary);
    const std::string after((std::istreambuf_iterator<char>(f2)),
                            std::istreambuf_iterator<char>());
    CHECK(before == after);
    std::remove(index_path.c_str());

    // Reported best epoch maximizes the validation history.
    double best = -1;
    int best_epoch = -1;
    for (const auto& e : result.history)
        if (e.valid_ndcg10 > best) {
            best = e.valid_ndcg10;
            best_epoch = e.epoch;
        }
    CHECK(result.best_epoch == best_epoch);
    CHECK(result.best_valid_ndcg10 == doctest::Approx(best));
}

TEST_CASE("joint loss equals L_CTS + L_CF recomputed independently") {
    // Fixed state, fixed batch: the joint objective must equal a from-scratch
    // recomputation of both terms that bypasses the module code paths.
    Rng rng(19);
    const int n = 3, dim = 4, vocab = 6;
    Matrix za(n, dim), zb(n, dim);
    std::vector<double> buf(dim);
    auto fill_unit = [&](Matrix& m) {
        m.randn(rng, 1.0);
        for (int i = 0; i < m.rows(); ++i) {
            kernels::l2_normalize(m.row(i), buf.data(), dim);
            std::copy(buf.begin(), buf.end(), m.row(i));
        }
    };
    fill_unit(za);
    fill_unit(zb);
    MemoryBank bank(8, dim);
    Matrix negs(2, dim);
    fill_unit(negs);
    bank.enqueue(negs);
    const double tau = 0.3;
    const double cts = info_nce_loss(za, zb, tau, bank).total / (2.0 * n);

    // Manual Eq-free recomputation with plain loops.
    auto row = [&](int u) { return u < n ? za.row(u) : zb.row(u - n); };
    double cts_manual = 0;
    for (int u = 0; u < 2 * n; ++u) {
        const int p = u < n ? u + n : u - n;
        double denom = 0;
        for (int i = 0; i < 2 * n; ++i)
            if (i != u) denom += std::exp(dot(row(u), row(i), dim) / tau);
        for (int b = 0; b < 2; ++b)
            denom += std::exp(dot(row(u), negs.row(b), dim) / tau);
        cts_manual += -std::log(std::exp(dot(row(u), row(p), dim) / tau) / denom);
    }
    cts_manual /= 2.0 * n;
    CHECK(cts == doctest::Approx(cts_manual).epsilon(1e-9));

    FusionHead head(dim, vocab, false);
    Rng hrng(21);
    head.init_random(hrng);
    std::vector<Matrix> probs;
    std::vector<int32_t> targets = {1, 4, 2};
    for (int i = 0; i < n; ++i) {
        Matrix hu(1, dim);
        std::copy(za.row(i), za.row(i) + dim, hu.row(0));
        Matrix ctx(1, dim);
        probs.push_back(predict(hu, ctx, head, head.item_out));
    }
    const double cf = cf_loss(probs, targets);
    double cf_manual = 0;
    for (int i = 0; i < n; ++i) cf_manual += -std::log(probs[i].at(0, targets[i]));
    cf_manual /= n;
    CHECK(cf == doctest::Approx(cf_manual).epsilon(1e-9));

    const double joint = cts + cf;
    CHECK(joint == doctest::Approx(cts_manual + cf_manual).epsilon(1e-6));
}

TEST_CASE("no_ra variant trains without an index") {
    const SynthOutput synth = tiny_corpus(23);
    ExperimentConfig cfg = tiny_train_config(23);
    const Stage1Result stage1 = pretrain_stage1(synth.corpus, cfg, Variant::no_ra);
    const Stage2Result result = train_stage2(synth.corpus, nullptr, stage1.query,
                                             stage1.key, cfg, Variant::no_ra);
    CHECK(result.best_epoch >= 1);
}

TEST_CASE("determinism: same seed twice gives identical stage-1 parameters") {
    const SynthOutput synth = tiny_corpus(29);
    const ExperimentConfig cfg = tiny_train_config(29);
    const Stage1Result a = pretrain_stage1(synth.corpus, cfg);
    const Stage1Result b = pretrain_stage1(synth.corpus, cfg);
    auto ta = a.query.tensors();
    auto tb = b.query.tensors();
    for (size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i] == *tb[i]);
}

TEST_CASE("model directory round trip") {
    const SynthOutput synth = tiny_corpus(31);
    ExperimentConfig cfg = tiny_train_config(31);
    cfg.train_stage1_epochs = 1;
    const Stage1Result stage1 = pretrain_stage1(synth.corpus, cfg);

    const std::string dir = "model_dir_test";
    fs::remove_all(dir);
    save_stage1_dir(dir, stage1, cfg, synth.corpus.vocab_size);
    const ModelArtifacts loaded = load_model_dir(dir, cfg);
    CHECK_FALSE(loaded.has_head);
    CHECK(loaded.query.cfg.dim == cfg.encoder_dim);
    // float32 round trip.
    CHECK(loaded.query.item_emb.at(3, 3) ==
          doctest::Approx(stage1.query.item_emb.at(3, 3)).epsilon(1e-6));
    fs::remove_all(dir);
}
