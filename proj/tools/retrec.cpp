// Command-line entry point: one verb per pipeline stage.
//
//   synth       generate a synthetic corpus
//   preprocess  ingest raw event logs into a corpus directory
//   pretrain    stage-1 momentum-contrastive pretraining
//   index       build the browsing-session retrieval index
//   retrieve    query the index for one user
//   train       stage-2 joint training against a fixed index
//   ablate      run an ablation variant end to end
//   evaluate    leave-one-out metrics for a checkpoint
//   pipeline    synth/load -> pretrain -> index -> train -> evaluate

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "retrec/config.hpp"
#include "retrec/dataset.hpp"
#include "retrec/errors.hpp"
#include "retrec/evaluation.hpp"
#include "retrec/kernels.hpp"
#include "retrec/retrieval.hpp"
#include "retrec/session_states.hpp"
#include "retrec/synth.hpp"
#include "retrec/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace retrec;

namespace {

struct CommonOpts {
    std::string config_path;
    int64_t seed_override = -1;
    int threads_override = 0;
};

ExperimentConfig resolve_config(const CommonOpts& opts) {
    ExperimentConfig cfg = opts.config_path.empty()
                               ? ExperimentConfig{}
                               : ExperimentConfig::from_file(opts.config_path);
    if (opts.seed_override >= 0) cfg.seed = static_cast<uint64_t>(opts.seed_override);
    if (opts.threads_override > 0) cfg.threads = opts.threads_override;
    cfg.validate();
#ifdef _OPENMP
    omp_set_num_threads(cfg.threads);
#endif
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = false) {
    auto* c = cmd->add_option("--config", opts.config_path,
                              "experiment config file (key = value lines)");
    if (config_required) c->required();
    cmd->add_option("--seed", opts.seed_override, "override the config seed");
    cmd->add_option("--threads", opts.threads_override,
                    "override worker threads (1 = deterministic)");
}

json metrics_to_json(const MetricReport& report) {
    json j;
    for (const auto& [name, value] : report.values) j[name] = value;
    return j;
}

json history_to_json(const std::vector<EpochStats>& history) {
    json j = json::array();
    for (const auto& e : history) {
        json entry;
        entry["epoch"] = e.epoch;
        entry["cts_loss"] = e.cts_loss;
        entry["cf_loss"] = e.cf_loss;
        entry["valid_ndcg10"] = e.valid_ndcg10;
        j.push_back(entry);
    }
    return j;
}

json config_to_json(const ExperimentConfig& cfg) {
    json j;
    std::istringstream is(cfg.to_text());
    std::string line;
    while (std::getline(is, line)) {
        const size_t eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        j[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return j;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + path);
    os << j.dump(2) << "\n";
}

void write_run_manifest(const std::string& dir, const ExperimentConfig& cfg,
                        const std::vector<EpochStats>& history, int best_epoch,
                        double best_valid) {
    json run;
    run["config"] = config_to_json(cfg);
    run["config_hash"] = cfg.hash();
    run["seed"] = cfg.seed;
    run["history"] = history_to_json(history);
    if (best_epoch >= 0) {
        run["best_epoch"] = best_epoch;
        run["best_valid_ndcg10"] = best_valid;
    }
    write_json((fs::path(dir) / "run.json").string(), run);
}

void print_metrics(const std::string& label, const MetricReport& report) {
    std::cout << label << ":";
    for (const auto& [name, value] : report.values)
        std::cout << " " << name << "=" << value;
    std::cout << " (n=" << report.n_users << ")\n";
}

// Accepts either a model directory or a single checkpoint file whose
// meta.json sits alongside it.
EncoderParams load_encoder_file(const std::string& path, const char* role) {
    fs::path p(path);
    fs::path dir = fs::is_directory(p) ? p : p.parent_path();
    std::ifstream is(dir / "meta.json");
    if (!is) throw DataError("cannot open meta.json next to checkpoint " + path);
    json meta = json::parse(is, nullptr, false);
    if (meta.is_discarded()) throw DataError("invalid meta.json next to " + path);
    EncoderConfig ecfg;
    ecfg.vocab_size = meta.at("vocab_size").get<int>();
    ecfg.dim = meta.at("dim").get<int>();
    ecfg.n_layers = meta.at("layers").get<int>();
    ecfg.n_heads = meta.at("heads").get<int>();
    ecfg.max_len = meta.at("max_len").get<int>();
    ecfg.ff_mult = meta.at("ff_mult").get<int>();
    ecfg.dropout = meta.at("dropout").get<double>();
    const fs::path file = fs::is_directory(p) ? p / (std::string(role) + ".bin") : p;
    return load_checkpoint(file.string(), ecfg);
}

json experiment_report(const ExperimentResult& result, const ExperimentConfig& cfg,
                       const std::string& variant) {
    json report;
    report["variant"] = variant;
    report["config_hash"] = cfg.hash();
    report["n_users"] = result.test.n_users;
    report["metrics"] = metrics_to_json(result.test);
    report["valid"] = metrics_to_json(result.valid);
    report["retrieval"] = metrics_to_json(result.retrieval);
    report["retrieval_candidates"] = result.retrieval.n_candidates;
    report["best_epoch"] = result.stage2.best_epoch;
    return report;
}

int run_experiment_verb(const Corpus& corpus, const ExperimentConfig& cfg,
                        Variant variant, const std::string& out_dir) {
    const ExperimentResult result = run_experiment(corpus, cfg, variant, out_dir);
    write_run_manifest(out_dir, cfg, result.stage2.history,
                       result.stage2.best_epoch, result.stage2.best_valid_ndcg10);
    write_json((fs::path(out_dir) / "report.json").string(),
               experiment_report(result, cfg, variant_name(variant)));
    print_metrics("valid", result.valid);
    print_metrics("test", result.test);
    print_metrics("retrieval", result.retrieval);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retrec: retrieval-augmented sequential recommender"};
    app.require_subcommand(1);
    app.footer(ExperimentConfig::describe_keys());

    // --- synth ---
    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    CommonOpts synth_opts;
    std::string synth_out;
    int64_t synth_users = -1, synth_items = -1, synth_topics = -1, synth_sessions = -1;
    add_common(synth, synth_opts);
    synth->add_option("--out", synth_out, "corpus output directory")->required();
    synth->add_option("--users", synth_users, "override synth.users");
    synth->add_option("--items", synth_items, "override synth.items");
    synth->add_option("--topics", synth_topics, "override synth.topics");
    synth->add_option("--sessions", synth_sessions, "override synth.sessions");

    // --- preprocess ---
    auto* prep = app.add_subcommand("preprocess", "ingest raw event logs");
    std::string prep_events, prep_catalog, prep_browsing, prep_out;
    double prep_gap_hours = 4.0;
    int prep_min_len = 5, prep_max_len = 50;
    prep->add_option("--events", prep_events, "interaction log (user\\tkey\\tts)")
        ->required();
    prep->add_option("--catalog", prep_catalog, "catalog (key\\tid)")->required();
    prep->add_option("--browsing", prep_browsing,
                     "separate browsing log; defaults to --events");
    prep->add_option("--gap-hours", prep_gap_hours, "session gap in hours");
    prep->add_option("--min-len", prep_min_len, "minimum sequence length");
    prep->add_option("--max-len", prep_max_len, "maximum kept length");
    prep->add_option("--out", prep_out, "corpus output directory")->required();

    // --- pretrain ---
    auto* pretrain = app.add_subcommand("pretrain", "stage-1 contrastive pretraining");
    CommonOpts pre_opts;
    std::string pre_corpus, pre_out;
    pretrain->add_option("--corpus", pre_corpus, "corpus directory")->required();
    pretrain->add_option("--out", pre_out, "checkpoint output directory")->required();
    add_common(pretrain, pre_opts, /*config_required=*/true);

    // --- index ---
    auto* index_cmd = app.add_subcommand("index", "build the retrieval index");
    std::string idx_corpus, idx_ckpt, idx_mode = "exact", idx_out;
    int idx_nlist = 0;
    index_cmd->add_option("--corpus", idx_corpus, "corpus directory")->required();
    index_cmd->add_option("--checkpoint", idx_ckpt,
                          "model dir or key checkpoint file")->required();
    index_cmd->add_option("--mode", idx_mode, "exact|clustered");
    index_cmd->add_option("--nlist", idx_nlist, "cluster count (0 = sqrt(M))");
    index_cmd->add_option("--out", idx_out, "index output file")->required();

    // --- retrieve ---
    auto* retrieve = app.add_subcommand("retrieve", "top-k sessions for one user");
    std::string ret_index, ret_user, ret_corpus, ret_ckpt;
    int ret_k = 10;
    retrieve->add_option("--index", ret_index, "index file")->required();
    retrieve->add_option("--query-user", ret_user, "user id")->required();
    retrieve->add_option("--k", ret_k, "hits to return");
    retrieve->add_option("--corpus", ret_corpus, "corpus directory")->required();
    retrieve->add_option("--checkpoint", ret_ckpt,
                         "model dir or query checkpoint file")->required();

    // --- train ---
    auto* train = app.add_subcommand("train", "stage-2 joint training");
    CommonOpts train_opts;
    std::string train_corpus, train_index, train_out, train_init, train_variant = "full";
    train->add_option("--corpus", train_corpus, "corpus directory")->required();
    train->add_option("--index", train_index, "fixed index file")->required();
    train->add_option("--out", train_out, "checkpoint output directory")->required();
    train->add_option("--init", train_init,
                      "stage-1 checkpoint directory (defaults to --out)");
    train->add_option("--variant", train_variant, "full|no_ra|no_mc|no_da|no_as");
    add_common(train, train_opts, /*config_required=*/true);

    // --- ablate ---
    auto* ablate = app.add_subcommand("ablate", "run an ablation variant end to end");
    CommonOpts abl_opts;
    std::string abl_corpus, abl_out, abl_variant;
    ablate->add_option("--corpus", abl_corpus, "corpus directory")->required();
    ablate->add_option("--variant", abl_variant, "no_ra|no_mc|no_da|no_as|full")
        ->required();
    ablate->add_option("--out", abl_out, "output directory")->required();
    add_common(ablate, abl_opts, /*config_required=*/true);

    // --- evaluate ---
    auto* eval = app.add_subcommand("evaluate", "leave-one-out metrics");
    CommonOpts eval_opts;
    std::string eval_ckpt, eval_index, eval_split = "test", eval_report, eval_corpus;
    std::string eval_dump;
    eval->add_option("--ckpt", eval_ckpt, "model directory")->required();
    eval->add_option("--index", eval_index, "index file (omit to disable retrieval)");
    eval->add_option("--split", eval_split, "valid|test");
    eval->add_option("--report", eval_report, "report JSON output path");
    eval->add_option("--corpus", eval_corpus, "corpus directory")->required();
    eval->add_option("--dump-ranks", eval_dump, "per-user rank TSV output");
    add_common(eval, eval_opts);

    // --- pipeline ---
    auto* pipeline = app.add_subcommand("pipeline", "full end-to-end run");
    CommonOpts pipe_opts;
    std::string pipe_out, pipe_corpus, pipe_variant = "full";
    pipeline->add_option("--out", pipe_out, "output directory")->required();
    pipeline->add_option("--corpus", pipe_corpus,
                         "existing corpus directory (default: synthesize)");
    pipeline->add_option("--variant", pipe_variant, "full|no_ra|no_mc|no_da|no_as");
    add_common(pipeline, pipe_opts);

    try {
        app.parse(argc, argv);

        if (*synth) {
            ExperimentConfig cfg = resolve_config(synth_opts);
            if (synth_users > 0) cfg.synth_users = static_cast<int>(synth_users);
            if (synth_items > 0) cfg.synth_items = static_cast<int>(synth_items);
            if (synth_topics > 0) cfg.synth_topics = static_cast<int>(synth_topics);
            if (synth_sessions > 0)
                cfg.synth_sessions = static_cast<int>(synth_sessions);
            const SynthOutput out = generate_synthetic(cfg);
            validate_corpus(out.corpus, kMinSequenceLen);
            save_corpus(synth_out, out.corpus, out.vocab_keys);
            std::cout << "wrote corpus: " << out.corpus.user_sequences.size()
                      << " users, " << out.corpus.browsing_sessions.size()
                      << " sessions, |V|=" << out.corpus.vocab_size << "\n";
        } else if (*prep) {
            const auto events = load_events(prep_events);
            const Catalog catalog = load_catalog(prep_catalog);
            std::optional<std::vector<InteractionEvent>> browsing;
            if (!prep_browsing.empty()) browsing = load_events(prep_browsing);
            const Corpus corpus = preprocess_events(
                events, browsing, catalog,
                static_cast<int64_t>(prep_gap_hours * 3600.0), prep_min_len,
                prep_max_len);
            std::vector<std::string> keys(catalog.vocab_size);
            for (const auto& [key, id] : catalog.key_to_id) keys[id] = key;
            save_corpus(prep_out, corpus, keys);
            std::cout << "wrote corpus: " << corpus.user_sequences.size()
                      << " users, " << corpus.browsing_sessions.size()
                      << " sessions, |V|=" << corpus.vocab_size << "\n";
        } else if (*pretrain) {
            const ExperimentConfig cfg = resolve_config(pre_opts);
            const Corpus corpus = load_corpus(pre_corpus);
            const Stage1Result result =
                pretrain_stage1(corpus, cfg, Variant::full, pre_out);
            save_stage1_dir(pre_out, result, cfg, corpus.vocab_size);
            write_run_manifest(pre_out, cfg, result.history, -1, 0.0);
            std::cout << "stage-1 complete: " << result.history.size()
                      << " epochs, final loss "
                      << (result.history.empty() ? 0.0
                                                 : result.history.back().cts_loss)
                      << "\n";
        } else if (*index_cmd) {
            const Corpus corpus = load_corpus(idx_corpus);
            const EncoderParams key = load_encoder_file(idx_ckpt, "key");
            if (key.cfg.vocab_size != corpus.vocab_size)
                throw DataError("index: checkpoint vocab does not match corpus");
            const IndexMode mode =
                idx_mode == "clustered" ? IndexMode::clustered : IndexMode::exact;
            if (idx_mode != "exact" && idx_mode != "clustered")
                throw ConfigError("index: mode must be exact or clustered");
            const RetrievalIndex index = RetrievalIndex::build(
                corpus.browsing_sessions, key, mode, idx_nlist);
            index.save(idx_out);
            std::cout << "wrote index: M=" << index.size() << " d=" << index.dim()
                      << " mode=" << idx_mode << "\n";
        } else if (*retrieve) {
            const Corpus corpus = load_corpus(ret_corpus);
            const EncoderParams query_enc = load_encoder_file(ret_ckpt, "query");
            const RetrievalIndex index = RetrievalIndex::load(ret_index);
            const ItemSequence* seq = corpus.find_user(ret_user);
            if (seq == nullptr)
                throw DataError("retrieve: unknown user '" + ret_user + "'");
            const auto enc =
                encode(query_enc, truncate_recent(*seq, query_enc.cfg.max_len));
            std::vector<double> q(query_enc.cfg.dim);
            kernels::l2_normalize(enc.pooled.row(0), q.data(), query_enc.cfg.dim);
            const RetrievalResult result = index.search(q.data(), ret_k);
            for (const auto& hit : result.hits)
                std::cout << hit.session_id << '\t' << hit.score << '\n';
        } else if (*train) {
            const ExperimentConfig cfg = resolve_config(train_opts);
            const Corpus corpus = load_corpus(train_corpus);
            const std::string init_dir = train_init.empty() ? train_out : train_init;
            const ModelArtifacts init = load_model_dir(init_dir, cfg);
            const RetrievalIndex index = RetrievalIndex::load(train_index);
            const Variant variant = parse_variant(train_variant);
            const Stage2Result result = train_stage2(
                corpus, &index, init.query, init.key_index, cfg, variant);
            ModelArtifacts artifacts;
            artifacts.query = result.query;
            artifacts.key = result.key;
            artifacts.key_index = result.key_index;
            artifacts.head = result.head;
            artifacts.has_head = true;
            save_model_dir(train_out, artifacts, cfg, corpus.vocab_size);
            write_run_manifest(train_out, cfg, result.history, result.best_epoch,
                               result.best_valid_ndcg10);
            std::cout << "stage-2 complete: best epoch " << result.best_epoch
                      << ", valid ndcg@10 " << result.best_valid_ndcg10 << "\n";
        } else if (*ablate) {
            const ExperimentConfig cfg = resolve_config(abl_opts);
            const Corpus corpus = load_corpus(abl_corpus);
            return run_experiment_verb(corpus, cfg, parse_variant(abl_variant),
                                       abl_out);
        } else if (*eval) {
            const ExperimentConfig cfg = resolve_config(eval_opts);
            const Corpus corpus = load_corpus(eval_corpus);
            const ModelArtifacts model_files = load_model_dir(eval_ckpt, cfg);
            if (!model_files.has_head)
                throw DataError("evaluate: checkpoint has no fusion head (stage 2 required)");
            RetrievalIndex index;
            const RetrievalIndex* index_ptr = nullptr;
            if (!eval_index.empty()) {
                index = RetrievalIndex::load(eval_index);
                index_ptr = &index;
            }
            if (eval_split != "valid" && eval_split != "test")
                throw ConfigError("evaluate: split must be valid or test");
            const FusionConfig fusion_cfg = cfg.fusion_config();
            SessionStateCache states(model_files.key_index, index_ptr);
            RecommendationModel model;
            model.query = &model_files.query;
            model.head = &model_files.head;
            model.output_emb = fusion_cfg.tie_item_embeddings
                                   ? &model_files.query.item_emb
                                   : &model_files.head.item_out;
            model.index = index_ptr;
            model.session_states = &states;
            model.fusion = fusion_cfg;
            const SplitSpec splits = build_splits(corpus);
            std::optional<std::string> dump;
            if (!eval_dump.empty()) dump = eval_dump;
            const MetricReport report = evaluate_recommendation(
                model, splits, eval_split == "test", dump);
            print_metrics(eval_split, report);
            if (!eval_report.empty()) {
                json j;
                j["metrics"] = metrics_to_json(report);
                j["n_users"] = report.n_users;
                j["config_hash"] = cfg.hash();
                write_json(eval_report, j);
            }
        } else if (*pipeline) {
            const ExperimentConfig cfg = resolve_config(pipe_opts);
            fs::create_directories(pipe_out);
            Corpus corpus;
            if (pipe_corpus.empty()) {
                const SynthOutput out = generate_synthetic(cfg);
                validate_corpus(out.corpus, kMinSequenceLen);
                const std::string corpus_dir =
                    (fs::path(pipe_out) / "corpus").string();
                save_corpus(corpus_dir, out.corpus, out.vocab_keys);
                corpus = load_corpus(corpus_dir);
            } else {
                corpus = load_corpus(pipe_corpus);
            }
            return run_experiment_verb(corpus, cfg, parse_variant(pipe_variant),
                                       pipe_out);
        }
        return 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
            e.get_name() == "CallForVersion")
            return app.exit(e);
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
