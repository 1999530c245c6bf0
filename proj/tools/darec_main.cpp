#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "darec/dataio.hpp"
#include "darec/evaluation.hpp"
#include "darec/kernels.hpp"
#include "darec/theoryprobe.hpp"
#include "darec/training.hpp"

#include <json.hpp>

namespace fs = std::filesystem;
using namespace darec;
using nlohmann::json;

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t pos = csv.find(',', start);
        const std::string tok = csv.substr(start, pos - start);
        if (!tok.empty()) seeds.push_back(std::stoull(tok));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    if (seeds.empty()) throw ParamError("empty seed list");
    return seeds;
}

std::vector<double> parse_value_list(const std::string& csv) {
    std::vector<double> vals;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t pos = csv.find(',', start);
        const std::string tok = csv.substr(start, pos - start);
        if (!tok.empty()) vals.push_back(std::stod(tok));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    if (vals.empty()) throw ParamError("empty value list");
    return vals;
}

// LLM-side embedding files are keyed by original ids; line the rows up with
// the densely re-indexed internal ids.
EmbeddingMatrix align_rows(const EmbeddingMatrix& m, const std::vector<std::int64_t>& ids,
                           const std::string& what) {
    EmbeddingMatrix out;
    out.rows = static_cast<std::uint32_t>(ids.size());
    out.dim = m.dim;
    out.values.resize(static_cast<std::size_t>(out.rows) * out.dim);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::uint64_t>(ids[i]) >= m.rows)
            throw ParamError(what + ": original id " + std::to_string(ids[i]) +
                             " out of range for embedding with " +
                             std::to_string(m.rows) + " rows");
        std::copy(m.values.begin() + static_cast<std::size_t>(ids[i]) * m.dim,
                  m.values.begin() + (static_cast<std::size_t>(ids[i]) + 1) * m.dim,
                  out.values.begin() + i * out.dim);
    }
    return out;
}

std::string variant_name(const TrainConfig& cfg) {
    if (!cfg.use_or) return "wo_or";
    if (!cfg.use_uni) return "wo_uni";
    if (!cfg.use_glo) return "wo_glo";
    if (!cfg.use_loc) return "wo_loc";
    return "full";
}

struct TrainInputs {
    SplitDataset split;
    EmbeddingMatrix user_llm;
    EmbeddingMatrix item_llm;
};

TrainInputs load_train_inputs(const std::string& interactions, const std::string& user_emb,
                              const std::string& item_emb, double min_rating,
                              std::uint64_t split_seed) {
    TrainInputs in;
    const Dataset ds = load_interactions(interactions, min_rating);
    in.split = split_dataset(ds, {3.0, 1.0, 1.0}, split_seed);
    in.user_llm = align_rows(load_embeddings(user_emb), ds.user_ids, "user embeddings");
    in.item_llm = align_rows(load_embeddings(item_emb), ds.item_ids, "item embeddings");
    return in;
}

int cmd_synth(const SynthSpec& spec, const std::string& out_dir) {
    const SynthResult r = synth_dataset(spec);
    fs::create_directories(out_dir);
    write_interactions_tsv(r.split.base, out_dir + "/interactions.tsv");
    write_id_map(r.split.base.user_ids, out_dir + "/user_ids.tsv");
    write_id_map(r.split.base.item_ids, out_dir + "/item_ids.tsv");
    write_embeddings(r.user_llm, out_dir + "/user_llm.emb1");
    write_embeddings(r.item_llm, out_dir + "/item_llm.emb1");
    write_embeddings(r.truth_user, out_dir + "/truth_user.emb1");
    write_embeddings(r.truth_item, out_dir + "/truth_item.emb1");

    json m;
    m["n_users"] = spec.n_users;
    m["n_items"] = spec.n_items;
    m["latent_dim"] = spec.latent_dim;
    m["llm_dim"] = spec.llm_dim;
    m["shared_signal_scale"] = spec.shared_signal_scale;
    m["specific_scale"] = spec.specific_scale;
    m["noise_scale"] = spec.noise_scale;
    m["interactions_per_user"] = spec.interactions_per_user;
    m["seed"] = spec.seed;
    m["interactions"] = r.split.base.interactions.size();
    atomic_write(out_dir + "/manifest.json", m.dump(2) + "\n");
    std::printf("synth: %u users, %u items, %zu interactions -> %s\n", spec.n_users,
                spec.n_items, r.split.base.interactions.size(), out_dir.c_str());
    return 0;
}

int cmd_train(const TrainInputs& in, const TrainConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const TrainedState st = train(in.split, in.user_llm, in.item_llm, cfg);

    atomic_write(out_dir + "/config.json", config_to_json_text(cfg));
    atomic_write(out_dir + "/loss_log.csv", history_to_csv(st.history));
    write_embeddings(EmbeddingMatrix::from_mat(st.backbone.user_emb),
                     out_dir + "/base_user.emb1");
    write_embeddings(EmbeddingMatrix::from_mat(st.backbone.item_emb),
                     out_dir + "/base_item.emb1");
    atomic_write(out_dir + "/encoders.json", encoders_to_json_text(st.encoders));

    const std::size_t n_users = in.split.base.n_users;
    Mat enh_user(n_users, st.enhanced.cols());
    Mat enh_item(st.enhanced.rows() - n_users, st.enhanced.cols());
    for (std::size_t i = 0; i < enh_user.rows(); ++i)
        std::copy(st.enhanced.row(i), st.enhanced.row(i) + st.enhanced.cols(),
                  enh_user.row(i));
    for (std::size_t i = 0; i < enh_item.rows(); ++i)
        std::copy(st.enhanced.row(n_users + i),
                  st.enhanced.row(n_users + i) + st.enhanced.cols(), enh_item.row(i));
    write_embeddings(EmbeddingMatrix::from_mat(enh_user), out_dir + "/enhanced_user.emb1");
    write_embeddings(EmbeddingMatrix::from_mat(enh_item), out_dir + "/enhanced_item.emb1");
    write_id_map(in.split.base.user_ids, out_dir + "/user_ids.tsv");
    write_id_map(in.split.base.item_ids, out_dir + "/item_ids.tsv");

    const std::vector<std::uint32_t> ks{5, 10, 20};
    const std::string variant = variant_name(cfg);
    const MetricsReport val = evaluate(st.enhanced, in.split, EvalSplit::Val, ks);
    const MetricsReport test = evaluate(st.enhanced, in.split, EvalSplit::Test, ks);
    atomic_write(out_dir + "/metrics_val.csv", metrics_to_csv(val, variant, cfg.seed));
    atomic_write(out_dir + "/metrics_test.csv", metrics_to_csv(test, variant, cfg.seed));
    std::printf("train: %s val R@20=%.4f N@20=%.4f | test R@20=%.4f N@20=%.4f -> %s\n",
                variant.c_str(), val.recall_at.at(20), val.ndcg_at.at(20),
                test.recall_at.at(20), test.ndcg_at.at(20), out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DaRec: disentangled alignment between a collaborative backbone "
                 "and frozen LLM-side embeddings"};
    app.require_subcommand(1);

    // ------------------------------------------------------------------ synth
    SynthSpec spec;
    std::string synth_out = "synth_out";
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with "
                                              "paired LLM-side embeddings");
    synth->add_option("--users", spec.n_users, "number of users");
    synth->add_option("--items", spec.n_items, "number of items");
    synth->add_option("--latent", spec.latent_dim, "true latent dimension");
    synth->add_option("--llm-dim", spec.llm_dim, "LLM embedding dimension");
    synth->add_option("--shared", spec.shared_signal_scale, "shared signal scale");
    synth->add_option("--specific", spec.specific_scale, "modality-specific scale");
    synth->add_option("--noise", spec.noise_scale, "noise scale");
    synth->add_option("--ipu", spec.interactions_per_user, "interactions per user");
    synth->add_option("--seed", spec.seed, "generator seed")->required();
    synth->add_option("--out", synth_out, "output directory");

    // ------------------------------------------------------------------ train
    std::string tr_interactions, tr_user_emb, tr_item_emb, tr_config;
    std::string tr_out = "train_out";
    double tr_min_rating = 3.0;
    std::uint64_t tr_split_seed = 0;
    std::uint64_t tr_seed = 0;
    TrainConfig flag_cfg;
    auto* tr = app.add_subcommand("train", "train the backbone with disentangled "
                                           "alignment losses");
    tr->add_option("--interactions", tr_interactions, "interactions TSV")->required();
    tr->add_option("--user-emb", tr_user_emb, "LLM user embeddings (EMB1/CSV)")->required();
    tr->add_option("--item-emb", tr_item_emb, "LLM item embeddings (EMB1/CSV)")->required();
    tr->add_option("--config", tr_config, "JSON config file");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--min-rating", tr_min_rating, "rating filter threshold");
    tr->add_option("--split-seed", tr_split_seed, "3:1:1 split seed");
    tr->add_option("--seed", tr_seed, "training seed")->required();
    auto* f_lambda = tr->add_option("--lambda", flag_cfg.lambda, "trade-off weight");
    auto* f_lr = tr->add_option("--lr", flag_cfg.lr, "learning rate");
    auto* f_epochs = tr->add_option("--epochs", flag_cfg.epochs, "epochs");
    auto* f_batch = tr->add_option("--bpr-batch", flag_cfg.bpr_batch, "BPR batch size");
    auto* f_nhat = tr->add_option("--n-hat", flag_cfg.n_hat, "alignment sample size");
    auto* f_k = tr->add_option("--K", flag_cfg.K, "preference centers");
    auto* f_d = tr->add_option("--d", flag_cfg.d, "embedding dimension");
    auto* f_layers = tr->add_option("--n-layers", flag_cfg.n_layers, "propagation layers");
    auto* f_l2 = tr->add_option("--l2", flag_cfg.l2, "embedding l2 weight");
    auto* f_uni = tr->add_option("--uni-sample", flag_cfg.uni_sample, "uniformity sample");

    // ------------------------------------------------------------------- eval
    std::string ev_interactions, ev_user_emb, ev_item_emb, ev_out;
    double ev_min_rating = 3.0;
    std::uint64_t ev_split_seed = 0;
    std::string ev_split = "test";
    auto* ev = app.add_subcommand("eval", "all-ranking Recall@K / NDCG@K of trained "
                                          "embeddings");
    ev->add_option("--interactions", ev_interactions, "interactions TSV")->required();
    ev->add_option("--user-emb", ev_user_emb, "enhanced user embeddings")->required();
    ev->add_option("--item-emb", ev_item_emb, "enhanced item embeddings")->required();
    ev->add_option("--min-rating", ev_min_rating, "rating filter threshold");
    ev->add_option("--split-seed", ev_split_seed, "3:1:1 split seed");
    ev->add_option("--split", ev_split, "val or test")
        ->check(CLI::IsMember({"val", "test"}));
    ev->add_option("--out", ev_out, "metrics CSV path (default: stdout)");

    // -------------------------------------------------------------- gradcheck
    bool inject_bug = false;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference validation of all "
                                               "loss gradients");
    gc->add_flag("--inject-bug", inject_bug, "corrupt one gradient coordinate to "
                                             "prove sensitivity");

    // ----------------------------------------------------------------- ablate
    std::string ab_interactions, ab_user_emb, ab_item_emb, ab_config, ab_seeds = "1";
    std::string ab_out = "ablation_out";
    double ab_min_rating = 3.0;
    std::uint64_t ab_split_seed = 0;
    auto* ab = app.add_subcommand("ablate", "full model plus single-term removals");
    ab->add_option("--interactions", ab_interactions, "interactions TSV")->required();
    ab->add_option("--user-emb", ab_user_emb, "LLM user embeddings")->required();
    ab->add_option("--item-emb", ab_item_emb, "LLM item embeddings")->required();
    ab->add_option("--config", ab_config, "JSON config file");
    ab->add_option("--seeds", ab_seeds, "comma-separated seed list")->required();
    ab->add_option("--out", ab_out, "output directory");
    ab->add_option("--min-rating", ab_min_rating, "rating filter threshold");
    ab->add_option("--split-seed", ab_split_seed, "3:1:1 split seed");

    // ------------------------------------------------------------------ sweep
    std::string sw_interactions, sw_user_emb, sw_item_emb, sw_config, sw_seeds = "1";
    std::string sw_param, sw_values, sw_out = "sweep_out";
    double sw_min_rating = 3.0;
    std::uint64_t sw_split_seed = 0;
    auto* sw = app.add_subcommand("sweep", "hyperparameter sensitivity grid");
    sw->add_option("--interactions", sw_interactions, "interactions TSV")->required();
    sw->add_option("--user-emb", sw_user_emb, "LLM user embeddings")->required();
    sw->add_option("--item-emb", sw_item_emb, "LLM item embeddings")->required();
    sw->add_option("--config", sw_config, "JSON config file");
    sw->add_option("--param", sw_param, "K, lambda or n_hat")->required();
    sw->add_option("--values", sw_values, "comma-separated grid values")->required();
    sw->add_option("--seeds", sw_seeds, "comma-separated seed list")->required();
    sw->add_option("--out", sw_out, "output directory");
    sw->add_option("--min-rating", sw_min_rating, "rating filter threshold");
    sw->add_option("--split-seed", sw_split_seed, "3:1:1 split seed");

    // ------------------------------------------------------------------ probe
    std::string pr_scenario = "max_gap", pr_seeds = "1", pr_out;
    double pr_alpha = 1.0;
    ProbeConfig pr_cfg;
    auto* pr = app.add_subcommand("probe", "empirical probe of the exact-alignment "
                                           "information bound");
    pr->add_option("--scenario", pr_scenario, "max_gap, zero_gap or interpolated")
        ->check(CLI::IsMember({"max_gap", "zero_gap", "interpolated"}));
    pr->add_option("--alpha", pr_alpha, "interpolation strength");
    pr->add_option("--seeds", pr_seeds, "comma-separated seed list")->required();
    pr->add_option("--iters", pr_cfg.iters, "training iterations per arm");
    pr->add_option("--mu", pr_cfg.mu, "alignment penalty weight");
    pr->add_option("--out", pr_out, "probe CSV path (default: stdout)");

    // ----------------------------------------------------------------- export
    std::string ex_checkpoint, ex_interactions, ex_out = "export_out";
    double ex_min_rating = 3.0;
    std::uint64_t ex_split_seed = 0;
    bool ex_csv = false;
    auto* ex = app.add_subcommand("export", "recompute enhanced embeddings from a "
                                            "checkpoint");
    ex->add_option("--checkpoint", ex_checkpoint, "train output directory")->required();
    ex->add_option("--interactions", ex_interactions, "interactions TSV")->required();
    ex->add_option("--out", ex_out, "output directory");
    ex->add_option("--min-rating", ex_min_rating, "rating filter threshold");
    ex->add_option("--split-seed", ex_split_seed, "3:1:1 split seed");
    ex->add_flag("--csv", ex_csv, "write CSV instead of EMB1");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
            return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(spec, synth_out);

        if (tr->parsed()) {
            TrainConfig cfg = tr_config.empty()
                                  ? TrainConfig{}
                                  : config_from_json_text(read_text_file(tr_config));
            if (*f_lambda) cfg.lambda = flag_cfg.lambda;
            if (*f_lr) cfg.lr = flag_cfg.lr;
            if (*f_epochs) cfg.epochs = flag_cfg.epochs;
            if (*f_batch) cfg.bpr_batch = flag_cfg.bpr_batch;
            if (*f_nhat) cfg.n_hat = flag_cfg.n_hat;
            if (*f_k) cfg.K = flag_cfg.K;
            if (*f_d) cfg.d = flag_cfg.d;
            if (*f_layers) cfg.n_layers = flag_cfg.n_layers;
            if (*f_l2) cfg.l2 = flag_cfg.l2;
            if (*f_uni) cfg.uni_sample = flag_cfg.uni_sample;
            cfg.seed = tr_seed;
            cfg.validate();
            const TrainInputs in = load_train_inputs(tr_interactions, tr_user_emb,
                                                     tr_item_emb, tr_min_rating,
                                                     tr_split_seed);
            return cmd_train(in, cfg, tr_out);
        }

        if (ev->parsed()) {
            const Dataset ds = load_interactions(ev_interactions, ev_min_rating);
            const SplitDataset split = split_dataset(ds, {3.0, 1.0, 1.0}, ev_split_seed);
            const EmbeddingMatrix ue = load_embeddings(ev_user_emb);
            const EmbeddingMatrix ie = load_embeddings(ev_item_emb);
            if (ue.rows != ds.n_users || ie.rows != ds.n_items)
                throw ParamError("eval: embedding row counts do not match the dataset");
            const Mat stacked = vstack(ue.to_mat(), ie.to_mat());
            const MetricsReport rep = evaluate(
                stacked, split, ev_split == "val" ? EvalSplit::Val : EvalSplit::Test,
                {5, 10, 20});
            const std::string csv = metrics_to_csv(rep, "eval", 0);
            if (ev_out.empty()) std::fputs(csv.c_str(), stdout);
            else atomic_write(ev_out, csv);
            return 0;
        }

        if (gc->parsed()) {
            const GradSuiteReport rep = run_gradient_suite(inject_bug);
            for (const auto& e : rep.entries)
                std::printf("%-8s max rel err %.3e  %s\n", e.term.c_str(), e.max_rel_err,
                            e.pass ? "ok" : "FAIL");
            if (!rep.all_pass) {
                std::fprintf(stderr, "gradcheck: FAILED\n");
                return 1;
            }
            std::printf("gradcheck: all gradients within 1e-4\n");
            return 0;
        }

        if (ab->parsed()) {
            const TrainConfig cfg = ab_config.empty()
                                        ? TrainConfig{}
                                        : config_from_json_text(read_text_file(ab_config));
            const TrainInputs in = load_train_inputs(ab_interactions, ab_user_emb,
                                                     ab_item_emb, ab_min_rating,
                                                     ab_split_seed);
            const SweepReport rep = run_ablation(cfg, in.split, in.user_llm, in.item_llm,
                                                 parse_seed_list(ab_seeds), {5, 10, 20});
            fs::create_directories(ab_out);
            atomic_write(ab_out + "/ablation.csv", sweep_to_csv(rep));
            for (const char* v : {"full", "wo_or", "wo_uni", "wo_glo", "wo_loc"})
                std::printf("%-7s mean R@20 = %.4f\n", v, mean_metric(rep, v, 20));
            return 0;
        }

        if (sw->parsed()) {
            const TrainConfig cfg = sw_config.empty()
                                        ? TrainConfig{}
                                        : config_from_json_text(read_text_file(sw_config));
            const TrainInputs in = load_train_inputs(sw_interactions, sw_user_emb,
                                                     sw_item_emb, sw_min_rating,
                                                     sw_split_seed);
            const SweepReport rep =
                run_sensitivity(cfg, sw_param, parse_value_list(sw_values), in.split,
                                in.user_llm, in.item_llm, parse_seed_list(sw_seeds),
                                {5, 10, 20});
            fs::create_directories(sw_out);
            atomic_write(sw_out + "/sweep.csv", sweep_to_csv(rep));
            atomic_write(sw_out + "/sweep_plot.csv", sweep_plot_csv(rep, 20));
            std::fputs(sweep_plot_csv(rep, 20).c_str(), stdout);
            return 0;
        }

        if (pr->parsed()) {
            const JointDistribution joint =
                build_joint(scenario_from_string(pr_scenario), pr_alpha);
            std::string csv = "scenario,mode,seed,i_d_y,i_dp_y,delta_p,ce\n";
            char buf[256];
            for (const std::uint64_t seed : parse_seed_list(pr_seeds)) {
                const ProbeResult r = run_probe(joint, pr_cfg, seed);
                std::snprintf(buf, sizeof(buf),
                              "%s,hard_aligned,%llu,%.12g,%.12g,%.12g,%.12g\n",
                              pr_scenario.c_str(), (unsigned long long)seed, r.i_d_y,
                              r.i_dp_y, r.delta_p, r.ce_aligned);
                csv += buf;
                std::snprintf(buf, sizeof(buf),
                              "%s,disentangled,%llu,%.12g,%.12g,%.12g,%.12g\n",
                              pr_scenario.c_str(), (unsigned long long)seed, r.i_d_y,
                              r.i_dp_y, r.delta_p, r.ce_free);
                csv += buf;
            }
            if (pr_out.empty()) std::fputs(csv.c_str(), stdout);
            else atomic_write(pr_out, csv);
            return 0;
        }

        if (ex->parsed()) {
            const TrainConfig cfg =
                config_from_json_text(read_text_file(ex_checkpoint + "/config.json"));
            const EmbeddingMatrix user_base =
                load_embeddings(ex_checkpoint + "/base_user.emb1");
            const EmbeddingMatrix item_base =
                load_embeddings(ex_checkpoint + "/base_item.emb1");
            const Dataset ds = load_interactions(ex_interactions, ex_min_rating);
            if (user_base.rows != ds.n_users || item_base.rows != ds.n_items)
                throw ParamError("export: checkpoint does not match the dataset");
            const SplitDataset split = split_dataset(ds, {3.0, 1.0, 1.0}, ex_split_seed);
            const BipartiteGraph graph = build_graph(split);

            BackboneModel model;
            model.user_emb = user_base.to_mat();
            model.item_emb = item_base.to_mat();
            model.n_layers = cfg.n_layers;
            model.d = user_base.dim;
            const Mat enhanced = propagate(model, graph);

            Mat enh_user(ds.n_users, enhanced.cols());
            Mat enh_item(ds.n_items, enhanced.cols());
            for (std::size_t i = 0; i < enh_user.rows(); ++i)
                std::copy(enhanced.row(i), enhanced.row(i) + enhanced.cols(),
                          enh_user.row(i));
            for (std::size_t i = 0; i < enh_item.rows(); ++i)
                std::copy(enhanced.row(ds.n_users + i),
                          enhanced.row(ds.n_users + i) + enhanced.cols(), enh_item.row(i));
            fs::create_directories(ex_out);
            if (ex_csv) {
                write_embeddings_csv(EmbeddingMatrix::from_mat(enh_user),
                                     ex_out + "/enhanced_user.csv");
                write_embeddings_csv(EmbeddingMatrix::from_mat(enh_item),
                                     ex_out + "/enhanced_item.csv");
            } else {
                write_embeddings(EmbeddingMatrix::from_mat(enh_user),
                                 ex_out + "/enhanced_user.emb1");
                write_embeddings(EmbeddingMatrix::from_mat(enh_item),
                                 ex_out + "/enhanced_item.emb1");
            }
            std::printf("export: wrote enhanced embeddings -> %s\n", ex_out.c_str());
            return 0;
        }
    } catch (const TrainingDiverged& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
