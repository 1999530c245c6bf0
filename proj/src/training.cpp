#include "darec/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "darec/kernels.hpp"

namespace darec {

using nlohmann::json;

void TrainConfig::validate() const {
    if (lambda < 0) throw ParamError("config: lambda must be >= 0");
    if (!(lr > 0)) throw ParamError("config: lr must be > 0");
    if (n_hat < 2) throw ParamError("config: n_hat must be >= 2");
    if (K < 1) throw ParamError("config: K must be >= 1");
    if (d < 1) throw ParamError("config: d must be >= 1");
    if (bpr_batch < 1) throw ParamError("config: bpr_batch must be >= 1");
    if (uni_sample < 2) throw ParamError("config: uni_sample must be >= 2");
    if (l2 < 0) throw ParamError("config: l2 must be >= 0");
}

TrainConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParamError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParamError("config: top level must be an object");

    static const char* known[] = {"lambda", "lr", "epochs", "bpr_batch", "n_hat",
                                  "K", "d", "d_h", "n_layers", "l2", "seed",
                                  "uni_sample", "eval_every", "use_or", "use_uni",
                                  "use_glo", "use_loc"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ParamError("config: unknown key '" + it.key() + "'");
    }

    TrainConfig c;
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) {
            try {
                slot = j.at(key).get<std::decay_t<decltype(slot)>>();
            } catch (const json::exception&) {
                throw ParamError(std::string("config: bad value for key '") + key + "'");
            }
        }
    };
    get("lambda", c.lambda);
    get("lr", c.lr);
    get("epochs", c.epochs);
    get("bpr_batch", c.bpr_batch);
    get("n_hat", c.n_hat);
    get("K", c.K);
    get("d", c.d);
    get("d_h", c.d_h);
    get("n_layers", c.n_layers);
    get("l2", c.l2);
    get("seed", c.seed);
    get("uni_sample", c.uni_sample);
    get("eval_every", c.eval_every);
    get("use_or", c.use_or);
    get("use_uni", c.use_uni);
    get("use_glo", c.use_glo);
    get("use_loc", c.use_loc);
    c.validate();
    return c;
}

std::string config_to_json_text(const TrainConfig& c) {
    json j;
    j["lambda"] = c.lambda;
    j["lr"] = c.lr;
    j["epochs"] = c.epochs;
    j["bpr_batch"] = c.bpr_batch;
    j["n_hat"] = c.n_hat;
    j["K"] = c.K;
    j["d"] = c.d;
    j["d_h"] = c.d_h;
    j["n_layers"] = c.n_layers;
    j["l2"] = c.l2;
    j["seed"] = c.seed;
    j["uni_sample"] = c.uni_sample;
    j["eval_every"] = c.eval_every;
    j["use_or"] = c.use_or;
    j["use_uni"] = c.use_uni;
    j["use_glo"] = c.use_glo;
    j["use_loc"] = c.use_loc;
    return j.dump(2) + "\n";
}

void AdamState::init(const std::vector<Mat*>& params) {
    m.clear();
    v.clear();
    for (const Mat* p : params) {
        m.emplace_back(p->rows(), p->cols());
        v.emplace_back(p->rows(), p->cols());
    }
    t = 0;
}

void adam_step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
               AdamState& st, double lr) {
    if (params.size() != grads.size() || params.size() != st.m.size())
        throw ParamError("adam_step: parameter/gradient count mismatch");
    ++st.t;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        double* theta = params[p]->data();
        const double* g = grads[p]->data();
        double* mm = st.m[p].data();
        double* vv = st.v[p].data();
        const std::size_t n = params[p]->size();
        for (std::size_t i = 0; i < n; ++i) {
            mm[i] = st.beta1 * mm[i] + (1.0 - st.beta1) * g[i];
            vv[i] = st.beta2 * vv[i] + (1.0 - st.beta2) * g[i] * g[i];
            const double mhat = mm[i] / bc1;
            const double vhat = vv[i] / bc2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

void ParamGrads::init_like(const BackboneModel& backbone, const EncoderSet& enc) {
    d_user = Mat(backbone.user_emb.rows(), backbone.user_emb.cols());
    d_item = Mat(backbone.item_emb.rows(), backbone.item_emb.cols());
    g_sp_c.init_like(enc.sp_c);
    g_sh_c.init_like(enc.sh_c);
    g_sp_l.init_like(enc.sp_l);
    g_sh_l.init_like(enc.sh_l);
}

std::vector<const Mat*> ParamGrads::list() const {
    return {&d_user,      &d_item,      &g_sp_c.dw1, &g_sp_c.db1, &g_sp_c.dw2,
            &g_sp_c.db2,  &g_sh_c.dw1,  &g_sh_c.db1, &g_sh_c.dw2, &g_sh_c.db2,
            &g_sp_l.dw1,  &g_sp_l.db1,  &g_sp_l.dw2, &g_sp_l.db2, &g_sh_l.dw1,
            &g_sh_l.db1,  &g_sh_l.dw2,  &g_sh_l.db2};
}

std::vector<Mat*> param_list(BackboneModel& backbone, EncoderSet& enc) {
    return {&backbone.user_emb, &backbone.item_emb, &enc.sp_c.w1, &enc.sp_c.b1,
            &enc.sp_c.w2,       &enc.sp_c.b2,       &enc.sh_c.w1, &enc.sh_c.b1,
            &enc.sh_c.w2,       &enc.sh_c.b2,       &enc.sp_l.w1, &enc.sp_l.b1,
            &enc.sp_l.w2,       &enc.sp_l.b2,       &enc.sh_l.w1, &enc.sh_l.b1,
            &enc.sh_l.w2,       &enc.sh_l.b2};
}

namespace {

void require_finite(double v, const char* term) {
    if (!std::isfinite(v))
        throw TrainingDiverged(std::string("non-finite loss term: ") + term);
}

}  // namespace

JointTerms joint_loss_and_grads(const BackboneModel& backbone,
                                const BipartiteGraph& graph, const EncoderSet& enc,
                                const Mat& e_l, const EpochClusters& clusters,
                                const TrainConfig& cfg, const BprBatch& batch,
                                const std::vector<std::uint32_t>& glo_idx,
                                const std::vector<std::uint32_t>& uni_idx,
                                ParamGrads& grads) {
    const std::uint32_t n_users = graph.n_users;
    const Mat base = stacked_base(backbone);
    const Mat e_c = propagate_matrix(base, graph, backbone.n_layers);

    EncodeCache cache;
    const DisentangledReps reps = encode(enc, e_c, e_l, &cache);

    grads.init_like(backbone, enc);

    Mat d_ec(e_c.rows(), e_c.cols());
    Mat d_base(base.rows(), base.cols());
    Mat d_sp_c(reps.e_sp_c.rows(), reps.e_sp_c.cols());
    Mat d_sh_c(reps.e_sh_c.rows(), reps.e_sh_c.cols());
    Mat d_sp_l(reps.e_sp_l.rows(), reps.e_sp_l.cols());
    Mat d_sh_l(reps.e_sh_l.rows(), reps.e_sh_l.cols());

    JointTerms terms;

    {
        BprResult bpr = bpr_loss(e_c, base, n_users, batch, cfg.l2);
        terms.l_base = bpr.loss;
        require_finite(terms.l_base, "l_base");
        add_inplace(d_ec, bpr.d_propagated);
        add_inplace(d_base, bpr.d_base);
    }

    const double lam = cfg.lambda;
    const bool any_align = lam > 0.0;

    if (any_align && cfg.use_or) {
        OrthoResult o = orthogonality_loss(reps);
        terms.l_or = o.value;
        require_finite(terms.l_or, "l_or");
        add_scaled_inplace(d_sp_c, o.d_sp_c, lam);
        add_scaled_inplace(d_sh_c, o.d_sh_c, lam);
        add_scaled_inplace(d_sp_l, o.d_sp_l, lam);
        add_scaled_inplace(d_sh_l, o.d_sh_l, lam);
    }
    if (any_align && cfg.use_uni) {
        UniformityResult u = uniformity_loss(reps, uni_idx);
        terms.l_uni = u.value;
        require_finite(terms.l_uni, "l_uni");
        add_scaled_inplace(d_sp_c, u.d_sp_c, lam);
        add_scaled_inplace(d_sp_l, u.d_sp_l, lam);
    }
    if (any_align && cfg.use_glo) {
        GlobalResult g = global_loss(reps.e_sh_c, reps.e_sh_l, glo_idx);
        terms.l_glo = g.value;
        require_finite(terms.l_glo, "l_glo");
        add_scaled_inplace(d_sh_c, g.d_sh_c, lam);
        add_scaled_inplace(d_sh_l, g.d_sh_l, lam);
    }
    if (any_align && cfg.use_loc) {
        if (clusters.assign_c.size() != reps.e_sh_c.rows() ||
            clusters.assign_l.size() != reps.e_sh_l.rows())
            throw ParamError("joint_loss: clusters not current for this epoch");
        std::vector<std::uint32_t> counts_c, counts_l;
        const Mat c_c =
            centers_from_assignment(reps.e_sh_c, clusters.assign_c, cfg.K, &counts_c);
        const Mat c_l =
            centers_from_assignment(reps.e_sh_l, clusters.assign_l, cfg.K, &counts_l);
        LocalResult l = local_loss(c_c, c_l, clusters.matching);
        terms.l_loc = l.value;
        require_finite(terms.l_loc, "l_loc");
        const Mat dc = scatter_center_grads(l.d_c_c, clusters.assign_c, counts_c);
        const Mat dl = scatter_center_grads(l.d_c_l, clusters.assign_l, counts_l);
        add_scaled_inplace(d_sh_c, dc, lam);
        add_scaled_inplace(d_sh_l, dl, lam);
    }

    // One backward pass per encoder on the combined output gradients. The
    // LLM side is a frozen input, so its dX is dropped.
    add_inplace(d_ec, mlp_backward(enc.sp_c, cache.sp_c, d_sp_c, grads.g_sp_c));
    add_inplace(d_ec, mlp_backward(enc.sh_c, cache.sh_c, d_sh_c, grads.g_sh_c));
    mlp_backward(enc.sp_l, cache.sp_l, d_sp_l, grads.g_sp_l);
    mlp_backward(enc.sh_l, cache.sh_l, d_sh_l, grads.g_sh_l);

    // The propagation operator is symmetric, hence self-adjoint.
    add_inplace(d_base, propagate_matrix(d_ec, graph, backbone.n_layers));

    for (std::size_t i = 0; i < grads.d_user.rows(); ++i)
        std::copy(d_base.row(i), d_base.row(i) + d_base.cols(), grads.d_user.row(i));
    for (std::size_t i = 0; i < grads.d_item.rows(); ++i)
        std::copy(d_base.row(n_users + i), d_base.row(n_users + i) + d_base.cols(),
                  grads.d_item.row(i));

    terms.total = terms.l_base + lam * (terms.l_or + terms.l_uni + terms.l_glo +
                                        terms.l_loc);
    return terms;
}

std::vector<std::uint32_t> sample_alignment_indices(std::size_t n_total,
                                                    std::size_t n_hat, Rng& rng) {
    if (n_hat > n_total) {
        std::fprintf(stderr,
                     "warning: n_hat=%zu exceeds population %zu; clamping\n",
                     n_hat, n_total);
        n_hat = n_total;
    }
    std::vector<std::uint32_t> pool(n_total);
    std::iota(pool.begin(), pool.end(), 0u);
    for (std::size_t i = 0; i < n_hat; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(n_total - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(n_hat);
    std::sort(pool.begin(), pool.end());
    return pool;
}

TrainedState train(const SplitDataset& split, const EmbeddingMatrix& e_l_user,
                   const EmbeddingMatrix& e_l_item, const TrainConfig& cfg,
                   const EpochCallback& on_eval) {
    cfg.validate();
    if (e_l_user.rows != split.base.n_users)
        throw ParamError("train: user embedding rows != n_users");
    if (e_l_item.rows != split.base.n_items)
        throw ParamError("train: item embedding rows != n_items");
    if (e_l_user.dim != e_l_item.dim)
        throw ParamError("train: user/item embedding dims differ");

    Rng master(cfg.seed);
    const std::uint64_t backbone_seed = master.next_u64();
    const std::uint64_t encoder_seed = master.next_u64();
    Rng step_rng(master.next_u64());
    const std::uint64_t kmeans_seed = master.next_u64();

    TrainedState st;
    st.backbone = init_backbone(split.base.n_users, split.base.n_items, cfg.d,
                                cfg.n_layers, backbone_seed);
    EncoderDims dims;
    dims.d_in_c = cfg.d;
    dims.d_in_l = e_l_user.dim;
    dims.d_h = cfg.d_h ? cfg.d_h : cfg.d;
    dims.d_sp = cfg.d;
    dims.d_sh = cfg.d;
    st.encoders = init_encoders(dims, encoder_seed);

    const BipartiteGraph graph = build_graph(split);
    const Mat e_l = vstack(e_l_user.to_mat(), e_l_item.to_mat());
    const std::size_t n_total = split.base.n_users + split.base.n_items;

    const std::size_t n_hat_eff = std::min<std::size_t>(cfg.n_hat, n_total);
    const std::size_t uni_eff = std::min<std::size_t>(cfg.uni_sample, n_total);
    const std::size_t steps_per_epoch =
        std::max<std::size_t>(1, split.train.size() / cfg.bpr_batch);

    std::vector<Mat*> params = param_list(st.backbone, st.encoders);
    AdamState adam;
    adam.init(params);

    const bool need_clusters = cfg.lambda > 0.0 && cfg.use_loc;

    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochClusters clusters;
        if (need_clusters) {
            const Mat e_c = propagate(st.backbone, graph);
            const DisentangledReps reps = encode(st.encoders, e_c, e_l);
            PreferenceCenters km_c =
                kmeans(reps.e_sh_c, cfg.K, 50, 4, kmeans_seed + 2ull * epoch);
            PreferenceCenters km_l =
                kmeans(reps.e_sh_l, cfg.K, 50, 4, kmeans_seed + 2ull * epoch + 1);
            clusters.matching = match_centers(km_c.centers, km_l.centers);
            clusters.assign_c = std::move(km_c.assignment);
            clusters.assign_l = std::move(km_l.assignment);
        }

        for (std::uint32_t step = 0; step < steps_per_epoch; ++step) {
            const BprBatch batch = sample_bpr_batch(split, cfg.bpr_batch, step_rng);
            const auto glo_idx = sample_alignment_indices(n_total, n_hat_eff, step_rng);
            const auto uni_idx = sample_alignment_indices(n_total, uni_eff, step_rng);

            ParamGrads grads;
            const JointTerms terms =
                joint_loss_and_grads(st.backbone, graph, st.encoders, e_l, clusters,
                                     cfg, batch, glo_idx, uni_idx, grads);
            if (!std::isfinite(terms.total) || terms.total > 1e6)
                throw TrainingDiverged(
                    "training diverged at epoch " + std::to_string(epoch) + " step " +
                    std::to_string(step) + ": total=" + std::to_string(terms.total) +
                    " l_base=" + std::to_string(terms.l_base) +
                    " l_or=" + std::to_string(terms.l_or) +
                    " l_uni=" + std::to_string(terms.l_uni) +
                    " l_glo=" + std::to_string(terms.l_glo) +
                    " l_loc=" + std::to_string(terms.l_loc));

            const auto grad_ptrs = grads.list();
            adam_step(params, grad_ptrs, adam, cfg.lr);

            st.history.push_back({epoch, step, terms.l_base, terms.l_or, terms.l_uni,
                                  terms.l_glo, terms.l_loc, terms.total});
        }
        st.epochs_run = epoch + 1;

        if (on_eval && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            on_eval(epoch, propagate(st.backbone, graph));
        }
    }

    st.enhanced = propagate(st.backbone, graph);
    return st;
}

double grad_check(const std::function<double()>& eval, const std::vector<Mat*>& params,
                  const std::vector<const Mat*>& analytic, double eps,
                  std::size_t trials, Rng& rng) {
    std::size_t total = 0;
    for (const Mat* p : params) total += p->size();
    if (total == 0) return 0.0;

    // Always probe the largest analytic coordinate as well.
    std::size_t max_t = 0, max_o = 0;
    double max_mag = -1.0;
    for (std::size_t t = 0; t < analytic.size(); ++t) {
        for (std::size_t o = 0; o < analytic[t]->size(); ++o) {
            const double mag = std::abs(analytic[t]->data()[o]);
            if (mag > max_mag) {
                max_mag = mag;
                max_t = t;
                max_o = o;
            }
        }
    }

    double worst = 0.0;
    for (std::size_t trial = 0; trial <= trials; ++trial) {
        std::size_t t, o;
        if (trial == trials) {
            t = max_t;
            o = max_o;
        } else {
            std::size_t flat = static_cast<std::size_t>(rng.uniform_int(total));
            t = 0;
            while (flat >= params[t]->size()) flat -= params[t]->size();
            o = flat;
        }
        double* slot = params[t]->data() + o;
        const double orig = *slot;
        *slot = orig + eps;
        const double fp = eval();
        *slot = orig - eps;
        const double fm = eval();
        *slot = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double an = analytic[t]->data()[o];
        const double rel =
            std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-5});
        worst = std::max(worst, rel);
    }
    return worst;
}

namespace {

void corrupt_largest(std::vector<Mat*> analytic) {
    Mat* best_m = nullptr;
    std::size_t best_o = 0;
    double best = -1.0;
    for (Mat* m : analytic) {
        for (std::size_t o = 0; o < m->size(); ++o) {
            if (std::abs(m->data()[o]) > best) {
                best = std::abs(m->data()[o]);
                best_m = m;
                best_o = o;
            }
        }
    }
    if (best_m) best_m->data()[best_o] *= 2.0;
}

SplitDataset tiny_split(Rng& rng) {
    Dataset ds;
    ds.n_users = 6;
    ds.n_items = 8;
    for (std::uint32_t u = 0; u < ds.n_users; ++u) {
        for (std::uint32_t k = 0; k < 3; ++k) {
            const std::uint32_t item =
                static_cast<std::uint32_t>((u * 3 + k * 2 + rng.uniform_int(2)) % 8);
            bool dup = false;
            for (const auto& t : ds.interactions)
                dup = dup || (t.user == u && t.item == item);
            if (!dup) ds.interactions.push_back({u, item, 5.0, std::nullopt});
        }
    }
    ds.user_ids.resize(ds.n_users);
    ds.item_ids.resize(ds.n_items);
    std::iota(ds.user_ids.begin(), ds.user_ids.end(), 0);
    std::iota(ds.item_ids.begin(), ds.item_ids.end(), 0);

    SplitDataset split;
    split.base = ds;
    split.train.resize(ds.interactions.size());
    std::iota(split.train.begin(), split.train.end(), 0u);
    return split;
}

}  // namespace

GradSuiteReport run_gradient_suite(bool inject_bug, double tolerance) {
    GradSuiteReport report;
    Rng rng(20240917ull);
    const std::size_t n = 8, d = 5;
    const std::size_t trials = 48;
    const double eps = 1e-5;

    auto add_entry = [&](const std::string& term, double err) {
        report.entries.push_back({term, err, err < tolerance});
    };

    // l_base through propagation
    {
        SplitDataset split = tiny_split(rng);
        const BipartiteGraph graph = build_graph(split);
        BackboneModel model = init_backbone(6, 8, d, 1, rng.next_u64());
        const BprBatch batch = sample_bpr_batch(split, 16, rng);
        const double l2 = 0.01;

        auto eval = [&]() {
            const Mat base = stacked_base(model);
            const Mat prop = propagate_matrix(base, graph, model.n_layers);
            return bpr_loss(prop, base, 6, batch, l2).loss;
        };
        const Mat base = stacked_base(model);
        const Mat prop = propagate_matrix(base, graph, model.n_layers);
        BprResult r = bpr_loss(prop, base, 6, batch, l2);
        Mat d_base = propagate_matrix(r.d_propagated, graph, model.n_layers);
        add_inplace(d_base, r.d_base);
        Mat d_user(6, d), d_item(8, d);
        for (std::size_t i = 0; i < 6; ++i)
            std::copy(d_base.row(i), d_base.row(i) + d, d_user.row(i));
        for (std::size_t i = 0; i < 8; ++i)
            std::copy(d_base.row(6 + i), d_base.row(6 + i) + d, d_item.row(i));
        if (inject_bug) corrupt_largest({&d_user, &d_item});

        std::vector<Mat*> params{&model.user_emb, &model.item_emb};
        std::vector<const Mat*> analytic{&d_user, &d_item};
        add_entry("l_base", grad_check(eval, params, analytic, eps, trials, rng));
    }

    // l_or on raw representation matrices
    {
        DisentangledReps reps;
        reps.e_sp_c = Mat::gaussian(n, d, 0.0, 1.0, rng);
        reps.e_sh_c = Mat::gaussian(n, d, 0.0, 1.0, rng);
        reps.e_sp_l = Mat::gaussian(n, d, 0.0, 1.0, rng);
        reps.e_sh_l = Mat::gaussian(n, d, 0.0, 1.0, rng);
        auto eval = [&]() { return orthogonality_loss(reps).value; };
        OrthoResult o = orthogonality_loss(reps);
        if (inject_bug) corrupt_largest({&o.d_sp_c, &o.d_sh_c, &o.d_sp_l, &o.d_sh_l});
        std::vector<Mat*> params{&reps.e_sp_c, &reps.e_sh_c, &reps.e_sp_l, &reps.e_sh_l};
        std::vector<const Mat*> analytic{&o.d_sp_c, &o.d_sh_c, &o.d_sp_l, &o.d_sh_l};
        add_entry("l_or", grad_check(eval, params, analytic, eps, trials, rng));
    }

    // l_uni over all rows
    {
        DisentangledReps reps;
        reps.e_sp_c = Mat::gaussian(n, d, 0.0, 1.0, rng);
        reps.e_sh_c = Mat(n, d);
        reps.e_sp_l = Mat::gaussian(n, d, 0.0, 1.0, rng);
        reps.e_sh_l = Mat(n, d);
        std::vector<std::uint32_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0u);
        auto eval = [&]() { return uniformity_loss(reps, idx).value; };
        UniformityResult u = uniformity_loss(reps, idx);
        if (inject_bug) corrupt_largest({&u.d_sp_c, &u.d_sp_l});
        std::vector<Mat*> params{&reps.e_sp_c, &reps.e_sp_l};
        std::vector<const Mat*> analytic{&u.d_sp_c, &u.d_sp_l};
        add_entry("l_uni", grad_check(eval, params, analytic, eps, trials, rng));
    }

    // l_glo on a strict subset of rows
    {
        Mat e_sh_c = Mat::gaussian(n, d, 0.0, 1.0, rng);
        Mat e_sh_l = Mat::gaussian(n, d, 0.0, 1.0, rng);
        const std::vector<std::uint32_t> idx{0, 2, 3, 5, 6, 7};
        auto eval = [&]() { return global_loss(e_sh_c, e_sh_l, idx).value; };
        GlobalResult g = global_loss(e_sh_c, e_sh_l, idx);
        if (inject_bug) corrupt_largest({&g.d_sh_c, &g.d_sh_l});
        std::vector<Mat*> params{&e_sh_c, &e_sh_l};
        std::vector<const Mat*> analytic{&g.d_sh_c, &g.d_sh_l};
        add_entry("l_glo", grad_check(eval, params, analytic, eps, trials, rng));
    }

    // l_loc through centers-as-means with frozen assignments and matching
    {
        const std::uint32_t k = 3;
        Mat e_sh_c = Mat::gaussian(n, d, 0.0, 1.0, rng);
        Mat e_sh_l = Mat::gaussian(n, d, 0.0, 1.0, rng);
        const PreferenceCenters km_c = kmeans(e_sh_c, k, 50, 4, rng.next_u64());
        const PreferenceCenters km_l = kmeans(e_sh_l, k, 50, 4, rng.next_u64());
        const CenterMatching matching = match_centers(km_c.centers, km_l.centers);

        auto eval = [&]() {
            const Mat c_c = centers_from_assignment(e_sh_c, km_c.assignment, k);
            const Mat c_l = centers_from_assignment(e_sh_l, km_l.assignment, k);
            return local_loss(c_c, c_l, matching).value;
        };
        std::vector<std::uint32_t> counts_c, counts_l;
        const Mat c_c = centers_from_assignment(e_sh_c, km_c.assignment, k, &counts_c);
        const Mat c_l = centers_from_assignment(e_sh_l, km_l.assignment, k, &counts_l);
        LocalResult l = local_loss(c_c, c_l, matching);
        Mat d_c = scatter_center_grads(l.d_c_c, km_c.assignment, counts_c);
        Mat d_l = scatter_center_grads(l.d_c_l, km_l.assignment, counts_l);
        if (inject_bug) corrupt_largest({&d_c, &d_l});
        std::vector<Mat*> params{&e_sh_c, &e_sh_l};
        std::vector<const Mat*> analytic{&d_c, &d_l};
        add_entry("l_loc", grad_check(eval, params, analytic, eps, trials, rng));
    }

    // full joint objective through encoders and propagation
    {
        SplitDataset split = tiny_split(rng);
        const BipartiteGraph graph = build_graph(split);
        const std::size_t n_total = 14;
        BackboneModel model = init_backbone(6, 8, d, 1, rng.next_u64());
        EncoderDims dims{static_cast<std::uint32_t>(d), 6, static_cast<std::uint32_t>(d),
                         static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(d)};
        EncoderSet enc = init_encoders(dims, rng.next_u64());
        const Mat e_l = Mat::gaussian(n_total, 6, 0.0, 1.0, rng);

        TrainConfig cfg;
        cfg.lambda = 0.3;
        cfg.K = 3;
        cfg.d = static_cast<std::uint32_t>(d);
        cfg.l2 = 0.01;

        const BprBatch batch = sample_bpr_batch(split, 12, rng);
        std::vector<std::uint32_t> all_idx(n_total);
        std::iota(all_idx.begin(), all_idx.end(), 0u);
        const auto glo_idx = all_idx;
        const auto uni_idx = all_idx;

        EpochClusters clusters;
        {
            const Mat e_c = propagate(model, graph);
            const DisentangledReps reps = encode(enc, e_c, e_l);
            PreferenceCenters km_c = kmeans(reps.e_sh_c, cfg.K, 50, 4, rng.next_u64());
            PreferenceCenters km_l = kmeans(reps.e_sh_l, cfg.K, 50, 4, rng.next_u64());
            clusters.matching = match_centers(km_c.centers, km_l.centers);
            clusters.assign_c = std::move(km_c.assignment);
            clusters.assign_l = std::move(km_l.assignment);
        }

        ParamGrads grads;
        joint_loss_and_grads(model, graph, enc, e_l, clusters, cfg, batch, glo_idx,
                             uni_idx, grads);
        auto eval = [&]() {
            ParamGrads scratch;
            return joint_loss_and_grads(model, graph, enc, e_l, clusters, cfg, batch,
                                        glo_idx, uni_idx, scratch)
                .total;
        };
        std::vector<Mat*> params = param_list(model, enc);
        std::vector<Mat> acopy;
        for (const Mat* g : grads.list()) acopy.push_back(*g);
        if (inject_bug) {
            std::vector<Mat*> mut;
            for (auto& m : acopy) mut.push_back(&m);
            corrupt_largest(mut);
        }
        std::vector<const Mat*> analytic;
        for (const auto& m : acopy) analytic.push_back(&m);
        add_entry("joint", grad_check(eval, params, analytic, eps, trials, rng));
    }

    report.all_pass = true;
    for (const auto& e : report.entries) report.all_pass = report.all_pass && e.pass;
    return report;
}

std::string encoders_to_json_text(const EncoderSet& enc) {
    auto mat_to_json = [](const Mat& m) {
        json j;
        j["rows"] = m.rows();
        j["cols"] = m.cols();
        j["values"] = std::vector<double>(m.data(), m.data() + m.size());
        return j;
    };
    auto mlp_to_json = [&](const Mlp& m) {
        json j;
        j["w1"] = mat_to_json(m.w1);
        j["b1"] = mat_to_json(m.b1);
        j["w2"] = mat_to_json(m.w2);
        j["b2"] = mat_to_json(m.b2);
        j["act"] = m.act == Activation::Tanh ? "tanh" : "identity";
        return j;
    };
    json j;
    j["dims"] = {{"d_in_c", enc.dims.d_in_c}, {"d_in_l", enc.dims.d_in_l},
                 {"d_h", enc.dims.d_h},       {"d_sp", enc.dims.d_sp},
                 {"d_sh", enc.dims.d_sh}};
    j["sp_c"] = mlp_to_json(enc.sp_c);
    j["sh_c"] = mlp_to_json(enc.sh_c);
    j["sp_l"] = mlp_to_json(enc.sp_l);
    j["sh_l"] = mlp_to_json(enc.sh_l);
    return j.dump() + "\n";
}

EncoderSet encoders_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("encoder manifest: invalid JSON: ") + e.what());
    }
    auto mat_from_json = [](const json& mj) {
        const std::size_t rows = mj.at("rows").get<std::size_t>();
        const std::size_t cols = mj.at("cols").get<std::size_t>();
        const auto vals = mj.at("values").get<std::vector<double>>();
        if (vals.size() != rows * cols)
            throw FormatError("encoder manifest: value count mismatch");
        Mat m(rows, cols);
        std::copy(vals.begin(), vals.end(), m.data());
        return m;
    };
    auto mlp_from_json = [&](const json& mj) {
        Mlp m;
        m.w1 = mat_from_json(mj.at("w1"));
        m.b1 = mat_from_json(mj.at("b1"));
        m.w2 = mat_from_json(mj.at("w2"));
        m.b2 = mat_from_json(mj.at("b2"));
        m.act = mj.at("act").get<std::string>() == "tanh" ? Activation::Tanh
                                                          : Activation::Identity;
        return m;
    };
    EncoderSet enc;
    const json& dj = j.at("dims");
    enc.dims.d_in_c = dj.at("d_in_c").get<std::uint32_t>();
    enc.dims.d_in_l = dj.at("d_in_l").get<std::uint32_t>();
    enc.dims.d_h = dj.at("d_h").get<std::uint32_t>();
    enc.dims.d_sp = dj.at("d_sp").get<std::uint32_t>();
    enc.dims.d_sh = dj.at("d_sh").get<std::uint32_t>();
    enc.sp_c = mlp_from_json(j.at("sp_c"));
    enc.sh_c = mlp_from_json(j.at("sh_c"));
    enc.sp_l = mlp_from_json(j.at("sp_l"));
    enc.sh_l = mlp_from_json(j.at("sh_l"));
    return enc;
}

std::string history_to_csv(const std::vector<StepLog>& history) {
    std::string out = "epoch,step,l_base,l_or,l_uni,l_glo,l_loc,total\n";
    char buf[256];
    for (const auto& s : history) {
        std::snprintf(buf, sizeof(buf), "%u,%u,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                      s.epoch, s.step, s.l_base, s.l_or, s.l_uni, s.l_glo, s.l_loc,
                      s.total);
        out += buf;
    }
    return out;
}

}  // namespace darec
