#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "darec/dataio.hpp"
#include "darec/evaluation.hpp"
#include "darec/kernels.hpp"
#include "darec/training.hpp"

using namespace darec;

namespace {

SynthResult small_fixture(std::uint64_t seed = 1) {
    SynthSpec spec;
    spec.n_users = 30;
    spec.n_items = 20;
    spec.latent_dim = 4;
    spec.llm_dim = 8;
    spec.interactions_per_user = 6;
    spec.seed = seed;
    return synth_dataset(spec);
}

TrainConfig small_cfg() {
    TrainConfig cfg;
    cfg.d = 8;
    cfg.epochs = 3;
    cfg.bpr_batch = 32;
    cfg.n_hat = 40;
    cfg.uni_sample = 24;
    cfg.K = 4;
    cfg.n_layers = 1;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("config JSON round trip and validation") {
    TrainConfig c;
    c.lambda = 0.25;
    c.K = 6;
    c.use_glo = false;
    const std::string text = config_to_json_text(c);
    const TrainConfig back = config_from_json_text(text);
    CHECK(back.lambda == 0.25);
    CHECK(back.K == 6);
    CHECK(back.use_glo == false);
    CHECK(back.use_or == true);

    CHECK_THROWS_WITH_AS(config_from_json_text("{\"lamda\": 0.1}"),
                         doctest::Contains("lamda"), ParamError);
    CHECK_THROWS_WITH_AS(config_from_json_text("{\"lr\": 0}"),
                         doctest::Contains("lr"), ParamError);
    CHECK_THROWS_AS(config_from_json_text("not json"), ParamError);
    // partial config keeps defaults
    const TrainConfig partial = config_from_json_text("{\"K\": 3}");
    CHECK(partial.K == 3);
    CHECK(partial.lambda == 0.1);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    Mat theta = Mat::filled(2, 3, 1.5);
    const Mat zero(2, 3);
    std::vector<Mat*> params{&theta};
    std::vector<const Mat*> grads{&zero};
    AdamState st;
    st.init(params);
    for (int i = 0; i < 10; ++i) adam_step(params, grads, st, 0.1);
    CHECK(max_abs_diff(theta, Mat::filled(2, 3, 1.5)) == 0.0);
}

TEST_CASE("adam constant-gradient step size approaches lr") {
    Mat theta(1, 1);
    Mat g = Mat::filled(1, 1, 3.7);
    std::vector<Mat*> params{&theta};
    std::vector<const Mat*> grads{&g};
    AdamState st;
    st.init(params);
    const double lr = 0.01;
    double prev = theta(0, 0);
    double step = 0.0;
    for (int i = 0; i < 5000; ++i) {
        adam_step(params, grads, st, lr);
        step = prev - theta(0, 0);
        prev = theta(0, 0);
    }
    CHECK(step == doctest::Approx(lr).epsilon(1e-3));  // lr * sign(g)
}

TEST_CASE("adam three-step hand trace") {
    Mat theta(1, 1);
    Mat g = Mat::filled(1, 1, 1.0);
    std::vector<Mat*> params{&theta};
    std::vector<const Mat*> grads{&g};
    AdamState st;
    st.init(params);
    const double lr = 0.1;

    // independent scalar recurrence
    double m = 0.0, v = 0.0, x = 0.0;
    for (int t = 1; t <= 3; ++t) {
        adam_step(params, grads, st, lr);
        m = 0.9 * m + 0.1 * 1.0;
        v = 0.999 * v + 0.001 * 1.0;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.999, t));
        x -= lr * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(theta(0, 0) == doctest::Approx(x).epsilon(1e-15));
    }
}

TEST_CASE("sample_alignment_indices identity, determinism and clamping") {
    Rng a(3), b(3);
    const auto full = sample_alignment_indices(10, 10, a);
    std::vector<std::uint32_t> expect(10);
    std::iota(expect.begin(), expect.end(), 0u);
    CHECK(full == expect);

    Rng c(4), d(4);
    CHECK(sample_alignment_indices(100, 30, c) == sample_alignment_indices(100, 30, d));

    Rng e(5);
    CHECK(sample_alignment_indices(8, 20, e).size() == 8);  // clamped
}

TEST_CASE("sample_alignment_indices inclusion frequency within 3 sigma") {
    const std::size_t n_total = 50, n_hat = 10, trials = 10000;
    std::vector<std::size_t> counts(n_total, 0);
    Rng rng(6);
    for (std::size_t t = 0; t < trials; ++t) {
        const auto idx = sample_alignment_indices(n_total, n_hat, rng);
        CHECK(std::is_sorted(idx.begin(), idx.end()));
        for (const std::uint32_t i : idx) ++counts[i];
    }
    const double p = static_cast<double>(n_hat) / n_total;
    const double sigma = std::sqrt(trials * p * (1.0 - p));
    for (const std::size_t c : counts)
        CHECK(std::abs(static_cast<double>(c) - trials * p) <= 3.0 * sigma);
}

TEST_CASE("grad_check is exact on a quadratic and catches a corrupted gradient") {
    Rng rng(7);
    Mat theta = Mat::gaussian(3, 4, 0.0, 1.0, rng);
    auto eval = [&]() { return 0.5 * frobenius_sq(theta); };
    Mat analytic = theta;  // gradient of 0.5||x||^2 is x
    std::vector<Mat*> params{&theta};
    std::vector<const Mat*> grads{&analytic};
    Rng check(8);
    CHECK(grad_check(eval, params, grads, 1e-5, 24, check) < 1e-9);

    Mat corrupted = analytic;
    std::size_t worst = 0;
    for (std::size_t i = 0; i < corrupted.size(); ++i)
        if (std::abs(corrupted.data()[i]) > std::abs(corrupted.data()[worst])) worst = i;
    corrupted.data()[worst] *= 2.0;
    std::vector<const Mat*> bad{&corrupted};
    Rng check2(9);
    CHECK(grad_check(eval, params, bad, 1e-5, 24, check2) > 0.3);
}

TEST_CASE("gradient suite passes and the injected bug is caught") {
    const GradSuiteReport ok = run_gradient_suite(false);
    REQUIRE(ok.entries.size() == 6);
    for (const auto& e : ok.entries) {
        INFO(e.term << " rel err " << e.max_rel_err);
        CHECK(e.pass);
        CHECK(e.max_rel_err < 1e-4);
    }
    CHECK(ok.all_pass);

    const GradSuiteReport bad = run_gradient_suite(true);
    CHECK(!bad.all_pass);
    for (const auto& e : bad.entries) {
        INFO(e.term);
        CHECK(e.max_rel_err > 0.3);
    }
}

TEST_CASE("joint loss with lambda zero is exactly the base loss") {
    const SynthResult fx = small_fixture();
    TrainConfig cfg = small_cfg();
    cfg.lambda = 0.0;

    const BipartiteGraph graph = build_graph(fx.split);
    BackboneModel model = init_backbone(fx.split.base.n_users, fx.split.base.n_items,
                                        cfg.d, cfg.n_layers, 1);
    EncoderDims dims{cfg.d, 8, cfg.d, cfg.d, cfg.d};
    EncoderSet enc = init_encoders(dims, 2);
    const Mat e_l = vstack(fx.user_llm.to_mat(), fx.item_llm.to_mat());

    Rng rng(3);
    const BprBatch batch = sample_bpr_batch(fx.split, 16, rng);
    const auto idx = sample_alignment_indices(50, 20, rng);
    EpochClusters clusters;  // unused at lambda = 0
    ParamGrads grads;
    const JointTerms t = joint_loss_and_grads(model, graph, enc, e_l, clusters, cfg,
                                              batch, idx, idx, grads);
    CHECK(t.total == t.l_base);
    CHECK(t.l_or == 0.0);
    CHECK(t.l_glo == 0.0);
    // encoder gradients are identically zero in that case
    CHECK(frobenius_sq(grads.g_sp_c.dw1) == 0.0);
    CHECK(frobenius_sq(grads.g_sh_l.dw2) == 0.0);
}

TEST_CASE("train epochs=0 returns the initialized state") {
    const SynthResult fx = small_fixture();
    TrainConfig cfg = small_cfg();
    cfg.epochs = 0;
    const TrainedState st = train(fx.split, fx.user_llm, fx.item_llm, cfg);
    CHECK(st.history.empty());
    CHECK(st.epochs_run == 0);

    Rng master(cfg.seed);
    const std::uint64_t backbone_seed = master.next_u64();
    const BackboneModel fresh = init_backbone(30, 20, cfg.d, cfg.n_layers, backbone_seed);
    CHECK(st.backbone.user_emb == fresh.user_emb);
    CHECK(st.backbone.item_emb == fresh.item_emb);
}

TEST_CASE("train determinism: identical configs give bit-identical histories") {
    const SynthResult fx = small_fixture();
    const TrainConfig cfg = small_cfg();
    const TrainedState a = train(fx.split, fx.user_llm, fx.item_llm, cfg);
    const TrainedState b = train(fx.split, fx.user_llm, fx.item_llm, cfg);
    REQUIRE(a.history.size() == b.history.size());
    CHECK(history_to_csv(a.history) == history_to_csv(b.history));
    CHECK(a.enhanced == b.enhanced);
}

TEST_CASE("per-term ranges hold at every logged step") {
    const SynthResult fx = small_fixture();
    TrainConfig cfg = small_cfg();
    cfg.epochs = 4;
    const TrainedState st = train(fx.split, fx.user_llm, fx.item_llm, cfg);
    REQUIRE(!st.history.empty());
    for (const auto& s : st.history) {
        CHECK(s.l_base > 0.0);
        CHECK(s.l_or >= 0.0);
        CHECK(s.l_glo >= 0.0);
        CHECK(s.l_loc >= 0.0);
        CHECK(s.l_uni >= -16.0);
        CHECK(s.l_uni <= 0.0);
        CHECK(std::isfinite(s.total));
    }
}

TEST_CASE("lambda zero with zero layers reduces to a standalone MF-BPR run") {
    const SynthResult fx = small_fixture(11);
    TrainConfig cfg = small_cfg();
    cfg.lambda = 0.0;
    cfg.n_layers = 0;
    cfg.epochs = 4;

    const TrainedState st = train(fx.split, fx.user_llm, fx.item_llm, cfg);

    // Standalone oracle: same stream discipline, plain MF-BPR with Adam.
    Rng master(cfg.seed);
    const std::uint64_t backbone_seed = master.next_u64();
    master.next_u64();  // encoder seed, unused by the oracle
    Rng step_rng(master.next_u64());

    BackboneModel model = init_backbone(fx.split.base.n_users, fx.split.base.n_items,
                                        cfg.d, 0, backbone_seed);
    std::vector<Mat*> params{&model.user_emb, &model.item_emb};
    AdamState adam;
    adam.init(params);
    const std::size_t n_total = fx.split.base.n_users + fx.split.base.n_items;
    const std::size_t steps = std::max<std::size_t>(1, fx.split.train.size() / cfg.bpr_batch);
    const std::size_t n_hat_eff = std::min<std::size_t>(cfg.n_hat, n_total);
    const std::size_t uni_eff = std::min<std::size_t>(cfg.uni_sample, n_total);

    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t s = 0; s < steps; ++s) {
            const BprBatch batch = sample_bpr_batch(fx.split, cfg.bpr_batch, step_rng);
            sample_alignment_indices(n_total, n_hat_eff, step_rng);
            sample_alignment_indices(n_total, uni_eff, step_rng);
            const Mat base = stacked_base(model);
            const BprResult r = bpr_loss(base, base, fx.split.base.n_users, batch, cfg.l2);
            Mat d_base = r.d_propagated;
            add_inplace(d_base, r.d_base);
            Mat d_user(model.user_emb.rows(), cfg.d), d_item(model.item_emb.rows(), cfg.d);
            for (std::size_t i = 0; i < d_user.rows(); ++i)
                std::copy(d_base.row(i), d_base.row(i) + cfg.d, d_user.row(i));
            for (std::size_t i = 0; i < d_item.rows(); ++i)
                std::copy(d_base.row(d_user.rows() + i), d_base.row(d_user.rows() + i) + cfg.d,
                          d_item.row(i));
            std::vector<const Mat*> grads{&d_user, &d_item};
            adam_step(params, grads, adam, cfg.lr);
        }
    }

    CHECK(st.backbone.user_emb == model.user_emb);
    CHECK(st.backbone.item_emb == model.item_emb);

    const MetricsReport m1 = evaluate(st.enhanced, fx.split, EvalSplit::Val, {20});
    const MetricsReport m2 = evaluate(stacked_base(model), fx.split, EvalSplit::Val, {20});
    CHECK(m1.recall_at.at(20) == m2.recall_at.at(20));
}

TEST_CASE("smoothed base loss trends down over the first 200 steps") {
    SynthSpec spec;
    spec.n_users = 200;
    spec.n_items = 100;
    spec.latent_dim = 8;
    spec.llm_dim = 32;
    spec.interactions_per_user = 10;
    spec.seed = 101;
    const SynthResult fx = synth_dataset(spec);

    TrainConfig cfg;
    cfg.d = 32;
    cfg.lr = 1e-3;
    cfg.bpr_batch = 64;
    cfg.epochs = 13;  // 18 steps per epoch -> 234 steps
    cfg.n_hat = 128;
    cfg.uni_sample = 64;
    cfg.K = 8;
    cfg.seed = 7;
    const TrainedState st = train(fx.split, fx.user_llm, fx.item_llm, cfg);
    REQUIRE(st.history.size() >= 200);

    // Window-20 means over the first 200 steps, consecutive windows.
    auto window_mean = [&](std::size_t w) {
        double acc = 0.0;
        for (std::size_t i = w * 20; i < (w + 1) * 20; ++i) acc += st.history[i].l_base;
        return acc / 20.0;
    };
    for (std::size_t w = 1; w < 10; ++w)
        CHECK(window_mean(w) <= window_mean(w - 1) + 1e-9);
}

TEST_CASE("divergence guard names the epoch") {
    const SynthResult fx = small_fixture();
    TrainConfig cfg = small_cfg();
    cfg.lr = 1e4;  // absurd learning rate blows the loss up
    cfg.epochs = 30;
    CHECK_THROWS_AS(train(fx.split, fx.user_llm, fx.item_llm, cfg), TrainingDiverged);
}

TEST_CASE("encoder manifest JSON round trip") {
    EncoderDims dims{6, 9, 5, 4, 4};
    const EncoderSet enc = init_encoders(dims, 33);
    const std::string text = encoders_to_json_text(enc);
    const EncoderSet back = encoders_from_json_text(text);
    CHECK(back.sp_c.w1 == enc.sp_c.w1);
    CHECK(back.sh_l.b2 == enc.sh_l.b2);
    CHECK(back.dims.d_in_l == 9);
    CHECK(back.sp_c.act == Activation::Tanh);
}

TEST_CASE("history CSV format") {
    std::vector<StepLog> hist{{0, 0, 0.5, 0.1, -1.0, 0.2, 0.3, 0.6}};
    const std::string csv = history_to_csv(hist);
    CHECK(csv.find("epoch,step,l_base,l_or,l_uni,l_glo,l_loc,total\n") == 0);
    CHECK(csv.find("0,0,0.5,0.1,-1,0.2,0.3,0.6\n") != std::string::npos);
}
