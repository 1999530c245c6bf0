#include "darec/theoryprobe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "darec/dataio.hpp"
#include "darec/disentangle.hpp"
#include "darec/kernels.hpp"
#include "darec/training.hpp"

namespace darec {

void JointDistribution::validate() const {
    if (p.size() != static_cast<std::size_t>(card_d) * card_dp * card_y)
        throw ParamError("joint: table size mismatch");
    double total = 0.0;
    for (const double v : p) {
        if (v < 0.0 || !std::isfinite(v))
            throw ParamError("joint: probabilities must be finite and >= 0");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw ParamError("joint: probabilities sum to " + std::to_string(total));
}

JointDistribution build_joint(ProbeScenario scenario, double alpha) {
    JointDistribution j;
    j.card_d = j.card_dp = j.card_y = 2;
    j.p.assign(8, 0.0);
    auto set = [&](std::uint32_t a, std::uint32_t b, std::uint32_t y, double v) {
        j.p[(static_cast<std::size_t>(a) * 2 + b) * 2 + y] = v;
    };
    switch (scenario) {
        case ProbeScenario::MaxGap:
            // Y uniform, D = Y, D' an independent fair coin.
            for (std::uint32_t y = 0; y < 2; ++y)
                for (std::uint32_t b = 0; b < 2; ++b) set(y, b, y, 0.25);
            break;
        case ProbeScenario::ZeroGap:
            set(0, 0, 0, 0.5);
            set(1, 1, 1, 0.5);
            break;
        case ProbeScenario::Interpolated: {
            if (alpha < 0.0 || alpha > 1.0)
                throw ParamError("build_joint: alpha must be in [0, 1]");
            // D = Y uniform; D' = Y w.p. alpha, else a fresh fair coin.
            for (std::uint32_t y = 0; y < 2; ++y) {
                for (std::uint32_t b = 0; b < 2; ++b) {
                    const double p_b_given_y =
                        alpha * (b == y ? 1.0 : 0.0) + (1.0 - alpha) * 0.5;
                    set(y, b, y, 0.5 * p_b_given_y);
                }
            }
            break;
        }
    }
    j.validate();
    return j;
}

ProbeScenario scenario_from_string(const std::string& s) {
    if (s == "max_gap") return ProbeScenario::MaxGap;
    if (s == "zero_gap") return ProbeScenario::ZeroGap;
    if (s == "interpolated") return ProbeScenario::Interpolated;
    throw ParamError("unknown probe scenario: " + s);
}

namespace {

double xlogx_ratio(double pab, double pa, double pb) {
    if (pab <= 0.0) return 0.0;
    return pab * std::log(pab / (pa * pb));
}

}  // namespace

double exact_mi(const JointDistribution& j, MiPair pair) {
    j.validate();
    std::uint32_t na = 0, nb = 0;
    switch (pair) {
        case MiPair::DY: na = j.card_d; nb = j.card_y; break;
        case MiPair::DpY: na = j.card_dp; nb = j.card_y; break;
        case MiPair::DDp: na = j.card_d; nb = j.card_dp; break;
    }
    std::vector<double> pab(static_cast<std::size_t>(na) * nb, 0.0);
    for (std::uint32_t a = 0; a < j.card_d; ++a)
        for (std::uint32_t b = 0; b < j.card_dp; ++b)
            for (std::uint32_t y = 0; y < j.card_y; ++y) {
                const double v = j.at(a, b, y);
                switch (pair) {
                    case MiPair::DY: pab[a * nb + y] += v; break;
                    case MiPair::DpY: pab[b * nb + y] += v; break;
                    case MiPair::DDp: pab[a * nb + b] += v; break;
                }
            }
    std::vector<double> pa(na, 0.0), pb(nb, 0.0);
    for (std::uint32_t a = 0; a < na; ++a)
        for (std::uint32_t b = 0; b < nb; ++b) {
            pa[a] += pab[a * nb + b];
            pb[b] += pab[a * nb + b];
        }
    double mi = 0.0;
    for (std::uint32_t a = 0; a < na; ++a)
        for (std::uint32_t b = 0; b < nb; ++b)
            mi += xlogx_ratio(pab[a * nb + b], pa[a], pb[b]);
    return mi;
}

double conditional_entropy_y(const JointDistribution& j) {
    j.validate();
    double h = 0.0;
    for (std::uint32_t a = 0; a < j.card_d; ++a)
        for (std::uint32_t b = 0; b < j.card_dp; ++b) {
            double p_ab = 0.0;
            for (std::uint32_t y = 0; y < j.card_y; ++y) p_ab += j.at(a, b, y);
            if (p_ab <= 0.0) continue;
            for (std::uint32_t y = 0; y < j.card_y; ++y) {
                const double v = j.at(a, b, y);
                if (v <= 0.0) continue;
                h -= v * std::log(v / p_ab);
            }
        }
    return h;
}

namespace {

// Empirical cell weights from i.i.d. samples of the joint.
std::vector<double> sample_weights(const JointDistribution& j, std::size_t n, Rng& rng) {
    std::vector<double> cdf(j.p.size());
    std::partial_sum(j.p.begin(), j.p.end(), cdf.begin());
    std::vector<double> counts(j.p.size(), 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        const double r = rng.uniform();
        const std::size_t cell = static_cast<std::size_t>(
            std::lower_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
        counts[std::min(cell, counts.size() - 1)] += 1.0;
    }
    for (double& c : counts) c /= static_cast<double>(n);
    return counts;
}

struct Head {
    Mat w;  // in x n_y
    Mat b;  // 1 x n_y
};

// Cross entropy of the linear head over weighted (a, b) combos; fills row
// gradients for both representation blocks and the head parameters.
double head_ce(const Mat& rep_c, const Mat& rep_l, const Head& head,
               const std::vector<double>& weights, const JointDistribution& j,
               Mat* d_rep_c, Mat* d_rep_l, Mat* d_w, Mat* d_b) {
    const std::uint32_t n_y = j.card_y;
    const std::size_t in_dim = rep_c.cols() + rep_l.cols();
    double ce = 0.0;
    Mat x(1, in_dim);
    for (std::uint32_t a = 0; a < j.card_d; ++a) {
        for (std::uint32_t b = 0; b < j.card_dp; ++b) {
            double w_ab = 0.0;
            for (std::uint32_t y = 0; y < n_y; ++y)
                w_ab += weights[(static_cast<std::size_t>(a) * j.card_dp + b) * n_y + y];
            if (w_ab <= 0.0) continue;

            std::copy(rep_c.row(a), rep_c.row(a) + rep_c.cols(), x.data());
            std::copy(rep_l.row(b), rep_l.row(b) + rep_l.cols(),
                      x.data() + rep_c.cols());

            std::vector<double> z(n_y);
            for (std::uint32_t y = 0; y < n_y; ++y) {
                double acc = head.b(0, y);
                for (std::size_t i = 0; i < in_dim; ++i)
                    acc += x.data()[i] * head.w(i, y);
                z[y] = acc;
            }
            const double zmax = *std::max_element(z.begin(), z.end());
            double denom = 0.0;
            for (std::uint32_t y = 0; y < n_y; ++y) denom += std::exp(z[y] - zmax);
            std::vector<double> prob(n_y);
            for (std::uint32_t y = 0; y < n_y; ++y) prob[y] = std::exp(z[y] - zmax) / denom;

            std::vector<double> dz(n_y);
            for (std::uint32_t y = 0; y < n_y; ++y) {
                const double w_aby =
                    weights[(static_cast<std::size_t>(a) * j.card_dp + b) * n_y + y];
                if (w_aby > 0.0) ce -= w_aby * (z[y] - zmax - std::log(denom));
                dz[y] = w_ab * prob[y] - w_aby;
            }
            if (!d_w) continue;
            for (std::uint32_t y = 0; y < n_y; ++y) {
                if (dz[y] == 0.0) continue;
                (*d_b)(0, y) += dz[y];
                for (std::size_t i = 0; i < in_dim; ++i)
                    (*d_w)(i, y) += dz[y] * x.data()[i];
                for (std::size_t i = 0; i < rep_c.cols(); ++i)
                    (*d_rep_c)(a, i) += dz[y] * head.w(i, y);
                for (std::size_t i = 0; i < rep_l.cols(); ++i)
                    (*d_rep_l)(b, i) += dz[y] * head.w(rep_c.cols() + i, y);
            }
        }
    }
    return ce;
}

}  // namespace

double run_probe_mode(const JointDistribution& joint, ProbeMode mode,
                      const ProbeConfig& cfg, std::uint64_t seed) {
    joint.validate();
    Rng master(seed);
    const auto train_w = sample_weights(joint, cfg.n_train, master);
    const auto test_w = sample_weights(joint, cfg.n_test, master);
    const std::uint64_t init_seed = master.next_u64();

    const std::uint32_t n_d = joint.card_d;
    const std::uint32_t n_dp = joint.card_dp;
    const std::uint32_t n_y = joint.card_y;
    const Mat onehot_d = Mat::identity(n_d);
    const Mat onehot_dp = Mat::identity(n_dp);

    Rng init(init_seed);
    EncoderDims dims;
    dims.d_in_c = n_d;
    dims.d_in_l = n_dp;
    dims.d_h = cfg.d_h;
    dims.d_sp = cfg.emb_dim;
    dims.d_sh = cfg.emb_dim;
    EncoderSet enc = init_encoders(dims, init.next_u64());

    const bool hard = mode == ProbeMode::HardAligned;
    const std::size_t rep_cols =
        hard ? cfg.emb_dim : 2 * static_cast<std::size_t>(cfg.emb_dim);

    Head head;
    {
        Rng hr(init.next_u64());
        const double limit = std::sqrt(6.0 / (2.0 * rep_cols + n_y));
        head.w = Mat(2 * rep_cols, n_y);
        for (std::size_t i = 0; i < head.w.size(); ++i)
            head.w.data()[i] = (2.0 * hr.uniform() - 1.0) * limit;
        head.b = Mat(1, n_y);
    }

    // In hard mode only the sh_* encoders are used (one per side).
    std::vector<Mat*> params;
    if (hard) {
        params = {&enc.sh_c.w1, &enc.sh_c.b1, &enc.sh_c.w2, &enc.sh_c.b2,
                  &enc.sh_l.w1, &enc.sh_l.b1, &enc.sh_l.w2, &enc.sh_l.b2,
                  &head.w,      &head.b};
    } else {
        params = {&enc.sp_c.w1, &enc.sp_c.b1, &enc.sp_c.w2, &enc.sp_c.b2,
                  &enc.sh_c.w1, &enc.sh_c.b1, &enc.sh_c.w2, &enc.sh_c.b2,
                  &enc.sp_l.w1, &enc.sp_l.b1, &enc.sp_l.w2, &enc.sp_l.b2,
                  &enc.sh_l.w1, &enc.sh_l.b1, &enc.sh_l.w2, &enc.sh_l.b2,
                  &head.w,      &head.b};
    }
    AdamState adam;
    adam.init(params);

    auto forward_loss = [&](const std::vector<double>& weights, bool with_grads,
                            std::vector<Mat>* grad_out) -> double {
        MlpCache c_sh_c, c_sh_l, c_sp_c, c_sp_l;
        const Mat sh_c = mlp_forward(enc.sh_c, onehot_d, &c_sh_c);
        const Mat sh_l = mlp_forward(enc.sh_l, onehot_dp, &c_sh_l);
        Mat rep_c, rep_l;
        Mat sp_c, sp_l;
        if (hard) {
            rep_c = sh_c;
            rep_l = sh_l;
        } else {
            sp_c = mlp_forward(enc.sp_c, onehot_d, &c_sp_c);
            sp_l = mlp_forward(enc.sp_l, onehot_dp, &c_sp_l);
            rep_c = Mat(n_d, 2 * cfg.emb_dim);
            rep_l = Mat(n_dp, 2 * cfg.emb_dim);
            for (std::uint32_t a = 0; a < n_d; ++a) {
                std::copy(sp_c.row(a), sp_c.row(a) + cfg.emb_dim, rep_c.row(a));
                std::copy(sh_c.row(a), sh_c.row(a) + cfg.emb_dim,
                          rep_c.row(a) + cfg.emb_dim);
            }
            for (std::uint32_t b = 0; b < n_dp; ++b) {
                std::copy(sp_l.row(b), sp_l.row(b) + cfg.emb_dim, rep_l.row(b));
                std::copy(sh_l.row(b), sh_l.row(b) + cfg.emb_dim,
                          rep_l.row(b) + cfg.emb_dim);
            }
        }

        Mat d_rep_c(rep_c.rows(), rep_c.cols());
        Mat d_rep_l(rep_l.rows(), rep_l.cols());
        Mat d_w(head.w.rows(), head.w.cols());
        Mat d_b(1, head.b.cols());
        double loss = head_ce(rep_c, rep_l, head, weights, joint,
                              with_grads ? &d_rep_c : nullptr,
                              with_grads ? &d_rep_l : nullptr,
                              with_grads ? &d_w : nullptr,
                              with_grads ? &d_b : nullptr);

        if (hard && cfg.mu > 0.0) {
            // mu * E_{(a,b) ~ data} ||E^C_a - E^L_b||^2
            for (std::uint32_t a = 0; a < n_d; ++a) {
                for (std::uint32_t b = 0; b < n_dp; ++b) {
                    double w_ab = 0.0;
                    for (std::uint32_t y = 0; y < n_y; ++y)
                        w_ab += weights[(static_cast<std::size_t>(a) * n_dp + b) * n_y + y];
                    if (w_ab <= 0.0) continue;
                    loss += cfg.mu * w_ab *
                            kernels::sq_dist(rep_c.row(a), rep_l.row(b), cfg.emb_dim);
                    if (!with_grads) continue;
                    for (std::uint32_t i = 0; i < cfg.emb_dim; ++i) {
                        const double diff = rep_c(a, i) - rep_l(b, i);
                        d_rep_c(a, i) += cfg.mu * w_ab * 2.0 * diff;
                        d_rep_l(b, i) -= cfg.mu * w_ab * 2.0 * diff;
                    }
                }
            }
        }

        double ortho_term = 0.0;
        Mat d_sp_c_o, d_sh_c_o, d_sp_l_o, d_sh_l_o;
        if (!hard && cfg.lambda_or > 0.0) {
            DisentangledReps reps{sp_c, sh_c, sp_l, sh_l};
            OrthoResult o = orthogonality_loss(reps);
            ortho_term = cfg.lambda_or * o.value;
            loss += ortho_term;
            d_sp_c_o = std::move(o.d_sp_c);
            d_sh_c_o = std::move(o.d_sh_c);
            d_sp_l_o = std::move(o.d_sp_l);
            d_sh_l_o = std::move(o.d_sh_l);
        }

        if (!with_grads || !grad_out) return loss;

        std::vector<Mat> g;
        if (hard) {
            MlpGrads g_sh_c, g_sh_l;
            mlp_backward(enc.sh_c, c_sh_c, d_rep_c, g_sh_c);
            mlp_backward(enc.sh_l, c_sh_l, d_rep_l, g_sh_l);
            g = {g_sh_c.dw1, g_sh_c.db1, g_sh_c.dw2, g_sh_c.db2,
                 g_sh_l.dw1, g_sh_l.db1, g_sh_l.dw2, g_sh_l.db2, d_w, d_b};
        } else {
            Mat d_sp_c(n_d, cfg.emb_dim), d_sh_c(n_d, cfg.emb_dim);
            Mat d_sp_l(n_dp, cfg.emb_dim), d_sh_l(n_dp, cfg.emb_dim);
            for (std::uint32_t a = 0; a < n_d; ++a)
                for (std::uint32_t i = 0; i < cfg.emb_dim; ++i) {
                    d_sp_c(a, i) = d_rep_c(a, i);
                    d_sh_c(a, i) = d_rep_c(a, cfg.emb_dim + i);
                }
            for (std::uint32_t b = 0; b < n_dp; ++b)
                for (std::uint32_t i = 0; i < cfg.emb_dim; ++i) {
                    d_sp_l(b, i) = d_rep_l(b, i);
                    d_sh_l(b, i) = d_rep_l(b, cfg.emb_dim + i);
                }
            if (cfg.lambda_or > 0.0) {
                add_scaled_inplace(d_sp_c, d_sp_c_o, cfg.lambda_or);
                add_scaled_inplace(d_sh_c, d_sh_c_o, cfg.lambda_or);
                add_scaled_inplace(d_sp_l, d_sp_l_o, cfg.lambda_or);
                add_scaled_inplace(d_sh_l, d_sh_l_o, cfg.lambda_or);
            }
            MlpGrads g_sp_c, g_sh_c, g_sp_l, g_sh_l;
            mlp_backward(enc.sp_c, c_sp_c, d_sp_c, g_sp_c);
            mlp_backward(enc.sh_c, c_sh_c, d_sh_c, g_sh_c);
            mlp_backward(enc.sp_l, c_sp_l, d_sp_l, g_sp_l);
            mlp_backward(enc.sh_l, c_sh_l, d_sh_l, g_sh_l);
            g = {g_sp_c.dw1, g_sp_c.db1, g_sp_c.dw2, g_sp_c.db2, g_sh_c.dw1,
                 g_sh_c.db1, g_sh_c.dw2, g_sh_c.db2, g_sp_l.dw1, g_sp_l.db1,
                 g_sp_l.dw2, g_sp_l.db2, g_sh_l.dw1, g_sh_l.db1, g_sh_l.dw2,
                 g_sh_l.db2, d_w,        d_b};
        }
        *grad_out = std::move(g);
        return loss;
    };

    for (std::uint32_t it = 0; it < cfg.iters; ++it) {
        std::vector<Mat> grads;
        const double loss = forward_loss(train_w, true, &grads);
        if (!std::isfinite(loss))
            throw TrainingDiverged("probe training diverged at iteration " +
                                   std::to_string(it));
        std::vector<const Mat*> gp;
        for (const auto& m : grads) gp.push_back(&m);
        adam_step(params, gp, adam, cfg.lr);
    }

    // Test CE only: no regularizers, test weights.
    MlpCache c1, c2, c3, c4;
    Mat sh_c = mlp_forward(enc.sh_c, onehot_d, &c1);
    Mat sh_l = mlp_forward(enc.sh_l, onehot_dp, &c2);
    Mat rep_c, rep_l;
    if (hard) {
        rep_c = sh_c;
        rep_l = sh_l;
    } else {
        Mat sp_c = mlp_forward(enc.sp_c, onehot_d, &c3);
        Mat sp_l = mlp_forward(enc.sp_l, onehot_dp, &c4);
        rep_c = Mat(n_d, 2 * cfg.emb_dim);
        rep_l = Mat(n_dp, 2 * cfg.emb_dim);
        for (std::uint32_t a = 0; a < n_d; ++a) {
            std::copy(sp_c.row(a), sp_c.row(a) + cfg.emb_dim, rep_c.row(a));
            std::copy(sh_c.row(a), sh_c.row(a) + cfg.emb_dim, rep_c.row(a) + cfg.emb_dim);
        }
        for (std::uint32_t b = 0; b < n_dp; ++b) {
            std::copy(sp_l.row(b), sp_l.row(b) + cfg.emb_dim, rep_l.row(b));
            std::copy(sh_l.row(b), sh_l.row(b) + cfg.emb_dim, rep_l.row(b) + cfg.emb_dim);
        }
    }
    return head_ce(rep_c, rep_l, head, test_w, joint, nullptr, nullptr, nullptr,
                   nullptr);
}

ProbeResult run_probe(const JointDistribution& joint, const ProbeConfig& cfg,
                      std::uint64_t seed) {
    ProbeResult r;
    r.i_d_y = exact_mi(joint, MiPair::DY);
    r.i_dp_y = exact_mi(joint, MiPair::DpY);
    r.delta_p = std::abs(r.i_d_y - r.i_dp_y);
    r.h_y_given_both = conditional_entropy_y(joint);
    r.ce_aligned = run_probe_mode(joint, ProbeMode::HardAligned, cfg, seed);
    r.ce_free = run_probe_mode(joint, ProbeMode::Disentangled, cfg, seed);
    return r;
}

}  // namespace darec
