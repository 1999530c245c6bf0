#include "darec/structalign.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "darec/dataio.hpp"
#include "darec/kernels.hpp"
#include "darec/rng.hpp"

namespace darec {

namespace {
constexpr double kNormEps = 1e-12;
}

Mat global_similarity(const Mat& e_sh, const std::vector<std::uint32_t>& sample_idx) {
    if (sample_idx.empty()) throw ParamError("global_similarity: empty sample");
    const Mat x = take_rows(e_sh, sample_idx);
    return matmul_nt(x, x);
}

GlobalResult global_loss(const Mat& e_sh_c, const Mat& e_sh_l,
                         const std::vector<std::uint32_t>& sample_idx) {
    if (sample_idx.empty()) throw ParamError("global_loss: empty sample");
    const std::size_t n = sample_idx.size();
    const Mat x = take_rows(e_sh_c, sample_idx);
    const Mat y = take_rows(e_sh_l, sample_idx);

    Mat diff = matmul_nt(x, x);
    {
        const Mat sy = matmul_nt(y, y);
        add_scaled_inplace(diff, sy, -1.0);
    }
    const double inv_n2 = 1.0 / (static_cast<double>(n) * static_cast<double>(n));

    GlobalResult res;
    res.value = frobenius_sq(diff) * inv_n2;
    res.d_sh_c = Mat(e_sh_c.rows(), e_sh_c.cols());
    res.d_sh_l = Mat(e_sh_l.rows(), e_sh_l.cols());

    // d/dX ||XX^T - YY^T||_F^2 = 4 (XX^T - YY^T) X, and -4(...)Y for Y.
    const Mat dx = matmul(diff, x);
    const Mat dy = matmul(diff, y);
    for (std::size_t a = 0; a < n; ++a) {
        kernels::axpy(4.0 * inv_n2, dx.row(a), res.d_sh_c.row(sample_idx[a]), x.cols());
        kernels::axpy(-4.0 * inv_n2, dy.row(a), res.d_sh_l.row(sample_idx[a]), y.cols());
    }
    return res;
}

namespace {

struct LloydState {
    Mat centers;
    std::vector<std::uint32_t> assignment;
    double inertia = std::numeric_limits<double>::infinity();
    std::vector<double> history;
    bool converged = false;
};

void assign_nearest(const Mat& x, const Mat& centers,
                    std::vector<std::uint32_t>& assignment, double& inertia) {
    const std::size_t n = x.rows();
    const std::size_t k = centers.rows();
    inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t best_k = 0;
        for (std::size_t c = 0; c < k; ++c) {
            const double d2 = kernels::sq_dist(x.row(i), centers.row(c), x.cols());
            if (d2 < best) {
                best = d2;
                best_k = static_cast<std::uint32_t>(c);
            }
        }
        assignment[i] = best_k;
        inertia += best;
    }
}

// Means per cluster; empty clusters steal the globally farthest point from a
// cluster that can spare one.
void update_centers(const Mat& x, std::vector<std::uint32_t>& assignment, Mat& centers) {
    const std::size_t k = centers.rows();
    std::vector<std::uint32_t> counts(k, 0);
    centers.set_zero();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        kernels::axpy(1.0, x.row(i), centers.row(assignment[i]), x.cols());
        ++counts[assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c)
        if (counts[c] > 0) kernels::scal(1.0 / counts[c], centers.row(c), x.cols());

    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] > 0) continue;
        double worst = -1.0;
        std::size_t steal = 0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            if (counts[assignment[i]] < 2) continue;
            const double d2 =
                kernels::sq_dist(x.row(i), centers.row(assignment[i]), x.cols());
            if (d2 > worst) {
                worst = d2;
                steal = i;
            }
        }
        const std::uint32_t donor = assignment[steal];
        --counts[donor];
        counts[c] = 1;
        assignment[steal] = static_cast<std::uint32_t>(c);
        std::memcpy(centers.row(c), x.row(steal), x.cols() * sizeof(double));
        // Recompute the donor mean without the stolen row.
        Mat donor_mean(1, x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i)
            if (assignment[i] == donor)
                kernels::axpy(1.0, x.row(i), donor_mean.data(), x.cols());
        kernels::scal(1.0 / counts[donor], donor_mean.data(), x.cols());
        std::memcpy(centers.row(donor), donor_mean.data(), x.cols() * sizeof(double));
    }
}

Mat seed_centers_pp(const Mat& x, std::uint32_t k, Rng& rng) {
    const std::size_t n = x.rows();
    Mat centers(k, x.cols());
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());

    std::size_t first = static_cast<std::size_t>(rng.uniform_int(n));
    std::memcpy(centers.row(0), x.row(first), x.cols() * sizeof(double));
    for (std::uint32_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double dist =
                kernels::sq_dist(x.row(i), centers.row(c - 1), x.cols());
            d2[i] = std::min(d2[i], dist);
            total += d2[i];
        }
        std::size_t pick;
        if (total <= 0.0) {
            pick = static_cast<std::size_t>(rng.uniform_int(n));
        } else {
            const double r = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        }
        std::memcpy(centers.row(c), x.row(pick), x.cols() * sizeof(double));
    }
    return centers;
}

LloydState lloyd_once(const Mat& x, std::uint32_t k, std::uint32_t max_iter, Rng rng) {
    LloydState st;
    st.centers = seed_centers_pp(x, k, rng);
    st.assignment.assign(x.rows(), 0);

    std::vector<std::uint32_t> prev;
    double inertia = 0.0;
    assign_nearest(x, st.centers, st.assignment, inertia);
    st.history.push_back(inertia);

    for (std::uint32_t it = 0; it < max_iter; ++it) {
        prev = st.assignment;
        update_centers(x, st.assignment, st.centers);
        assign_nearest(x, st.centers, st.assignment, inertia);
        st.history.push_back(inertia);
        if (st.assignment == prev) {
            st.converged = true;
            break;
        }
    }
    // Keep centers consistent with the returned assignment even on the
    // max_iter exit path.
    std::vector<std::uint32_t> counts;
    st.centers = centers_from_assignment(x, st.assignment, k, &counts);
    st.inertia = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i)
        st.inertia += kernels::sq_dist(x.row(i), st.centers.row(st.assignment[i]), x.cols());
    return st;
}

}  // namespace

PreferenceCenters kmeans(const Mat& e_sh, std::uint32_t k, std::uint32_t max_iter,
                         std::uint32_t n_init, std::uint64_t seed) {
    if (k < 1) throw ParamError("kmeans: K must be >= 1");
    if (e_sh.rows() < k)
        throw ParamError("kmeans: n=" + std::to_string(e_sh.rows()) +
                         " < K=" + std::to_string(k));
    if (n_init < 1) throw ParamError("kmeans: n_init must be >= 1");

    Rng base(seed);
    LloydState best;
    for (std::uint32_t r = 0; r < n_init; ++r) {
        LloydState st = lloyd_once(e_sh, k, max_iter, base.fork(r));
        if (st.inertia < best.inertia) best = std::move(st);
    }

    PreferenceCenters out;
    out.centers = std::move(best.centers);
    out.assignment = std::move(best.assignment);
    out.inertia = best.inertia;
    out.inertia_history = std::move(best.history);
    out.converged = best.converged;
    return out;
}

CenterMatching match_centers(const Mat& c_c, const Mat& c_l) {
    if (c_c.rows() != c_l.rows() || c_c.cols() != c_l.cols())
        throw ParamError("match_centers: shape mismatch");
    const std::size_t k = c_c.rows();

    // Squared distances order identically to Euclidean ones.
    Mat dist(k, k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j)
            dist(i, j) = kernels::sq_dist(c_c.row(i), c_l.row(j), c_c.cols());

    CenterMatching m;
    m.perm.assign(k, 0);
    std::vector<bool> row_done(k, false), col_done(k, false);
    for (std::size_t step = 0; step < k; ++step) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bi = 0, bj = 0;
        for (std::size_t i = 0; i < k; ++i) {
            if (row_done[i]) continue;
            for (std::size_t j = 0; j < k; ++j) {
                if (col_done[j]) continue;
                if (dist(i, j) < best) {  // row-major scan keeps ties lexicographic
                    best = dist(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        m.perm[bi] = static_cast<std::uint32_t>(bj);
        row_done[bi] = true;
        col_done[bj] = true;
    }
    return m;
}

LocalResult local_loss(const Mat& c_c, const Mat& c_l, const CenterMatching& matching) {
    const std::size_t k = c_c.rows();
    if (matching.perm.size() != k) throw ParamError("local_loss: matching size mismatch");
    const std::size_t d = c_c.cols();

    LocalResult res;
    res.d_c_c = Mat(k, d);
    res.d_c_l = Mat(k, d);

    std::vector<double> norm_c(k), norm_l(k);
    for (std::size_t i = 0; i < k; ++i) {
        norm_c[i] = std::sqrt(kernels::dot(c_c.row(i), c_c.row(i), d));
        norm_l[i] = std::sqrt(kernels::dot(c_l.row(i), c_l.row(i), d));
    }

    const double diag_w = 1.0 / static_cast<double>(k);
    const double off_w = (k > 1) ? 1.0 / (static_cast<double>(k) * k - k) : 0.0;

    for (std::size_t i = 0; i < k; ++i) {
        const double* a = c_c.row(i);
        const double na = norm_c[i];
        for (std::size_t j = 0; j < k; ++j) {
            const std::uint32_t lj = matching.perm[j];
            const double* b = c_l.row(lj);
            const double nb = norm_l[lj];
            double s = 0.0;
            const bool ok = na >= kNormEps && nb >= kNormEps;
            if (ok) s = kernels::dot(a, b, d) / (na * nb);

            double coeff;
            if (i == j) {
                res.value += diag_w * (s - 1.0) * (s - 1.0);
                coeff = 2.0 * diag_w * (s - 1.0);
            } else {
                res.value += off_w * s * s;
                coeff = 2.0 * off_w * s;
            }
            if (!ok || coeff == 0.0) continue;

            double* da = res.d_c_c.row(i);
            double* db = res.d_c_l.row(lj);
            for (std::size_t t = 0; t < d; ++t) {
                da[t] += coeff * (b[t] / (na * nb) - s * a[t] / (na * na));
                db[t] += coeff * (a[t] / (na * nb) - s * b[t] / (nb * nb));
            }
        }
    }
    return res;
}

Mat centers_from_assignment(const Mat& e_sh, const std::vector<std::uint32_t>& assignment,
                            std::uint32_t k, std::vector<std::uint32_t>* counts_out) {
    Mat centers(k, e_sh.cols());
    std::vector<std::uint32_t> counts(k, 0);
    for (std::size_t i = 0; i < e_sh.rows(); ++i) {
        kernels::axpy(1.0, e_sh.row(i), centers.row(assignment[i]), e_sh.cols());
        ++counts[assignment[i]];
    }
    for (std::uint32_t c = 0; c < k; ++c)
        if (counts[c] > 0) kernels::scal(1.0 / counts[c], centers.row(c), e_sh.cols());
    if (counts_out) *counts_out = std::move(counts);
    return centers;
}

Mat scatter_center_grads(const Mat& d_centers,
                         const std::vector<std::uint32_t>& assignment,
                         const std::vector<std::uint32_t>& counts) {
    Mat out(assignment.size(), d_centers.cols());
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        const std::uint32_t c = assignment[i];
        if (counts[c] == 0) continue;
        kernels::axpy(1.0 / counts[c], d_centers.row(c), out.row(i), d_centers.cols());
    }
    return out;
}

std::string centers_to_csv(const PreferenceCenters& pc) {
    std::string out;
    char buf[48];
    for (std::size_t k = 0; k < pc.centers.rows(); ++k) {
        out += "center," + std::to_string(k);
        for (std::size_t j = 0; j < pc.centers.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), ",%.9g", pc.centers(k, j));
            out += buf;
        }
        out += '\n';
    }
    for (std::size_t i = 0; i < pc.assignment.size(); ++i)
        out += "assign," + std::to_string(i) + "," + std::to_string(pc.assignment[i]) + "\n";
    return out;
}

}  // namespace darec
