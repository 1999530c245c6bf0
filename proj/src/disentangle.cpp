#include "darec/disentangle.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "darec/dataio.hpp"
#include "darec/kernels.hpp"

namespace darec {

namespace {
constexpr double kNormEps = 1e-12;

Mat xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Mat w(fan_in, fan_out);
    for (std::size_t i = 0; i < w.size(); ++i)
        w.data()[i] = (2.0 * rng.uniform() - 1.0) * limit;
    return w;
}

Mlp make_mlp(std::uint32_t d_in, std::uint32_t d_h, std::uint32_t d_out, Rng& rng) {
    Mlp m;
    m.w1 = xavier_uniform(d_in, d_h, rng);
    m.b1 = Mat(1, d_h);
    m.w2 = xavier_uniform(d_h, d_out, rng);
    m.b2 = Mat(1, d_out);
    m.act = Activation::Tanh;
    return m;
}

void add_row_broadcast(Mat& m, const Mat& row) {
    for (std::size_t i = 0; i < m.rows(); ++i)
        kernels::axpy(1.0, row.data(), m.row(i), m.cols());
}

Mat colsum(const Mat& m) {
    Mat s(1, m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        kernels::axpy(1.0, m.row(i), s.data(), m.cols());
    return s;
}
}  // namespace

void MlpGrads::init_like(const Mlp& m) {
    dw1 = Mat(m.w1.rows(), m.w1.cols());
    db1 = Mat(1, m.b1.cols());
    dw2 = Mat(m.w2.rows(), m.w2.cols());
    db2 = Mat(1, m.b2.cols());
}

void MlpGrads::add(const MlpGrads& o) {
    add_inplace(dw1, o.dw1);
    add_inplace(db1, o.db1);
    add_inplace(dw2, o.dw2);
    add_inplace(db2, o.db2);
}

Mat mlp_forward(const Mlp& m, const Mat& x, MlpCache* cache) {
    if (x.cols() != m.w1.rows())
        throw ParamError("mlp_forward: input dim " + std::to_string(x.cols()) +
                         " != " + std::to_string(m.w1.rows()));
    Mat h = matmul(x, m.w1);
    add_row_broadcast(h, m.b1);
    if (m.act == Activation::Tanh) {
        for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] = std::tanh(h.data()[i]);
    }
    Mat y = matmul(h, m.w2);
    add_row_broadcast(y, m.b2);
    if (cache) {
        cache->x = x;
        cache->h = h;
    }
    return y;
}

Mat mlp_backward(const Mlp& m, const MlpCache& cache, const Mat& dy, MlpGrads& grads) {
    if (grads.dw1.empty()) grads.init_like(m);
    add_inplace(grads.dw2, matmul_tn(cache.h, dy));
    add_inplace(grads.db2, colsum(dy));

    Mat dh = matmul_nt(dy, m.w2);
    if (m.act == Activation::Tanh) {
        for (std::size_t i = 0; i < dh.size(); ++i) {
            const double h = cache.h.data()[i];
            dh.data()[i] *= (1.0 - h * h);
        }
    }
    add_inplace(grads.dw1, matmul_tn(cache.x, dh));
    add_inplace(grads.db1, colsum(dh));
    return matmul_nt(dh, m.w1);
}

EncoderSet init_encoders(const EncoderDims& dims, std::uint64_t seed) {
    if (dims.d_in_c < 1 || dims.d_in_l < 1 || dims.d_h < 1 || dims.d_sp < 1 ||
        dims.d_sh < 1)
        throw ParamError("init_encoders: dims must be >= 1");
    if (dims.d_sp != dims.d_sh)
        throw ParamError("init_encoders: d_sp must equal d_sh (per-row cosine "
                         "between specific and shared requires equal dims)");
    Rng rng(seed);
    EncoderSet enc;
    enc.sp_c = make_mlp(dims.d_in_c, dims.d_h, dims.d_sp, rng);
    enc.sh_c = make_mlp(dims.d_in_c, dims.d_h, dims.d_sh, rng);
    enc.sp_l = make_mlp(dims.d_in_l, dims.d_h, dims.d_sp, rng);
    enc.sh_l = make_mlp(dims.d_in_l, dims.d_h, dims.d_sh, rng);
    enc.dims = dims;
    return enc;
}

DisentangledReps encode(const EncoderSet& enc, const Mat& e_c, const Mat& e_l,
                        EncodeCache* cache) {
    if (e_c.rows() != e_l.rows())
        throw ParamError("encode: row count mismatch between modalities");
    DisentangledReps reps;
    reps.e_sp_c = mlp_forward(enc.sp_c, e_c, cache ? &cache->sp_c : nullptr);
    reps.e_sh_c = mlp_forward(enc.sh_c, e_c, cache ? &cache->sh_c : nullptr);
    reps.e_sp_l = mlp_forward(enc.sp_l, e_l, cache ? &cache->sp_l : nullptr);
    reps.e_sh_l = mlp_forward(enc.sh_l, e_l, cache ? &cache->sh_l : nullptr);
    return reps;
}

namespace {

// Adds (1/n) * sum_i cos^2(a_i, b_i) and its gradients.
double cos_sq_mean(const Mat& a, const Mat& b, Mat& da, Mat& db) {
    const std::size_t n = a.rows();
    const std::size_t d = a.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a.row(i);
        const double* bi = b.row(i);
        const double na = std::sqrt(kernels::dot(ai, ai, d));
        const double nb = std::sqrt(kernels::dot(bi, bi, d));
        if (na < kNormEps || nb < kNormEps) continue;
        const double c = kernels::dot(ai, bi, d) / (na * nb);
        acc += c * c * inv_n;
        const double k = 2.0 * c * inv_n;
        double* dai = da.row(i);
        double* dbi = db.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            dai[j] += k * (bi[j] / (na * nb) - c * ai[j] / (na * na));
            dbi[j] += k * (ai[j] / (na * nb) - c * bi[j] / (nb * nb));
        }
    }
    return acc;
}

}  // namespace

OrthoResult orthogonality_loss(const DisentangledReps& reps) {
    if (reps.e_sp_c.cols() != reps.e_sh_c.cols() ||
        reps.e_sp_l.cols() != reps.e_sh_l.cols())
        throw ParamError("orthogonality_loss: specific/shared dims differ");
    OrthoResult res;
    res.d_sp_c = Mat(reps.e_sp_c.rows(), reps.e_sp_c.cols());
    res.d_sh_c = Mat(reps.e_sh_c.rows(), reps.e_sh_c.cols());
    res.d_sp_l = Mat(reps.e_sp_l.rows(), reps.e_sp_l.cols());
    res.d_sh_l = Mat(reps.e_sh_l.rows(), reps.e_sh_l.cols());
    res.value = cos_sq_mean(reps.e_sp_l, reps.e_sh_l, res.d_sp_l, res.d_sh_l) +
                cos_sq_mean(reps.e_sp_c, reps.e_sh_c, res.d_sp_c, res.d_sh_c);
    return res;
}

Mat normalize_rows(const Mat& m, std::size_t* zero_rows) {
    Mat out = m;
    std::size_t guarded = 0;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double norm = row_norm(m, i);
        if (norm < kNormEps) {
            ++guarded;
            std::memset(out.row(i), 0, m.cols() * sizeof(double));
            continue;
        }
        kernels::scal(1.0 / norm, out.row(i), m.cols());
    }
    if (zero_rows) *zero_rows = guarded;
    return out;
}

namespace {

// One side of the uniformity loss over the sampled rows of x.
double uniformity_side(const Mat& x, const std::vector<std::uint32_t>& idx, Mat& dx) {
    const std::size_t m = idx.size();
    const std::size_t d = x.cols();
    const std::size_t n_pairs = m * (m - 1) / 2;

    // Normalized sample block plus the norms needed to push gradients back.
    Mat y(m, d);
    std::vector<double> norms(m);
    for (std::size_t a = 0; a < m; ++a) {
        const double* row = x.row(idx[a]);
        const double norm = std::sqrt(kernels::dot(row, row, d));
        norms[a] = norm;
        if (norm >= kNormEps) {
            std::memcpy(y.row(a), row, d * sizeof(double));
            kernels::scal(1.0 / norm, y.row(a), d);
        }
    }

    std::vector<double> weights(n_pairs);
    double mean = 0.0;
    std::size_t p = 0;
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a + 1; b < m; ++b, ++p) {
            weights[p] = std::exp(-2.0 * kernels::sq_dist(y.row(a), y.row(b), d));
            mean += weights[p];
        }
    }
    mean /= static_cast<double>(n_pairs);
    const double value = std::log(mean);

    // d value / d d2_ab = -2 w_ab / (P * mean)
    Mat dy(m, d);
    const double scale = -2.0 / (static_cast<double>(n_pairs) * mean);
    p = 0;
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a + 1; b < m; ++b, ++p) {
            const double g = scale * weights[p] * 2.0;  // times d d2/dy
            const double* ya = y.row(a);
            const double* yb = y.row(b);
            double* da = dy.row(a);
            double* db = dy.row(b);
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = ya[k] - yb[k];
                da[k] += g * diff;
                db[k] -= g * diff;
            }
        }
    }

    // Through the normalization: dx = (dy - (dy.y) y) / ||x||
    for (std::size_t a = 0; a < m; ++a) {
        if (norms[a] < kNormEps) continue;  // zero row: zero gradient
        const double* ya = y.row(a);
        const double* da = dy.row(a);
        const double proj = kernels::dot(da, ya, d);
        double* out = dx.row(idx[a]);
        for (std::size_t k = 0; k < d; ++k)
            out[k] += (da[k] - proj * ya[k]) / norms[a];
    }
    return value;
}

}  // namespace

UniformityResult uniformity_loss(const DisentangledReps& reps,
                                 const std::vector<std::uint32_t>& sample_idx) {
    if (sample_idx.size() < 2)
        throw ParamError("uniformity_loss: need at least 2 sampled rows");
    UniformityResult res;
    res.d_sp_c = Mat(reps.e_sp_c.rows(), reps.e_sp_c.cols());
    res.d_sp_l = Mat(reps.e_sp_l.rows(), reps.e_sp_l.cols());
    res.value_c = uniformity_side(reps.e_sp_c, sample_idx, res.d_sp_c);
    res.value_l = uniformity_side(reps.e_sp_l, sample_idx, res.d_sp_l);
    res.value = res.value_c + res.value_l;
    return res;
}

}  // namespace darec
