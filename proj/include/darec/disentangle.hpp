#pragma once

#include <cstdint>
#include <vector>

#include "darec/matrix.hpp"
#include "darec/rng.hpp"

namespace darec {

enum class Activation { Tanh, Identity };

// One-hidden-layer feed-forward network, row vectors in, row vectors out.
struct Mlp {
    Mat w1;  // d_in x d_h
    Mat b1;  // 1 x d_h
    Mat w2;  // d_h x d_out
    Mat b2;  // 1 x d_out
    Activation act = Activation::Tanh;
};

struct MlpCache {
    Mat x;  // input copy
    Mat h;  // post-activation hidden
};

struct MlpGrads {
    Mat dw1, db1, dw2, db2;
    void init_like(const Mlp& m);
    void add(const MlpGrads& o);
};

Mat mlp_forward(const Mlp& m, const Mat& x, MlpCache* cache = nullptr);
// Returns dX and accumulates parameter gradients into `grads`.
Mat mlp_backward(const Mlp& m, const MlpCache& cache, const Mat& dy, MlpGrads& grads);

struct EncoderDims {
    std::uint32_t d_in_c = 0;
    std::uint32_t d_in_l = 0;
    std::uint32_t d_h = 0;
    std::uint32_t d_sp = 0;
    std::uint32_t d_sh = 0;
};

struct EncoderSet {
    Mlp sp_c, sh_c, sp_l, sh_l;
    EncoderDims dims;
};

struct DisentangledReps {
    Mat e_sp_c, e_sh_c, e_sp_l, e_sh_l;  // N rows each, users first
};

struct EncodeCache {
    MlpCache sp_c, sh_c, sp_l, sh_l;
};

// Xavier-uniform weights, zero biases, tanh hidden activation.
EncoderSet init_encoders(const EncoderDims& dims, std::uint64_t seed);

DisentangledReps encode(const EncoderSet& enc, const Mat& e_c, const Mat& e_l,
                        EncodeCache* cache = nullptr);

struct OrthoResult {
    double value = 0.0;
    Mat d_sp_c, d_sh_c, d_sp_l, d_sh_l;
};

// Mean squared per-row cosine between specific and shared rows, both sides.
// Rows with norm below 1e-12 contribute zero with zero gradient.
OrthoResult orthogonality_loss(const DisentangledReps& reps);

// Row-wise Euclidean normalization; zero rows stay zero. `zero_rows`, when
// given, receives the count of guarded rows.
Mat normalize_rows(const Mat& m, std::size_t* zero_rows = nullptr);

struct UniformityResult {
    double value = 0.0;  // u_C + u_L
    double value_c = 0.0;
    double value_l = 0.0;
    Mat d_sp_c, d_sp_l;
};

// Log of the mean pairwise Gaussian potential exp(-2*||G(x)-G(y)||^2) over
// unordered pairs inside sample_idx, per side, summed.
UniformityResult uniformity_loss(const DisentangledReps& reps,
                                 const std::vector<std::uint32_t>& sample_idx);

}  // namespace darec
