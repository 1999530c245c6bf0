#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "darec/matrix.hpp"

namespace darec {

// S = X X^T over the sampled rows; symmetric by construction.
Mat global_similarity(const Mat& e_sh, const std::vector<std::uint32_t>& sample_idx);

struct GlobalResult {
    double value = 0.0;
    Mat d_sh_c, d_sh_l;  // full-size gradients, nonzero only at sampled rows
};

// Mean-over-entries squared Frobenius gap between the two Gram matrices of
// the sampled shared rows. The same index set must be applied to both sides.
GlobalResult global_loss(const Mat& e_sh_c, const Mat& e_sh_l,
                         const std::vector<std::uint32_t>& sample_idx);

struct PreferenceCenters {
    Mat centers;  // K x d, centers[k] = mean of rows assigned to k
    std::vector<std::uint32_t> assignment;
    double inertia = 0.0;
    std::vector<double> inertia_history;  // assign-step inertia of the best restart
    bool converged = false;
};

// Lloyd's algorithm with k-means++ seeding, best of n_init restarts by
// inertia. Empty clusters are repaired by stealing the point farthest from
// its center. On convergence the assignment is also 1-nearest-center.
PreferenceCenters kmeans(const Mat& e_sh, std::uint32_t k, std::uint32_t max_iter,
                         std::uint32_t n_init, std::uint64_t seed);

struct CenterMatching {
    std::vector<std::uint32_t> perm;  // perm[i] = index into c_l matched to c_c row i
};

// Greedy smallest-distance-first bijection: repeatedly take the closest
// unmarked (i, j) pair, ties broken by lexicographically smallest (i, j).
CenterMatching match_centers(const Mat& c_c, const Mat& c_l);

struct LocalResult {
    double value = 0.0;
    Mat d_c_c, d_c_l;  // K x d gradients w.r.t. the (unpermuted) center matrices
};

// Cosine similarity matrix between matched centers: diagonal pulled to 1,
// off-diagonal pushed to 0. K = 1 has no off-diagonal term.
LocalResult local_loss(const Mat& c_c, const Mat& c_l, const CenterMatching& matching);

// Means of rows per cluster under a fixed assignment (the differentiable part
// of the clustering path).
Mat centers_from_assignment(const Mat& e_sh, const std::vector<std::uint32_t>& assignment,
                            std::uint32_t k, std::vector<std::uint32_t>* counts = nullptr);

// Pushes center gradients back through the mean: d_e[r] = d_centers[a_r]/|cluster a_r|.
Mat scatter_center_grads(const Mat& d_centers,
                         const std::vector<std::uint32_t>& assignment,
                         const std::vector<std::uint32_t>& counts);

// Diagnostic dump for offline inspection: one `center,<k>,<coords...>` row per
// center followed by `assign,<row>,<k>` rows.
std::string centers_to_csv(const PreferenceCenters& pc);

}  // namespace darec
