#pragma once

#include <cstdint>
#include <vector>

#include "darec/dataio.hpp"
#include "darec/matrix.hpp"
#include "darec/rng.hpp"

namespace darec {

struct BackboneModel {
    Mat user_emb;  // N_U x d
    Mat item_emb;  // N_I x d
    std::uint32_t n_layers = 0;  // 0 = pure MF
    std::uint32_t d = 0;
};

// Undirected user-item graph from the train split. Neighbor lists are stored
// in insertion order; degrees are the list sizes.
struct BipartiteGraph {
    std::uint32_t n_users = 0;
    std::uint32_t n_items = 0;
    std::vector<std::vector<std::uint32_t>> user_items;
    std::vector<std::vector<std::uint32_t>> item_users;
};

struct BprBatch {
    struct Triple {
        std::uint32_t user, pos_item, neg_item;
    };
    std::vector<Triple> triples;
};

struct BprResult {
    double loss = 0.0;
    Mat d_propagated;  // gradient w.r.t. the propagated (N_U+N_I) x d matrix
    Mat d_base;        // l2-term gradient w.r.t. stacked base embeddings
};

BackboneModel init_backbone(std::uint32_t n_users, std::uint32_t n_items,
                            std::uint32_t d, std::uint32_t n_layers,
                            std::uint64_t seed);

BipartiteGraph build_graph(const SplitDataset& split);

// Symmetric-normalized propagation averaged over layers 0..n_layers, applied
// to any stacked (N_U+N_I) x d matrix. The operator is symmetric, so it is
// its own adjoint; backward passes reuse it directly.
Mat propagate_matrix(const Mat& stacked, const BipartiteGraph& graph,
                     std::uint32_t n_layers);
Mat propagate(const BackboneModel& model, const BipartiteGraph& graph);

Mat stacked_base(const BackboneModel& model);

std::vector<double> score(const Mat& embeddings, std::uint32_t n_users,
                          std::uint32_t user, const std::vector<std::uint32_t>& items);

BprBatch sample_bpr_batch(const SplitDataset& split, std::size_t batch, Rng& rng);

// loss = mean_t -log sigma(s_u,pos - s_u,neg) + l2 * mean squared norm of the
// touched base rows (3 per triple, duplicates counted per occurrence).
BprResult bpr_loss(const Mat& propagated, const Mat& base, std::uint32_t n_users,
                   const BprBatch& batch, double l2);

}  // namespace darec
