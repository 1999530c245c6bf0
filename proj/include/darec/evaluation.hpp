#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "darec/dataio.hpp"
#include "darec/matrix.hpp"
#include "darec/training.hpp"

namespace darec {

struct MetricsReport {
    std::map<std::uint32_t, double> recall_at;
    std::map<std::uint32_t, double> ndcg_at;
    std::uint32_t n_eval_users = 0;
};

enum class EvalSplit { Val, Test };

// All items not in train_items (sorted ascending ids), by descending
// dot-product score; ties by ascending item id.
std::vector<std::uint32_t> rank_items(const Mat& embeddings, std::uint32_t n_users,
                                      std::uint32_t n_items, std::uint32_t user,
                                      const std::vector<std::uint32_t>& train_items);

double recall_at_k(const std::vector<std::uint32_t>& ranking,
                   const std::vector<std::uint32_t>& test_items, std::uint32_t k);

double ndcg_at_k(const std::vector<std::uint32_t>& ranking,
                 const std::vector<std::uint32_t>& test_items, std::uint32_t k);

// Mean per-user metrics over users with a nonempty eval set. Per-user values
// are accumulated in sorted order so the result does not depend on user
// processing order.
MetricsReport evaluate(const Mat& embeddings, const SplitDataset& split,
                       EvalSplit which, const std::vector<std::uint32_t>& ks);

struct SweepEntry {
    std::string variant;
    double x = 0.0;  // numeric grid value where applicable
    std::uint64_t seed = 0;
    MetricsReport metrics;
};

struct SweepReport {
    std::vector<SweepEntry> entries;
    std::vector<std::uint64_t> seeds;
};

// Full model plus the four single-term removals, trained per seed, evaluated
// on the validation split.
SweepReport run_ablation(const TrainConfig& base_cfg, const SplitDataset& split,
                         const EmbeddingMatrix& e_l_user,
                         const EmbeddingMatrix& e_l_item,
                         const std::vector<std::uint64_t>& seeds,
                         const std::vector<std::uint32_t>& ks);

// One training run per grid value per seed. param must be K, lambda or n_hat.
SweepReport run_sensitivity(const TrainConfig& base_cfg, const std::string& param,
                            const std::vector<double>& values,
                            const SplitDataset& split,
                            const EmbeddingMatrix& e_l_user,
                            const EmbeddingMatrix& e_l_item,
                            const std::vector<std::uint64_t>& seeds,
                            const std::vector<std::uint32_t>& ks);

double mean_metric(const SweepReport& report, const std::string& variant,
                   std::uint32_t k, bool ndcg = false);

// CSV `variant,seed,K,recall,ndcg`
std::string sweep_to_csv(const SweepReport& report);
// CSV `x,mean,stderr` of Recall@k per grid value
std::string sweep_plot_csv(const SweepReport& report, std::uint32_t k);

std::string metrics_to_csv(const MetricsReport& report, const std::string& variant,
                           std::uint64_t seed);

}  // namespace darec
