#include "darec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "darec/kernels.hpp"

namespace darec {

std::vector<std::uint32_t> rank_items(const Mat& embeddings, std::uint32_t n_users,
                                      std::uint32_t n_items, std::uint32_t user,
                                      const std::vector<std::uint32_t>& train_items) {
    std::vector<std::uint32_t> candidates;
    candidates.reserve(n_items);
    for (std::uint32_t i = 0; i < n_items; ++i) {
        if (!std::binary_search(train_items.begin(), train_items.end(), i))
            candidates.push_back(i);
    }
    std::vector<double> s(candidates.size());
    const double* eu = embeddings.row(user);
    for (std::size_t k = 0; k < candidates.size(); ++k)
        s[k] = kernels::dot(eu, embeddings.row(n_users + candidates[k]),
                            embeddings.cols());
    std::vector<std::uint32_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return candidates[a] < candidates[b];
    });
    std::vector<std::uint32_t> ranking(candidates.size());
    for (std::size_t k = 0; k < order.size(); ++k) ranking[k] = candidates[order[k]];
    return ranking;
}

double recall_at_k(const std::vector<std::uint32_t>& ranking,
                   const std::vector<std::uint32_t>& test_items, std::uint32_t k) {
    if (test_items.empty()) throw ParamError("recall_at_k: empty test set");
    std::size_t hits = 0;
    const std::size_t top = std::min<std::size_t>(k, ranking.size());
    for (std::size_t p = 0; p < top; ++p)
        if (std::binary_search(test_items.begin(), test_items.end(), ranking[p]))
            ++hits;
    return static_cast<double>(hits) / static_cast<double>(test_items.size());
}

double ndcg_at_k(const std::vector<std::uint32_t>& ranking,
                 const std::vector<std::uint32_t>& test_items, std::uint32_t k) {
    if (test_items.empty()) throw ParamError("ndcg_at_k: empty test set");
    double dcg = 0.0;
    const std::size_t top = std::min<std::size_t>(k, ranking.size());
    for (std::size_t p = 0; p < top; ++p) {
        if (std::binary_search(test_items.begin(), test_items.end(), ranking[p]))
            dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
    }
    double idcg = 0.0;
    const std::size_t ideal = std::min<std::size_t>(k, test_items.size());
    for (std::size_t p = 0; p < ideal; ++p)
        idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
    return dcg / idcg;
}

MetricsReport evaluate(const Mat& embeddings, const SplitDataset& split,
                       EvalSplit which, const std::vector<std::uint32_t>& ks) {
    const std::uint32_t n_users = split.base.n_users;
    const std::uint32_t n_items = split.base.n_items;

    std::vector<std::vector<std::uint32_t>> train_items(n_users), eval_items(n_users);
    for (const std::uint32_t idx : split.train) {
        const auto& t = split.base.interactions[idx];
        train_items[t.user].push_back(t.item);
    }
    const auto& eval_set = which == EvalSplit::Val ? split.val : split.test;
    for (const std::uint32_t idx : eval_set) {
        const auto& t = split.base.interactions[idx];
        eval_items[t.user].push_back(t.item);
    }
    for (auto& v : train_items) std::sort(v.begin(), v.end());
    for (auto& v : eval_items) std::sort(v.begin(), v.end());

    std::map<std::uint32_t, std::vector<double>> recall_vals, ndcg_vals;
    std::uint32_t n_eval = 0;
    for (std::uint32_t u = 0; u < n_users; ++u) {
        if (eval_items[u].empty()) continue;
        ++n_eval;
        const auto ranking = rank_items(embeddings, n_users, n_items, u, train_items[u]);
        for (const std::uint32_t k : ks) {
            recall_vals[k].push_back(recall_at_k(ranking, eval_items[u], k));
            ndcg_vals[k].push_back(ndcg_at_k(ranking, eval_items[u], k));
        }
    }
    if (n_eval == 0) throw ParamError("evaluate: no users with a nonempty eval set");

    // Sorted accumulation keeps the reduction independent of user order.
    MetricsReport rep;
    rep.n_eval_users = n_eval;
    for (const std::uint32_t k : ks) {
        auto& rv = recall_vals[k];
        auto& nv = ndcg_vals[k];
        std::sort(rv.begin(), rv.end());
        std::sort(nv.begin(), nv.end());
        double rsum = 0.0, nsum = 0.0;
        for (const double v : rv) rsum += v;
        for (const double v : nv) nsum += v;
        rep.recall_at[k] = rsum / n_eval;
        rep.ndcg_at[k] = nsum / n_eval;
    }
    return rep;
}

namespace {

SweepEntry run_variant(const TrainConfig& cfg, const std::string& variant, double x,
                       std::uint64_t seed, const SplitDataset& split,
                       const EmbeddingMatrix& e_l_user, const EmbeddingMatrix& e_l_item,
                       const std::vector<std::uint32_t>& ks) {
    TrainConfig c = cfg;
    c.seed = seed;
    const TrainedState st = train(split, e_l_user, e_l_item, c);
    SweepEntry e;
    e.variant = variant;
    e.x = x;
    e.seed = seed;
    e.metrics = evaluate(st.enhanced, split, EvalSplit::Val, ks);
    return e;
}

}  // namespace

SweepReport run_ablation(const TrainConfig& base_cfg, const SplitDataset& split,
                         const EmbeddingMatrix& e_l_user,
                         const EmbeddingMatrix& e_l_item,
                         const std::vector<std::uint64_t>& seeds,
                         const std::vector<std::uint32_t>& ks) {
    SweepReport rep;
    rep.seeds = seeds;
    for (const std::uint64_t seed : seeds) {
        {
            TrainConfig c = base_cfg;
            rep.entries.push_back(
                run_variant(c, "full", 0.0, seed, split, e_l_user, e_l_item, ks));
        }
        for (const char* name : {"wo_or", "wo_uni", "wo_glo", "wo_loc"}) {
            TrainConfig c = base_cfg;
            if (std::string(name) == "wo_or") c.use_or = false;
            if (std::string(name) == "wo_uni") c.use_uni = false;
            if (std::string(name) == "wo_glo") c.use_glo = false;
            if (std::string(name) == "wo_loc") c.use_loc = false;
            rep.entries.push_back(
                run_variant(c, name, 0.0, seed, split, e_l_user, e_l_item, ks));
        }
    }
    return rep;
}

SweepReport run_sensitivity(const TrainConfig& base_cfg, const std::string& param,
                            const std::vector<double>& values,
                            const SplitDataset& split,
                            const EmbeddingMatrix& e_l_user,
                            const EmbeddingMatrix& e_l_item,
                            const std::vector<std::uint64_t>& seeds,
                            const std::vector<std::uint32_t>& ks) {
    if (param != "K" && param != "lambda" && param != "n_hat")
        throw ParamError("run_sensitivity: param must be K, lambda or n_hat");
    SweepReport rep;
    rep.seeds = seeds;
    char label[64];
    for (const double v : values) {
        for (const std::uint64_t seed : seeds) {
            TrainConfig c = base_cfg;
            if (param == "K") c.K = static_cast<std::uint32_t>(v);
            else if (param == "lambda") c.lambda = v;
            else c.n_hat = static_cast<std::uint32_t>(v);
            std::snprintf(label, sizeof(label), "%s=%.6g", param.c_str(), v);
            rep.entries.push_back(
                run_variant(c, label, v, seed, split, e_l_user, e_l_item, ks));
        }
    }
    return rep;
}

double mean_metric(const SweepReport& report, const std::string& variant,
                   std::uint32_t k, bool ndcg) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& e : report.entries) {
        if (e.variant != variant) continue;
        sum += ndcg ? e.metrics.ndcg_at.at(k) : e.metrics.recall_at.at(k);
        ++n;
    }
    if (n == 0) throw ParamError("mean_metric: unknown variant " + variant);
    return sum / static_cast<double>(n);
}

std::string sweep_to_csv(const SweepReport& report) {
    std::string out = "variant,seed,K,recall,ndcg\n";
    char buf[192];
    for (const auto& e : report.entries) {
        for (const auto& [k, r] : e.metrics.recall_at) {
            std::snprintf(buf, sizeof(buf), "%s,%llu,%u,%.12g,%.12g\n",
                          e.variant.c_str(),
                          static_cast<unsigned long long>(e.seed), k, r,
                          e.metrics.ndcg_at.at(k));
            out += buf;
        }
    }
    return out;
}

std::string sweep_plot_csv(const SweepReport& report, std::uint32_t k) {
    // Preserve first-appearance order of grid values.
    std::vector<double> xs;
    for (const auto& e : report.entries) {
        if (std::find(xs.begin(), xs.end(), e.x) == xs.end()) xs.push_back(e.x);
    }
    std::string out = "x,mean,stderr\n";
    char buf[128];
    for (const double x : xs) {
        std::vector<double> vals;
        for (const auto& e : report.entries)
            if (e.x == x) vals.push_back(e.metrics.recall_at.at(k));
        double mean = 0.0;
        for (const double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (const double v : vals) var += (v - mean) * (v - mean);
        const double stderr_v =
            vals.size() > 1 ? std::sqrt(var / (vals.size() - 1.0) / vals.size()) : 0.0;
        std::snprintf(buf, sizeof(buf), "%.6g,%.12g,%.12g\n", x, mean, stderr_v);
        out += buf;
    }
    return out;
}

std::string metrics_to_csv(const MetricsReport& report, const std::string& variant,
                           std::uint64_t seed) {
    std::string out = "variant,seed,K,recall,ndcg\n";
    char buf[192];
    for (const auto& [k, r] : report.recall_at) {
        std::snprintf(buf, sizeof(buf), "%s,%llu,%u,%.12g,%.12g\n", variant.c_str(),
                      static_cast<unsigned long long>(seed), k, r,
                      report.ndcg_at.at(k));
        out += buf;
    }
    return out;
}

}  // namespace darec
