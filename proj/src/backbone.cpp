#include "darec/backbone.hpp"

#include <cmath>
#include <cstring>
#include <set>
#include <stdexcept>

#include "darec/kernels.hpp"

namespace darec {

BackboneModel init_backbone(std::uint32_t n_users, std::uint32_t n_items,
                            std::uint32_t d, std::uint32_t n_layers,
                            std::uint64_t seed) {
    if (n_users < 1 || n_items < 1 || d < 1)
        throw ParamError("init_backbone: counts must be >= 1");
    Rng rng(seed);
    BackboneModel m;
    m.user_emb = Mat::gaussian(n_users, d, 0.0, 0.1, rng);
    m.item_emb = Mat::gaussian(n_items, d, 0.0, 0.1, rng);
    m.n_layers = n_layers;
    m.d = d;
    return m;
}

BipartiteGraph build_graph(const SplitDataset& split) {
    BipartiteGraph g;
    g.n_users = split.base.n_users;
    g.n_items = split.base.n_items;
    g.user_items.resize(g.n_users);
    g.item_users.resize(g.n_items);
    for (const std::uint32_t idx : split.train) {
        const auto& t = split.base.interactions[idx];
        g.user_items[t.user].push_back(t.item);
        g.item_users[t.item].push_back(t.user);
    }
    return g;
}

Mat stacked_base(const BackboneModel& model) {
    return vstack(model.user_emb, model.item_emb);
}

Mat propagate_matrix(const Mat& stacked, const BipartiteGraph& graph,
                     std::uint32_t n_layers) {
    const std::size_t n_users = graph.n_users;
    const std::size_t n = stacked.rows();
    const std::size_t d = stacked.cols();

    Mat out = stacked;
    if (n_layers == 0) return out;
    scale_inplace(out, 1.0 / (n_layers + 1.0));

    Mat cur = stacked;
    Mat next(n, d);
    for (std::uint32_t layer = 1; layer <= n_layers; ++layer) {
        next.set_zero();
        for (std::size_t u = 0; u < graph.user_items.size(); ++u) {
            const double du = static_cast<double>(graph.user_items[u].size());
            if (du == 0) continue;
            double* dst = next.row(u);
            for (const std::uint32_t i : graph.user_items[u]) {
                const double di = static_cast<double>(graph.item_users[i].size());
                kernels::axpy(1.0 / std::sqrt(du * di), cur.row(n_users + i), dst, d);
            }
        }
        for (std::size_t i = 0; i < graph.item_users.size(); ++i) {
            const double di = static_cast<double>(graph.item_users[i].size());
            if (di == 0) continue;
            double* dst = next.row(n_users + i);
            for (const std::uint32_t u : graph.item_users[i]) {
                const double du = static_cast<double>(graph.user_items[u].size());
                kernels::axpy(1.0 / std::sqrt(du * di), cur.row(u), dst, d);
            }
        }
        add_scaled_inplace(out, next, 1.0 / (n_layers + 1.0));
        std::swap(cur, next);
    }
    return out;
}

Mat propagate(const BackboneModel& model, const BipartiteGraph& graph) {
    return propagate_matrix(stacked_base(model), graph, model.n_layers);
}

std::vector<double> score(const Mat& embeddings, std::uint32_t n_users,
                          std::uint32_t user, const std::vector<std::uint32_t>& items) {
    std::vector<double> out(items.size());
    const double* eu = embeddings.row(user);
    for (std::size_t k = 0; k < items.size(); ++k)
        out[k] = kernels::dot(eu, embeddings.row(n_users + items[k]), embeddings.cols());
    return out;
}

BprBatch sample_bpr_batch(const SplitDataset& split, std::size_t batch, Rng& rng) {
    if (split.train.empty()) throw ParamError("sample_bpr_batch: empty train split");
    const std::uint32_t n_items = split.base.n_items;

    std::vector<std::set<std::uint32_t>> train_items(split.base.n_users);
    for (const std::uint32_t idx : split.train) {
        const auto& t = split.base.interactions[idx];
        train_items[t.user].insert(t.item);
    }

    BprBatch out;
    out.triples.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::uint32_t pick =
            split.train[static_cast<std::size_t>(rng.uniform_int(split.train.size()))];
        const auto& t = split.base.interactions[pick];
        std::uint32_t neg = 0;
        bool found = false;
        for (std::uint32_t tries = 0; tries < n_items; ++tries) {
            neg = static_cast<std::uint32_t>(rng.uniform_int(n_items));
            if (!train_items[t.user].count(neg)) {
                found = true;
                break;
            }
        }
        if (!found) {
            if (train_items[t.user].size() >= n_items)
                throw std::runtime_error(
                    "sample_bpr_batch: user " + std::to_string(t.user) +
                    " interacts with every item; no negative exists (gave up after " +
                    std::to_string(n_items) + " retries)");
            while (train_items[t.user].count(
                neg = static_cast<std::uint32_t>(rng.uniform_int(n_items)))) {
            }
        }
        out.triples.push_back({t.user, t.item, neg});
    }
    return out;
}

BprResult bpr_loss(const Mat& propagated, const Mat& base, std::uint32_t n_users,
                   const BprBatch& batch, double l2) {
    if (batch.triples.empty()) throw ParamError("bpr_loss: empty batch");
    const std::size_t d = propagated.cols();
    const double inv_b = 1.0 / static_cast<double>(batch.triples.size());

    BprResult res;
    res.d_propagated = Mat(propagated.rows(), d);
    res.d_base = Mat(base.rows(), d);

    double rank_loss = 0.0;
    double reg = 0.0;
    const double inv_touched = inv_b / 3.0;
    for (const auto& t : batch.triples) {
        const double* eu = propagated.row(t.user);
        const double* ei = propagated.row(n_users + t.pos_item);
        const double* ej = propagated.row(n_users + t.neg_item);
        const double x = kernels::dot(eu, ei, d) - kernels::dot(eu, ej, d);

        // -log sigma(x) = softplus(-x), stable on both tails
        rank_loss += (x > 0) ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
        const double sig = 1.0 / (1.0 + std::exp(-x));
        const double dx = (sig - 1.0) * inv_b;  // d(-log sigma)/dx averaged

        double* gu = res.d_propagated.row(t.user);
        double* gi = res.d_propagated.row(n_users + t.pos_item);
        double* gj = res.d_propagated.row(n_users + t.neg_item);
        for (std::size_t k = 0; k < d; ++k) {
            gu[k] += dx * (ei[k] - ej[k]);
            gi[k] += dx * eu[k];
            gj[k] -= dx * eu[k];
        }

        if (l2 > 0.0) {
            const std::size_t rows[3] = {t.user, n_users + t.pos_item,
                                         n_users + t.neg_item};
            for (const std::size_t r : rows) {
                const double* br = base.row(r);
                reg += kernels::dot(br, br, d) * inv_touched;
                kernels::axpy(2.0 * l2 * inv_touched, br, res.d_base.row(r), d);
            }
        }
    }

    res.loss = rank_loss * inv_b + l2 * reg;
    return res;
}

}  // namespace darec
