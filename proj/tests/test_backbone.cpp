#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "darec/backbone.hpp"
#include "darec/kernels.hpp"
#include "darec/training.hpp"

using namespace darec;

namespace {

SplitDataset make_split(std::uint32_t n_users, std::uint32_t n_items,
                        const std::vector<std::pair<std::uint32_t, std::uint32_t>>& edges) {
    Dataset ds;
    ds.n_users = n_users;
    ds.n_items = n_items;
    for (const auto& [u, i] : edges) ds.interactions.push_back({u, i, 5.0, {}});
    SplitDataset s;
    s.base = ds;
    s.train.resize(edges.size());
    for (std::uint32_t k = 0; k < edges.size(); ++k) s.train[k] = k;
    return s;
}

// Dense normalized adjacency for the oracle path.
Mat dense_norm_adjacency(const BipartiteGraph& g) {
    const std::size_t n = g.n_users + g.n_items;
    Mat a(n, n);
    for (std::uint32_t u = 0; u < g.n_users; ++u) {
        for (const std::uint32_t i : g.user_items[u]) {
            const double w = 1.0 / std::sqrt(static_cast<double>(g.user_items[u].size()) *
                                             g.item_users[i].size());
            a(u, g.n_users + i) = w;
            a(g.n_users + i, u) = w;
        }
    }
    return a;
}

}  // namespace

TEST_CASE("init_backbone determinism and entry statistics") {
    const BackboneModel a = init_backbone(10, 5, 4, 0, 77);
    const BackboneModel b = init_backbone(10, 5, 4, 0, 77);
    CHECK(a.user_emb == b.user_emb);
    CHECK(a.item_emb == b.item_emb);

    const BackboneModel big = init_backbone(1000, 1, 32, 0, 3);
    double mean = 0.0;
    for (std::size_t i = 0; i < big.user_emb.size(); ++i)
        mean += big.user_emb.data()[i];
    mean /= static_cast<double>(big.user_emb.size());
    CHECK(mean >= -0.02);
    CHECK(mean <= 0.02);
}

TEST_CASE("propagate with zero layers is the identity on stacked embeddings") {
    const auto split = make_split(3, 2, {{0, 0}, {1, 1}, {2, 0}});
    const BipartiteGraph g = build_graph(split);
    const BackboneModel m = init_backbone(3, 2, 4, 0, 1);
    const Mat out = propagate(m, g);
    CHECK(max_abs_diff(out, stacked_base(m)) == 0.0);
}

TEST_CASE("single-edge hand propagation") {
    const auto split = make_split(1, 1, {{0, 0}});
    const BipartiteGraph g = build_graph(split);
    BackboneModel m;
    m.n_layers = 1;
    m.d = 2;
    m.user_emb = Mat(1, 2);
    m.item_emb = Mat(1, 2);
    m.user_emb(0, 0) = 1.0;
    m.item_emb(0, 1) = 1.0;
    const Mat out = propagate(m, g);
    CHECK(out(0, 0) == doctest::Approx(0.5));
    CHECK(out(0, 1) == doctest::Approx(0.5));
    CHECK(out(1, 0) == doctest::Approx(0.5));
    CHECK(out(1, 1) == doctest::Approx(0.5));
}

TEST_CASE("propagation matches the dense normalized-adjacency oracle") {
    Rng rng(4);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (int e = 0; e < 30; ++e) {
        const std::uint32_t u = static_cast<std::uint32_t>(rng.uniform_int(12));
        const std::uint32_t i = static_cast<std::uint32_t>(rng.uniform_int(8));
        if (seen.insert({u, i}).second) edges.push_back({u, i});
    }
    const auto split = make_split(12, 8, edges);
    const BipartiteGraph g = build_graph(split);
    const BackboneModel m = init_backbone(12, 8, 5, 2, 11);

    const Mat got = propagate(m, g);

    const Mat a = dense_norm_adjacency(g);
    const Mat e0 = stacked_base(m);
    const Mat e1 = matmul(a, e0);
    const Mat e2 = matmul(a, e1);
    Mat expect = e0;
    add_inplace(expect, e1);
    add_inplace(expect, e2);
    scale_inplace(expect, 1.0 / 3.0);

    CHECK(max_abs_diff(got, expect) < 1e-6);
}

TEST_CASE("propagate is linear") {
    const auto split = make_split(4, 3, {{0, 0}, {1, 0}, {2, 1}, {3, 2}, {0, 2}});
    const BipartiteGraph g = build_graph(split);
    Rng rng(5);
    const Mat e1 = Mat::gaussian(7, 4, 0.0, 1.0, rng);
    const Mat e2 = Mat::gaussian(7, 4, 0.0, 1.0, rng);
    Mat combo = e1;
    scale_inplace(combo, 2.5);
    add_scaled_inplace(combo, e2, -1.25);

    Mat lhs = propagate_matrix(combo, g, 2);
    Mat p1 = propagate_matrix(e1, g, 2);
    Mat p2 = propagate_matrix(e2, g, 2);
    scale_inplace(p1, 2.5);
    add_scaled_inplace(p1, p2, -1.25);
    CHECK(max_abs_diff(lhs, p1) < 1e-6);
}

TEST_CASE("score basics and scalar-loop oracle") {
    Mat e(4, 3);
    e(0, 0) = 1.0;   // user 0
    e(2, 0) = 1.0;   // item 0 = row n_users+0
    e(3, 1) = 1.0;   // item 1 orthogonal to user 0
    const auto s = score(e, 2, 0, {0, 1});
    CHECK(s[0] == 1.0);
    CHECK(s[1] == 0.0);

    Rng rng(6);
    const Mat r = Mat::gaussian(9, 6, 0.0, 1.0, rng);
    const auto got = score(r, 4, 2, {0, 3, 4});
    const std::uint32_t items[] = {0, 3, 4};
    for (int k = 0; k < 3; ++k) {
        double acc = 0.0;
        for (int j = 0; j < 6; ++j) acc += r(2, j) * r(4 + items[k], j);
        CHECK(got[k] == doctest::Approx(acc).epsilon(1e-9));
    }
}

TEST_CASE("bpr batch invariants and forced negative") {
    {
        const auto split = make_split(1, 2, {{0, 0}});
        Rng rng(7);
        const BprBatch b = sample_bpr_batch(split, 64, rng);
        for (const auto& t : b.triples) {
            CHECK(t.pos_item == 0);
            CHECK(t.neg_item == 1);
        }
    }
    {
        const auto split = make_split(6, 9, {{0, 0}, {0, 3}, {1, 1}, {2, 2}, {3, 3},
                                             {4, 4}, {5, 5}, {5, 8}});
        std::set<std::pair<std::uint32_t, std::uint32_t>> train;
        for (const std::uint32_t idx : split.train) {
            const auto& t = split.base.interactions[idx];
            train.insert({t.user, t.item});
        }
        Rng rng(8);
        const BprBatch b = sample_bpr_batch(split, 256, rng);
        REQUIRE(b.triples.size() == 256);
        for (const auto& t : b.triples) {
            CHECK(train.count({t.user, t.pos_item}) == 1);
            CHECK(train.count({t.user, t.neg_item}) == 0);
        }
    }
}

TEST_CASE("bpr positive sampling is uniform within 3 sigma") {
    const auto split = make_split(5, 6, {{0, 0}, {0, 1}, {1, 2}, {1, 3}, {2, 4},
                                         {2, 5}, {3, 0}, {3, 5}, {4, 1}, {4, 2}});
    const std::size_t n_pos = split.train.size();
    const std::size_t draws = 100000;
    Rng rng(9);
    const BprBatch b = sample_bpr_batch(split, draws, rng);
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> counts;
    for (const auto& t : b.triples) ++counts[{t.user, t.pos_item}];
    const double p = 1.0 / static_cast<double>(n_pos);
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    for (const auto& [pair, c] : counts) {
        CHECK(std::abs(static_cast<double>(c) - draws * p) <= 3.0 * sigma);
    }
    CHECK(counts.size() == n_pos);
}

TEST_CASE("negative sampling aborts when a user covers every item") {
    const auto split = make_split(1, 2, {{0, 0}, {0, 1}});
    Rng rng(10);
    CHECK_THROWS_WITH_AS(sample_bpr_batch(split, 4, rng),
                         doctest::Contains("every item"), std::runtime_error);
}

TEST_CASE("bpr loss forced values") {
    // All-zero embeddings: every score 0, sigma(0) = 1/2.
    Mat e(5, 4);
    Mat base(5, 4);
    BprBatch batch;
    batch.triples = {{0, 0, 2}, {1, 1, 0}};
    const BprResult r = bpr_loss(e, base, 2, batch, 0.0);
    CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // Large positive margin drives the loss toward zero.
    Mat e2(5, 1);
    e2(0, 0) = 10.0;   // user 0
    e2(2, 0) = 10.0;   // pos item 0
    e2(4, 0) = -10.0;  // neg item 2
    BprBatch one;
    one.triples = {{0, 0, 2}};
    const BprResult r2 = bpr_loss(e2, Mat(5, 1), 2, one, 0.0);
    CHECK(r2.loss < 1e-10);
    CHECK(r2.loss > 0.0);
}

TEST_CASE("bpr gradient through propagation matches finite differences") {
    const auto split = make_split(5, 6, {{0, 0}, {0, 1}, {1, 2}, {2, 3}, {3, 4},
                                         {4, 5}, {1, 0}, {2, 5}});
    const BipartiteGraph g = build_graph(split);
    BackboneModel m = init_backbone(5, 6, 4, 2, 12);
    Rng rng(13);
    const BprBatch batch = sample_bpr_batch(split, 12, rng);
    const double l2 = 0.05;

    auto eval = [&]() {
        const Mat base = stacked_base(m);
        return bpr_loss(propagate_matrix(base, g, m.n_layers), base, 5, batch, l2).loss;
    };
    const Mat base = stacked_base(m);
    const BprResult r = bpr_loss(propagate_matrix(base, g, m.n_layers), base, 5, batch, l2);
    Mat d_base = propagate_matrix(r.d_propagated, g, m.n_layers);
    add_inplace(d_base, r.d_base);
    Mat d_user(5, 4), d_item(6, 4);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) d_user(i, j) = d_base(i, j);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j) d_item(i, j) = d_base(5 + i, j);

    std::vector<Mat*> params{&m.user_emb, &m.item_emb};
    std::vector<const Mat*> analytic{&d_user, &d_item};
    Rng check_rng(14);
    const double err = grad_check(eval, params, analytic, 1e-5, 60, check_rng);
    CHECK(err < 1e-4);
}
