#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mralign/gradcheck.hpp"
#include "mralign/losses.hpp"

using namespace mralign;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d = 8;
    c.d_proj = 4;
    c.vision_hidden = 6;
    c.fusion_hidden = 8;
    c.vocab_size = 12;
    return c;
}

// ---- independent scalar oracles (double arithmetic, no tensor ops) ----

std::vector<std::vector<double>> normalized_rows(const Tensor& t) {
    std::vector<std::vector<double>> out(static_cast<size_t>(t.dim(0)));
    for (int i = 0; i < t.dim(0); ++i) {
        double n = 0.0;
        for (int j = 0; j < t.dim(1); ++j) n += static_cast<double>(t.at(i, j)) * t.at(i, j);
        n = std::sqrt(n);
        auto& row = out[static_cast<size_t>(i)];
        row.resize(static_cast<size_t>(t.dim(1)));
        for (int j = 0; j < t.dim(1); ++j) row[static_cast<size_t>(j)] = n > 0 ? t.at(i, j) / n : 0.0;
    }
    return out;
}

double oracle_cvta(const Tensor& V, const Tensor& T, const PositiveSet& pos, double tau) {
    auto vn = normalized_rows(V);
    auto tn = normalized_rows(T);
    double acc = 0.0;
    for (size_t a = 0; a < vn.size(); ++a) {
        std::vector<double> s(tn.size());
        for (size_t b = 0; b < tn.size(); ++b) {
            double dot = 0.0;
            for (size_t j = 0; j < vn[a].size(); ++j) dot += vn[a][j] * tn[b][j];
            s[b] = dot / tau;
        }
        double m = *std::max_element(s.begin(), s.end());
        double denom = 0.0;
        for (double x : s) denom += std::exp(x - m);
        double lse = m + std::log(denom);
        for (int b : pos.rows[a]) acc += -(s[static_cast<size_t>(b)] - lse) / static_cast<double>(pos.rows[a].size());
    }
    return acc / static_cast<double>(vn.size());
}

double oracle_cos(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0 || nb <= 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> row_of(const Tensor& t, int r) {
    std::vector<double> out(static_cast<size_t>(t.dim(1)));
    for (int j = 0; j < t.dim(1); ++j) out[static_cast<size_t>(j)] = t.at(r, j);
    return out;
}

double oracle_ce_rows(const Tensor& logits, const std::vector<int>& targets) {
    double acc = 0.0;
    for (int i = 0; i < logits.dim(0); ++i) {
        double m = logits.at(i, 0);
        for (int j = 1; j < logits.dim(1); ++j) m = std::max(m, static_cast<double>(logits.at(i, j)));
        double denom = 0.0;
        for (int j = 0; j < logits.dim(1); ++j) denom += std::exp(logits.at(i, j) - m);
        acc += m + std::log(denom) - logits.at(i, targets[static_cast<size_t>(i)]);
    }
    return acc / logits.dim(0);
}

} // namespace

TEST_CASE("top-k positive selection matches a full-sort oracle, ties break low") {
    Rng rng(404);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor V = Tensor::randn({6, 8}, rng, 1.0f);
        Tensor T = Tensor::randn({12, 8}, rng, 1.0f);
        PositiveSet got = select_topk_positive(V, T, 3);
        REQUIRE(got.rows.size() == 6);
        for (int a = 0; a < 6; ++a) {
            auto va = row_of(V, a);
            std::vector<std::pair<double, int>> sims;
            for (int b = 0; b < 12; ++b) sims.emplace_back(oracle_cos(va, row_of(T, b)), b);
            std::sort(sims.begin(), sims.end(), [](const auto& x, const auto& y) {
                return x.first != y.first ? x.first > y.first : x.second < y.second;
            });
            for (int i = 0; i < 3; ++i) CHECK(got.rows[static_cast<size_t>(a)][static_cast<size_t>(i)] == sims[static_cast<size_t>(i)].second);
        }
    }

    // duplicated keyword row: both copies selectable, lower index first
    Tensor V = Tensor::from_vec({1, 2}, {1.0f, 0.0f});
    Tensor T = Tensor::from_vec({3, 2}, {0.0f, 1.0f, 1.0f, 0.1f, 1.0f, 0.1f});
    PositiveSet dup = select_topk_positive(V, T, 2);
    CHECK(dup.rows[0] == std::vector<int>{1, 2});

    // k_o >= k keeps every index, ordered by similarity then index
    PositiveSet all = select_topk_positive(V, T, 5);
    CHECK(all.rows[0] == std::vector<int>{1, 2, 0});

    CHECK_THROWS_AS(select_topk_positive(V, Tensor::zeros({0, 2}), 1), std::invalid_argument);
    CHECK_THROWS_AS(select_topk_positive(V, T, 0), std::invalid_argument);
    CHECK_THROWS_AS(select_topk_positive(V, Tensor::zeros({3, 4}), 1), std::invalid_argument);
}

TEST_CASE("cvta: sole-keyword case is exactly zero, oracle match, floor, monotone probe") {
    Tensor tau = Tensor::scalar(0.07f);

    // k = 1, k_o = 1: only candidate is the positive
    Rng rng(11);
    Tensor V1 = Tensor::randn({5, 8}, rng, 1.0f);
    Tensor T1 = Tensor::randn({1, 8}, rng, 1.0f);
    PositiveSet p1 = select_topk_positive(V1, T1, 1);
    CHECK(cvta_loss(V1, T1, p1, tau).item() == 0.0f); // bitwise zero

    // random tiny instances vs the scalar oracle
    for (int trial = 0; trial < 20; ++trial) {
        Tensor V = Tensor::randn({4, 8}, rng, 1.0f);
        Tensor T = Tensor::randn({6, 8}, rng, 1.0f);
        PositiveSet pos = select_topk_positive(V, T, 2);
        float got = cvta_loss(V, T, pos, tau).item();
        double want = oracle_cvta(V, T, pos, 0.07);
        CHECK(std::fabs(got - want) <= 1e-5);
        CHECK(got >= -std::log(2.0) - 1e-6); // documented floor at k_o=2
    }

    // single positive: pushing the positive keyword toward the visual row
    // strictly lowers the loss
    Tensor V = Tensor::randn({1, 4}, rng, 1.0f);
    Tensor T = Tensor::randn({5, 4}, rng, 1.0f);
    PositiveSet pos = select_topk_positive(V, T, 1);
    float before = cvta_loss(V, T, pos, tau).item();
    std::vector<float> boosted(T.data().begin(), T.data().end());
    int b = pos.rows[0][0];
    double vn = 0.0;
    for (int j = 0; j < 4; ++j) vn += static_cast<double>(V.at(j)) * V.at(j);
    vn = std::sqrt(vn);
    for (int j = 0; j < 4; ++j) boosted[static_cast<size_t>(b) * 4 + j] += 2.0f * static_cast<float>(V.at(j) / vn);
    float after = cvta_loss(V, Tensor::from_vec({5, 4}, std::move(boosted)), pos, tau).item();
    CHECK(after < before);

    CHECK_THROWS_AS(cvta_loss(V, T, pos, Tensor::scalar(0.0f)), std::invalid_argument);
    CHECK_THROWS_AS(cvta_loss(V, T, pos, Tensor::scalar(-1.0f)), std::invalid_argument);
}

TEST_CASE("cvta gradients match finite differences with a frozen positive set") {
    Rng rng(77);
    Tensor V = Tensor::randn({4, 8}, rng, 0.8f, true);
    Tensor T = Tensor::randn({6, 8}, rng, 0.8f, true);
    Tensor log_tau = Tensor::scalar(std::log(0.2f), true);
    PositiveSet pos = select_topk_positive(V, T, 2);

    auto build = [&]() { return cvta_loss(V, T, pos, exp(log_tau)); };
    auto res = check_gradients(build, {V, T, log_tau}, 1e-3);
    INFO("worst " << res.worst << " rel " << res.max_rel_err);
    CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("mrtva pair: hand values and degenerate zero-norm guard") {
    Tensor a = Tensor::from_vec({3}, {1.0f, 2.0f, 2.0f});
    CHECK(mrtva_pair(a, a).item() == doctest::Approx(-1.0).epsilon(1e-6));

    Tensor x = Tensor::from_vec({2}, {1.0f, 0.0f});
    Tensor y = Tensor::from_vec({2}, {0.0f, 3.0f});
    CHECK(mrtva_pair(x, y).item() == 0.0f);

    Rng rng(5);
    Tensor u = Tensor::randn({1, 6}, rng, 1.0f);
    Tensor v = Tensor::randn({1, 6}, rng, 1.0f);
    double want = -oracle_cos(row_of(u, 0), row_of(v, 0));
    CHECK(mrtva_pair(u, v).item() == doctest::Approx(want).epsilon(1e-6));

    Tensor z = Tensor::zeros({6});
    CHECK(mrtva_pair(u, z).item() == 0.0f);
}

TEST_CASE("mrtva over a full bag: 84 edges, oracle match, collapse point at -1") {
    PatchId apid{0, 0, 5, 0, 0};
    PatchIndex idx = expand_children(apid);
    auto edges = parent_child_edges(idx);
    CHECK(edges.size() == 84);
    for (const auto& [pi, ci] : edges) CHECK(idx.parent[static_cast<size_t>(ci)] == pi);

    Rng rng(31);
    std::vector<Tensor> g, h;
    for (int i = 0; i < 85; ++i) {
        g.push_back(Tensor::randn({1, 4}, rng, 1.0f, true));
        h.push_back(Tensor::randn({1, 4}, rng, 1.0f, true));
    }
    float got = mrtva_symmetric(g, h, idx).item();

    double want = 0.0;
    for (const auto& [pi, ci] : edges) {
        want += 0.5 * (-oracle_cos(row_of(h[static_cast<size_t>(pi)], 0), row_of(g[static_cast<size_t>(ci)], 0)) +
                       -oracle_cos(row_of(g[static_cast<size_t>(pi)], 0), row_of(h[static_cast<size_t>(ci)], 0)));
    }
    want /= static_cast<double>(edges.size());
    CHECK(std::fabs(got - want) <= 1e-5);
    CHECK(got >= -1.0 - 1e-6);
    CHECK(got <= 1.0 + 1e-6);

    // identical representations everywhere -> exactly the collapse point
    Tensor same = Tensor::from_vec({1, 4}, {0.3f, -1.0f, 0.2f, 0.5f});
    std::vector<Tensor> gs(85, same), hs(85, same);
    CHECK(mrtva_symmetric(gs, hs, idx).item() == doctest::Approx(-1.0).epsilon(1e-6));

    std::vector<Tensor> short_g(84), short_h(84);
    CHECK_THROWS_AS(mrtva_symmetric(short_g, short_h, idx), std::invalid_argument);
}

TEST_CASE("mrtva stop-gradient: child-side gradients are bitwise zero") {
    Rng rng(13);
    Tensor g0 = Tensor::randn({1, 4}, rng, 1.0f, true);
    Tensor h0 = Tensor::randn({1, 4}, rng, 1.0f, true);
    Tensor g1 = Tensor::randn({1, 4}, rng, 1.0f, true);
    Tensor h1 = Tensor::randn({1, 4}, rng, 1.0f, true);

    Tensor loss = mrtva_edges({g0, g1}, {h0, h1}, {{0, 1}});
    backward(loss);

    REQUIRE(g0.has_grad());
    REQUIRE(h0.has_grad());
    bool parent_nonzero = false;
    for (float x : g0.grad()) parent_nonzero = parent_nonzero || x != 0.0f;
    for (float x : h0.grad()) parent_nonzero = parent_nonzero || x != 0.0f;
    CHECK(parent_nonzero);

    // the child enters only under stop_gradient: no grad may arrive at all
    for (float x : g1.has_grad() ? g1.grad() : std::span<const float>{}) CHECK(x == 0.0f);
    for (float x : h1.has_grad() ? h1.grad() : std::span<const float>{}) CHECK(x == 0.0f);

    // at leaf level (40x) members are never parents: full-bag check
    PatchIndex idx = expand_children({0, 0, 5, 0, 0});
    std::vector<Tensor> g, h;
    for (int i = 0; i < 85; ++i) {
        g.push_back(Tensor::randn({1, 4}, rng, 1.0f, true));
        h.push_back(Tensor::randn({1, 4}, rng, 1.0f, true));
    }
    backward(mrtva_symmetric(g, h, idx));
    for (int i = member_offset(40); i < 85; ++i) {
        for (float x : g[static_cast<size_t>(i)].has_grad() ? g[static_cast<size_t>(i)].grad()
                                                            : std::span<const float>{})
            CHECK(x == 0.0f);
        for (float x : h[static_cast<size_t>(i)].has_grad() ? h[static_cast<size_t>(i)].grad()
                                                            : std::span<const float>{})
            CHECK(x == 0.0f);
    }
    // non-leaf members do receive gradient
    bool root_nonzero = false;
    for (float x : g[0].grad()) root_nonzero = root_nonzero || x != 0.0f;
    CHECK(root_nonzero);
}

TEST_CASE("mrtva gradients match finite differences of the stop-gradient objective") {
    // FD must hold the stopped child branches at their captured values: the
    // analytic gradient is by construction the gradient of that objective
    Rng rng(99);
    std::vector<Tensor> g, h, leaves;
    for (int i = 0; i < 5; ++i) {
        g.push_back(Tensor::randn({1, 4}, rng, 1.0f, true));
        h.push_back(Tensor::randn({1, 4}, rng, 1.0f, true));
        leaves.push_back(g.back());
        leaves.push_back(h.back());
    }
    std::vector<std::pair<int, int>> edges{{0, 1}, {0, 2}, {1, 3}, {2, 4}};

    std::vector<Tensor> fg, fh; // frozen child-side values
    for (int i = 0; i < 5; ++i) {
        fg.push_back(stop_gradient(g[static_cast<size_t>(i)]));
        fh.push_back(stop_gradient(h[static_cast<size_t>(i)]));
    }
    auto build_frozen = [&]() {
        Tensor acc;
        for (const auto& [pi, ci] : edges) {
            Tensor t1 = mrtva_pair(h[static_cast<size_t>(pi)], fg[static_cast<size_t>(ci)]);
            Tensor t2 = mrtva_pair(g[static_cast<size_t>(pi)], fh[static_cast<size_t>(ci)]);
            Tensor term = scale(add(t1, t2), 0.5f);
            acc = acc.defined() ? add(acc, term) : term;
        }
        return scale(acc, 1.0f / static_cast<float>(edges.size()));
    };
    auto res = check_gradients(build_frozen, leaves, 1e-3);
    INFO("worst " << res.worst << " rel " << res.max_rel_err);
    CHECK(res.max_rel_err <= 1e-3);

    // the live loss produces bitwise-identical gradients to the frozen form
    for (auto& t : leaves) t.zero_grad();
    backward(mrtva_edges(g, h, edges));
    std::vector<std::vector<float>> live;
    for (auto& t : leaves) live.emplace_back(t.grad().begin(), t.grad().end());
    for (auto& t : leaves) t.zero_grad();
    backward(build_frozen());
    for (size_t i = 0; i < leaves.size(); ++i) {
        auto fz = leaves[i].grad();
        REQUIRE(fz.size() == live[i].size());
        for (size_t j = 0; j < fz.size(); ++j) CHECK(fz[j] == live[i][j]);
    }
}

TEST_CASE("feature queue: FIFO eviction, unit-norm storage, restore round trip") {
    FeatureQueue q(3, 2);
    CHECK(q.size() == 0);
    CHECK(!q.snapshot().defined());

    std::vector<float> r1{3.0f, 4.0f}, r2{1.0f, 0.0f}, r3{0.0f, 2.0f}, r4{5.0f, 0.0f};
    q.push(r1);
    q.push(r2);
    q.push(r3);
    CHECK(q.size() == 3);
    Tensor snap = q.snapshot();
    CHECK(snap.at(0, 0) == doctest::Approx(0.6).epsilon(1e-6)); // 3-4-5 normalized
    CHECK(snap.at(0, 1) == doctest::Approx(0.8).epsilon(1e-6));

    q.push(r4); // evicts r1
    CHECK(q.size() == 3);
    snap = q.snapshot();
    CHECK(snap.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6)); // r2 now oldest
    for (int i = 0; i < 3; ++i) {
        double n = 0.0;
        for (int j = 0; j < 2; ++j) n += static_cast<double>(snap.at(i, j)) * snap.at(i, j);
        CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
    }

    FeatureQueue q2(3, 2);
    q2.restore(q.flat());
    CHECK(q2.size() == 3);
    Tensor snap2 = q2.snapshot();
    for (int i = 0; i < 6; ++i) CHECK(snap2.at(i) == snap.at(i));

    std::vector<float> zero{0.0f, 0.0f};
    CHECK_THROWS_AS(q.push(zero), std::domain_error);
    std::vector<float> wide{1.0f, 2.0f, 3.0f};
    CHECK_THROWS_AS(q.push(wide), std::invalid_argument);
    CHECK_THROWS_AS(FeatureQueue(0, 2), std::invalid_argument);
}

TEST_CASE("itc: single pair is zero, 2x2 oracle, queue negatives never help") {
    Tensor tau = Tensor::scalar(0.5f);
    FeatureQueue empty_v(8, 4), empty_w(8, 4);

    Rng rng(3);
    Tensor v1 = Tensor::randn({1, 4}, rng, 1.0f);
    Tensor w1 = Tensor::randn({1, 4}, rng, 1.0f);
    CHECK(itc_loss(v1, w1, empty_v, empty_w, tau).item() == 0.0f);

    // batch of 2, hand-checkable instance
    Tensor v = Tensor::from_vec({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    Tensor w = Tensor::from_vec({2, 4}, {1, 0.2f, 0, 0, 0.1f, 1, 0, 0});
    float got = itc_loss(v, w, empty_v, empty_w, tau).item();

    auto ce2 = [](double s00, double s01, double s10, double s11) {
        // diagonal targets over rows of [[s00 s01], [s10 s11]]
        double l0 = std::log(std::exp(s00) + std::exp(s01)) - s00;
        double l1 = std::log(std::exp(s10) + std::exp(s11)) - s11;
        return (l0 + l1) / 2.0;
    };
    auto vn = normalized_rows(v);
    auto wn = normalized_rows(w);
    auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s / 0.5; // tau
    };
    double i2t = ce2(dot(vn[0], wn[0]), dot(vn[0], wn[1]), dot(vn[1], wn[0]), dot(vn[1], wn[1]));
    double t2i = ce2(dot(wn[0], vn[0]), dot(wn[0], vn[1]), dot(wn[1], vn[0]), dot(wn[1], vn[1]));
    CHECK(got == doctest::Approx(0.5 * (i2t + t2i)).epsilon(1e-6));

    // an orthogonal queued negative only enlarges denominators
    FeatureQueue qw(8, 4);
    std::vector<float> ortho{0.0f, 0.0f, 0.0f, 1.0f};
    qw.push(ortho);
    float with_queue = itc_loss(v, w, empty_v, qw, tau).item();
    CHECK(with_queue > got);

    CHECK_THROWS_AS(itc_loss(v, w, empty_v, empty_w, Tensor::scalar(0.0f)), std::invalid_argument);
    CHECK_THROWS_AS(itc_loss(v, Tensor::zeros({3, 4}), empty_v, empty_w, tau), std::invalid_argument);
}

TEST_CASE("itc gradients match finite differences, with occupied queues") {
    Rng rng(8);
    Tensor v = Tensor::randn({3, 6}, rng, 1.0f, true);
    Tensor w = Tensor::randn({3, 6}, rng, 1.0f, true);
    Tensor log_tau = Tensor::scalar(std::log(0.3f), true);
    FeatureQueue qv(8, 6), qw(8, 6);
    for (int i = 0; i < 4; ++i) {
        std::vector<float> r(6);
        for (auto& x : r) x = static_cast<float>(rng.next_normal());
        qv.push(r);
        for (auto& x : r) x = static_cast<float>(rng.next_normal());
        qw.push(r);
    }
    auto build = [&]() { return itc_loss(v, w, qv, qw, exp(log_tau)); };
    auto res = check_gradients(build, {v, w, log_tau}, 1e-3);
    CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("itm: equal logits give log 2, saturated logits vanish, oracle match") {
    Tensor flat = Tensor::full({4, 2}, 0.7f);
    std::vector<int> labels{1, 0, 1, 0};
    CHECK(itm_loss(flat, labels).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    Tensor sep = Tensor::from_vec({2, 2}, {-10, 10, 10, -10});
    CHECK(itm_loss(sep, {1, 0}).item() < 1e-3f);

    Rng rng(21);
    Tensor logits = Tensor::randn({4, 2}, rng, 2.0f, true);
    float got = itm_loss(logits, labels).item();
    CHECK(got == doctest::Approx(oracle_ce_rows(logits, labels)).epsilon(1e-6));

    auto build = [&]() { return itm_loss(logits, labels); };
    CHECK(check_gradients(build, {logits}, 1e-3).max_rel_err <= 1e-3);

    CHECK_THROWS_AS(itm_loss(Tensor::zeros({2, 3}), labels), std::invalid_argument);
    CHECK_THROWS_AS(itm_loss(flat, {1, 1, 1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(itm_loss(flat, {1, 0, 1, 2}), std::invalid_argument);
}

TEST_CASE("mlm: mask counts, degenerate vocab, uniform logits, oracle and gradients") {
    for (int n = 1; n <= 10; ++n) {
        Rng rng(static_cast<uint64_t>(n));
        auto pos = choose_masked_positions(n, 0.15f, rng);
        CHECK(static_cast<int>(pos.size()) == (3 * n + 19) / 20); // ceil(0.15 n)
        CHECK(std::is_sorted(pos.begin(), pos.end()));
        CHECK(std::adjacent_find(pos.begin(), pos.end()) == pos.end());
        for (int i : pos) CHECK((i >= 0 && i < n));
    }

    // |vocab| = 1: the only token is always predicted, loss exactly 0
    ModelConfig c1 = tiny_config();
    c1.vocab_size = 1;
    ModelParams m1 = ModelParams::init(c1, 3);
    Rng rng(17);
    Tensor v = Tensor::randn({1, 8}, rng, 1.0f);
    Rng mrng(5);
    CHECK(mlm_loss(m1, v, {0, 0, 0}, mrng).loss.item() == 0.0f);

    // uniform head -> log |vocab| per masked position
    ModelParams m = ModelParams::init(tiny_config(), 4);
    auto wz = m.get("head/mlm_w").mutable_data();
    std::fill(wz.begin(), wz.end(), 0.0f);
    Rng mrng2(5);
    MlmResult uni = mlm_loss(m, v, {1, 5, 2, 7, 3, 9, 4}, mrng2);
    CHECK(uni.loss.item() == doctest::Approx(std::log(12.0)).epsilon(1e-6));
    CHECK(uni.masked_pos.size() == 2); // ceil(0.15 * 7)
    for (size_t i = 0; i < uni.masked_pos.size(); ++i)
        CHECK(uni.targets[i] == std::vector<int>{1, 5, 2, 7, 3, 9, 4}[static_cast<size_t>(uni.masked_pos[i])]);

    // fresh params: loss equals CE recomputed from the produced logits
    ModelParams m2 = ModelParams::init(tiny_config(), 6);
    Rng mrng3(9);
    MlmResult res = mlm_loss(m2, v, {1, 5, 2, 7}, mrng3);
    CHECK(res.loss.item() == doctest::Approx(oracle_ce_rows(res.logits, res.targets)).epsilon(1e-6));

    auto build = [&]() {
        Rng r(9);
        return mlm_loss(m2, v, {1, 5, 2, 7}, r).loss;
    };
    auto gres = check_gradients(build, m2.all(), 1e-3, 10, 55);
    INFO("worst " << gres.worst << " rel " << gres.max_rel_err);
    CHECK(gres.max_rel_err <= 1e-3);

    Rng r0(1);
    CHECK_THROWS_AS(mlm_loss(m2, v, {}, r0), std::invalid_argument);
}

TEST_CASE("plm: short sequences skip, prefix range, uniform decoder, oracle and gradients") {
    ModelParams m = ModelParams::init(tiny_config(), 8);
    Rng rng(2);
    Tensor v = Tensor::randn({1, 8}, rng, 1.0f);

    Rng r1(3);
    PlmResult skip = plm_loss(m, v, {4}, r1);
    CHECK(skip.skipped);
    CHECK(skip.loss.item() == 0.0f);

    std::vector<int> toks{3, 1, 7, 2, 9};
    for (uint64_t s = 0; s < 30; ++s) {
        Rng r(s);
        PlmResult res = plm_loss(m, v, toks, r);
        CHECK(res.prefix_len >= 1);
        CHECK(res.prefix_len <= 4);
        CHECK(res.logits.dim(0) == 5 - res.prefix_len);
    }

    // uniform output head -> mean loss is exactly log |vocab|
    ModelParams mu = ModelParams::init(tiny_config(), 10);
    auto wz = mu.get("plm/out_w").mutable_data();
    std::fill(wz.begin(), wz.end(), 0.0f);
    Rng r2(7);
    CHECK(plm_loss(mu, v, toks, r2).loss.item() == doctest::Approx(std::log(12.0)).epsilon(1e-6));

    Rng r3(7);
    PlmResult res = plm_loss(m, v, toks, r3);
    std::vector<int> targets(toks.begin() + res.prefix_len, toks.end());
    CHECK(res.loss.item() == doctest::Approx(oracle_ce_rows(res.logits, targets)).epsilon(1e-6));

    auto build = [&]() {
        Rng r(7);
        return plm_loss(m, v, toks, r).loss;
    };
    auto gres = check_gradients(build, m.all(), 1e-3, 10, 66);
    CHECK(gres.max_rel_err <= 1e-3);
}

TEST_CASE("combine_losses: flags drop terms from value and graph, sums reconstruct") {
    Rng rng(12);
    Tensor x = Tensor::randn({1, 4}, rng, 1.0f, true); // feeds only the cvta slot
    Tensor cvta = mean(mul(x, x));
    Tensor mrtva = Tensor::scalar(-0.25f);
    Tensor itc = Tensor::scalar(0.5f);
    Tensor itm = Tensor::scalar(0.6f);
    Tensor mlm = Tensor::scalar(0.7f);
    Tensor plm = Tensor::scalar(0.8f);

    TotalLoss full = combine_losses(cvta, mrtva, itc, itm, mlm, plm, LossFlags{});
    CHECK(full.values.bl == doctest::Approx(2.6).epsilon(1e-6));
    CHECK(std::fabs(full.values.total - (full.values.bl + full.values.cvta + full.values.mrtva)) <= 1e-6);
    CHECK(full.total.item() == doctest::Approx(full.values.total).epsilon(1e-6));

    LossFlags off;
    off.enable_cvta = false;
    off.enable_mrtva = false;
    TotalLoss bl_only = combine_losses(cvta, mrtva, itc, itm, mlm, plm, off);
    CHECK(bl_only.values.cvta == 0.0);
    CHECK(bl_only.values.mrtva == 0.0);
    CHECK(bl_only.values.total == bl_only.values.bl);
    backward(bl_only.total);
    CHECK(!x.has_grad()); // disabled term is absent from the graph

    TotalLoss none = combine_losses({}, {}, {}, {}, {}, {}, LossFlags{});
    CHECK(none.values.total == 0.0);
    CHECK(none.total.item() == 0.0f);

    CHECK_THROWS_AS(combine_losses(Tensor::zeros({2, 2}), {}, {}, {}, {}, {}, LossFlags{}),
                    std::invalid_argument);
}
