#include "mralign/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mralign {

namespace {

void check_tau(const Tensor& tau) {
    if (!tau.defined() || tau.numel() != 1)
        throw std::invalid_argument("temperature must be a defined scalar tensor");
    if (!(tau.at(0) > 0.0f))
        throw std::invalid_argument("temperature must be > 0, got " + std::to_string(tau.at(0)));
}

Tensor flatten_vec(const Tensor& t, const char* op) {
    if (t.ndim() == 1) return t;
    if (t.ndim() == 2 && t.dim(0) == 1) return reshape(t, {t.dim(1)});
    throw std::invalid_argument(std::string(op) + ": want a vector or single row, got " + shape_str(t.shape()));
}

} // namespace

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2)
        throw std::invalid_argument("cross_entropy_rows: logits must be 2-D, got " + shape_str(logits.shape()));
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(targets.size()) != n)
        throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(n) + " rows");
    std::vector<float> onehot(static_cast<size_t>(n) * c, 0.0f);
    for (int i = 0; i < n; ++i) {
        if (targets[i] < 0 || targets[i] >= c)
            throw std::invalid_argument("cross_entropy_rows: target " + std::to_string(targets[i]) +
                                        " outside [0, " + std::to_string(c) + ")");
        onehot[static_cast<size_t>(i) * c + targets[i]] = 1.0f;
    }
    Tensor lse = logsumexp(logits, 1); // [n]
    Tensor picked = sum(mul(logits, Tensor::from_vec({n, c}, std::move(onehot))));
    return scale(sub(sum(lse), picked), 1.0f / static_cast<float>(n));
}

PositiveSet select_topk_positive(const Tensor& V, const Tensor& T, int k_o) {
    if (V.ndim() != 2 || T.ndim() != 2)
        throw std::invalid_argument("select_topk_positive: V and T must be 2-D, got " + shape_str(V.shape()) +
                                    " and " + shape_str(T.shape()));
    if (T.dim(0) < 1) throw std::invalid_argument("select_topk_positive: empty keyword matrix");
    if (V.dim(1) != T.dim(1))
        throw std::invalid_argument("select_topk_positive: width mismatch " + shape_str(V.shape()) + " vs " +
                                    shape_str(T.shape()));
    if (k_o < 1) throw std::invalid_argument("select_topk_positive: k_o must be >= 1, got " + std::to_string(k_o));

    const int v_o = V.dim(0), k = T.dim(0), d = V.dim(1);
    const int take = std::min(k_o, k);
    auto vd = V.data();
    auto td = T.data();

    std::vector<double> tnorm(static_cast<size_t>(k));
    for (int b = 0; b < k; ++b) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            double x = td[static_cast<size_t>(b) * d + j];
            s += x * x;
        }
        tnorm[static_cast<size_t>(b)] = std::sqrt(s);
    }

    PositiveSet out;
    out.rows.resize(static_cast<size_t>(v_o));
    std::vector<std::pair<double, int>> sims(static_cast<size_t>(k));
    for (int a = 0; a < v_o; ++a) {
        double vn = 0.0;
        for (int j = 0; j < d; ++j) {
            double x = vd[static_cast<size_t>(a) * d + j];
            vn += x * x;
        }
        vn = std::sqrt(vn);
        for (int b = 0; b < k; ++b) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j)
                dot += static_cast<double>(vd[static_cast<size_t>(a) * d + j]) *
                       td[static_cast<size_t>(b) * d + j];
            double denom = vn * tnorm[static_cast<size_t>(b)];
            sims[static_cast<size_t>(b)] = {denom > 0.0 ? dot / denom : 0.0, b};
        }
        std::sort(sims.begin(), sims.end(),
                  [](const auto& x, const auto& y) { return x.first != y.first ? x.first > y.first : x.second < y.second; });
        auto& row = out.rows[static_cast<size_t>(a)];
        row.reserve(static_cast<size_t>(take));
        for (int i = 0; i < take; ++i) row.push_back(sims[static_cast<size_t>(i)].second);
    }
    return out;
}

Tensor cvta_loss(const Tensor& V, const Tensor& T, const PositiveSet& positives, const Tensor& tau) {
    check_tau(tau);
    if (V.ndim() != 2 || T.ndim() != 2 || V.dim(1) != T.dim(1))
        throw std::invalid_argument("cvta_loss: incompatible V " + shape_str(V.shape()) + " and T " +
                                    shape_str(T.shape()));
    const int v_o = V.dim(0), k = T.dim(0);
    if (static_cast<int>(positives.rows.size()) != v_o)
        throw std::invalid_argument("cvta_loss: positive set covers " + std::to_string(positives.rows.size()) +
                                    " rows, V has " + std::to_string(v_o));

    Tensor S = div(matmul(l2_normalize(V), transpose(l2_normalize(T))), tau); // [v_o, k]

    // picks carry the per-row 1/k_a weight; the 1/v_o factor is applied once
    // at the end so the k_o=1 sole-keyword case cancels bitwise to 0
    std::vector<float> picks(static_cast<size_t>(v_o) * k, 0.0f);
    for (int a = 0; a < v_o; ++a) {
        const auto& row = positives.rows[static_cast<size_t>(a)];
        if (row.empty()) throw std::invalid_argument("cvta_loss: empty positive row " + std::to_string(a));
        float w = 1.0f / static_cast<float>(row.size());
        for (int b : row) {
            if (b < 0 || b >= k)
                throw std::invalid_argument("cvta_loss: positive index " + std::to_string(b) + " outside [0, " +
                                            std::to_string(k) + ")");
            picks[static_cast<size_t>(a) * k + b] = w;
        }
    }
    Tensor positive_sum = sum(mul(S, Tensor::from_vec({v_o, k}, std::move(picks))));
    return scale(sub(sum(logsumexp(S, 1)), positive_sum), 1.0f / static_cast<float>(v_o));
}

Tensor mrtva_pair(const Tensor& h_p, const Tensor& g_c) {
    Tensor a = flatten_vec(h_p, "mrtva_pair");
    Tensor b = flatten_vec(g_c, "mrtva_pair");
    return scale(cosine_similarity(a, b), -1.0f);
}

Tensor mrtva_edges(const std::vector<Tensor>& g, const std::vector<Tensor>& h,
                   const std::vector<std::pair<int, int>>& edges) {
    if (g.size() != h.size())
        throw std::invalid_argument("mrtva_edges: " + std::to_string(g.size()) + " projections vs " +
                                    std::to_string(h.size()) + " predictions");
    if (edges.empty()) throw std::invalid_argument("mrtva_edges: empty edge set");
    const int n = static_cast<int>(g.size());
    Tensor acc;
    for (const auto& [pi, ci] : edges) {
        if (pi < 0 || pi >= n || ci < 0 || ci >= n)
            throw std::invalid_argument("mrtva_edges: edge (" + std::to_string(pi) + ", " + std::to_string(ci) +
                                        ") outside [0, " + std::to_string(n) + ")");
        if (!g[static_cast<size_t>(pi)].defined() || !h[static_cast<size_t>(pi)].defined() ||
            !g[static_cast<size_t>(ci)].defined() || !h[static_cast<size_t>(ci)].defined())
            throw std::invalid_argument("mrtva_edges: missing representation on edge (" + std::to_string(pi) +
                                        ", " + std::to_string(ci) + ")");
        Tensor t1 = mrtva_pair(h[static_cast<size_t>(pi)], stop_gradient(g[static_cast<size_t>(ci)]));
        Tensor t2 = mrtva_pair(g[static_cast<size_t>(pi)], stop_gradient(h[static_cast<size_t>(ci)]));
        Tensor term = scale(add(t1, t2), 0.5f);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0f / static_cast<float>(edges.size()));
}

std::vector<std::pair<int, int>> parent_child_edges(const PatchIndex& index) {
    std::vector<std::pair<int, int>> edges;
    edges.reserve(index.members.size());
    for (int i = 0; i < static_cast<int>(index.parent.size()); ++i)
        if (index.parent[static_cast<size_t>(i)] >= 0)
            edges.emplace_back(index.parent[static_cast<size_t>(i)], i);
    return edges;
}

Tensor mrtva_symmetric(const std::vector<Tensor>& g, const std::vector<Tensor>& h,
                       const PatchIndex& index) {
    if (g.size() != index.members.size())
        throw std::invalid_argument("mrtva_symmetric: " + std::to_string(g.size()) +
                                    " representations for a bag of " + std::to_string(index.members.size()));
    return mrtva_edges(g, h, parent_child_edges(index));
}

FeatureQueue::FeatureQueue(int capacity, int width) : capacity_(capacity), width_(width) {
    if (capacity < 1 || width < 1)
        throw std::invalid_argument("FeatureQueue: capacity and width must be >= 1, got " +
                                    std::to_string(capacity) + "/" + std::to_string(width));
}

void FeatureQueue::push(std::span<const float> v) {
    if (capacity_ == 0) throw std::logic_error("FeatureQueue::push: default-constructed queue");
    if (static_cast<int>(v.size()) != width_)
        throw std::invalid_argument("FeatureQueue::push: row width " + std::to_string(v.size()) + ", queue " +
                                    std::to_string(width_));
    double n = 0.0;
    for (float x : v) n += static_cast<double>(x) * x;
    n = std::sqrt(n);
    if (n < 1e-12)
        throw std::domain_error("FeatureQueue::push: zero-norm row cannot be stored unit-norm");
    std::vector<float> row(v.begin(), v.end());
    for (float& x : row) x = static_cast<float>(x / n);
    entries_.push_back(std::move(row));
    if (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
}

Tensor FeatureQueue::snapshot() const {
    if (entries_.empty()) return {};
    std::vector<float> flat_rows;
    flat_rows.reserve(entries_.size() * static_cast<size_t>(width_));
    for (const auto& r : entries_) flat_rows.insert(flat_rows.end(), r.begin(), r.end());
    return Tensor::from_vec({size(), width_}, std::move(flat_rows));
}

std::vector<float> FeatureQueue::flat() const {
    std::vector<float> out;
    out.reserve(entries_.size() * static_cast<size_t>(width_));
    for (const auto& r : entries_) out.insert(out.end(), r.begin(), r.end());
    return out;
}

void FeatureQueue::restore(const std::vector<float>& rows) {
    if (capacity_ == 0) throw std::logic_error("FeatureQueue::restore: default-constructed queue");
    if (rows.size() % static_cast<size_t>(width_) != 0)
        throw std::invalid_argument("FeatureQueue::restore: " + std::to_string(rows.size()) +
                                    " floats do not tile width " + std::to_string(width_));
    size_t n = rows.size() / static_cast<size_t>(width_);
    if (n > static_cast<size_t>(capacity_))
        throw std::invalid_argument("FeatureQueue::restore: " + std::to_string(n) + " rows exceed capacity " +
                                    std::to_string(capacity_));
    entries_.clear();
    for (size_t i = 0; i < n; ++i)
        entries_.emplace_back(rows.begin() + static_cast<long>(i * width_),
                              rows.begin() + static_cast<long>((i + 1) * width_));
}

Tensor itc_loss(const Tensor& v, const Tensor& w, const FeatureQueue& queue_v,
                const FeatureQueue& queue_w, const Tensor& tau) {
    check_tau(tau);
    if (v.ndim() != 2 || w.ndim() != 2 || v.shape() != w.shape())
        throw std::invalid_argument("itc_loss: paired batches must share a 2-D shape, got " +
                                    shape_str(v.shape()) + " and " + shape_str(w.shape()));
    const int b = v.dim(0);
    if (b < 1) throw std::invalid_argument("itc_loss: empty batch");

    Tensor vn = l2_normalize(v);
    Tensor wn = l2_normalize(w);
    std::vector<int> diag(static_cast<size_t>(b));
    std::iota(diag.begin(), diag.end(), 0);

    auto direction = [&](const Tensor& anchors, const Tensor& batch_targets, const FeatureQueue& queue) {
        Tensor cands = batch_targets;
        if (queue.size() > 0) cands = concat({batch_targets, queue.snapshot()}, 0);
        Tensor logits = div(matmul(anchors, transpose(cands)), tau); // [b, b + q]
        return cross_entropy_rows(logits, diag);
    };
    return scale(add(direction(vn, wn, queue_w), direction(wn, vn, queue_v)), 0.5f);
}

Tensor itm_loss(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2 || logits.dim(1) != 2)
        throw std::invalid_argument("itm_loss: want [n, 2] logits, got " + shape_str(logits.shape()));
    if (logits.dim(0) < 1 || labels.empty()) throw std::invalid_argument("itm_loss: empty pair set");
    bool has_pos = false, has_neg = false;
    for (int y : labels) {
        if (y != 0 && y != 1)
            throw std::invalid_argument("itm_loss: label " + std::to_string(y) + " not in {0, 1}");
        (y == 1 ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg)
        throw std::invalid_argument("itm_loss: need at least one matched and one mismatched pair");
    return cross_entropy_rows(logits, labels);
}

std::vector<int> choose_masked_positions(int n, float mask_rate, Rng& rng) {
    if (n < 1) throw std::invalid_argument("choose_masked_positions: empty sequence");
    if (mask_rate <= 0.0f || mask_rate > 1.0f)
        throw std::invalid_argument("choose_masked_positions: mask_rate must be in (0, 1], got " +
                                    std::to_string(mask_rate));
    // guard against float rate overshoot (0.15f * 20 > 3.0) before rounding up
    int m = std::max(1, static_cast<int>(std::ceil(static_cast<double>(mask_rate) * n - 1e-6)));
    std::vector<int> pos(static_cast<size_t>(n));
    std::iota(pos.begin(), pos.end(), 0);
    rng.shuffle(pos);
    pos.resize(static_cast<size_t>(m));
    std::sort(pos.begin(), pos.end());
    return pos;
}

MlmResult mlm_loss(const ModelParams& p, const Tensor& v, const std::vector<int>& tokens,
                   Rng& rng, float mask_rate) {
    if (tokens.empty()) throw std::invalid_argument("mlm_loss: empty token sequence");
    MlmResult res;
    res.masked_pos = choose_masked_positions(static_cast<int>(tokens.size()), mask_rate, rng);
    for (int i : res.masked_pos) res.targets.push_back(tokens[static_cast<size_t>(i)]);

    Tensor enc = text_encode_rows(p, tokens);
    std::vector<Tensor> rows;
    rows.reserve(tokens.size());
    size_t next_masked = 0;
    for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
        if (next_masked < res.masked_pos.size() && res.masked_pos[next_masked] == i) {
            rows.push_back(p.get("mask_emb"));
            ++next_masked;
        } else {
            rows.push_back(slice(enc, 0, i, 1));
        }
    }
    FusedRep rep = fuse(p, v, concat(rows, 0));

    std::vector<Tensor> picked;
    picked.reserve(res.masked_pos.size());
    for (int i : res.masked_pos) picked.push_back(slice(rep.keyword_states, 0, i, 1));
    res.logits = mlm_logits(p, concat(picked, 0));
    res.loss = cross_entropy_rows(res.logits, res.targets);
    return res;
}

PlmResult plm_loss(const ModelParams& p, const Tensor& v, const std::vector<int>& tokens, Rng& rng) {
    PlmResult res;
    const int L = static_cast<int>(tokens.size());
    if (L < 2) {
        res.loss = Tensor::scalar(0.0f);
        res.skipped = true;
        return res;
    }
    res.prefix_len = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(L - 1)));
    Tensor logits = plm_logits(p, v, tokens); // [L, vocab]
    res.logits = slice(logits, 0, res.prefix_len, L - res.prefix_len);
    std::vector<int> targets(tokens.begin() + res.prefix_len, tokens.end());
    res.loss = cross_entropy_rows(res.logits, targets);
    return res;
}

TotalLoss combine_losses(const Tensor& cvta, const Tensor& mrtva, const Tensor& itc,
                         const Tensor& itm, const Tensor& mlm, const Tensor& plm,
                         const LossFlags& flags) {
    TotalLoss out;
    auto fold = [&out](const Tensor& t, double& slot, bool enabled) {
        if (!enabled || !t.defined()) return;
        if (t.numel() != 1)
            throw std::invalid_argument("combine_losses: terms must be scalars, got " + shape_str(t.shape()));
        slot = t.item();
        out.total = out.total.defined() ? add(out.total, t) : t;
    };
    fold(itc, out.values.itc, true);
    fold(itm, out.values.itm, true);
    fold(mlm, out.values.mlm, true);
    fold(plm, out.values.plm, true);
    fold(cvta, out.values.cvta, flags.enable_cvta);
    fold(mrtva, out.values.mrtva, flags.enable_mrtva);
    if (!out.total.defined()) out.total = Tensor::scalar(0.0f);
    out.values.bl = out.values.itc + out.values.itm + out.values.mlm + out.values.plm;
    out.values.total = out.values.bl + out.values.cvta + out.values.mrtva;
    return out;
}

} // namespace mralign
