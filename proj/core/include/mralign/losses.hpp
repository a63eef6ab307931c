#pragma once

#include <deque>
#include <span>
#include <utility>
#include <vector>

#include "mralign/model.hpp"
#include "mralign/rng.hpp"
#include "mralign/slide.hpp"
#include "mralign/tensor.hpp"

namespace mralign {

// mean cross-entropy of row r against class targets[r]
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

// Per visual row: indices of the min(k_o, k) keyword rows with the highest
// cosine similarity, ordered by similarity descending then index ascending
// (ties break to the lower index). Selection is discrete: no gradients.
struct PositiveSet {
    std::vector<std::vector<int>> rows;
};

PositiveSet select_topk_positive(const Tensor& V, const Tensor& T, int k_o);

// Keyword-contrast loss over one bag: rows of V and T are L2-normalized, the
// similarity matrix is temperature-scaled, and each visual row pulls its
// positive keywords against all bag keywords. tau must be a positive scalar
// (graph tensor, so a learnable temperature trains through it).
Tensor cvta_loss(const Tensor& V, const Tensor& T, const PositiveSet& positives, const Tensor& tau);

// negative cosine, zero-norm inputs contribute 0; accepts [n] or [1, n]
Tensor mrtva_pair(const Tensor& h_p, const Tensor& g_c);

// Symmetric negative-cosine alignment over directed (parent, child) edges:
// per edge, 0.5*[pair(h_p, sg(g_c)) + pair(g_p, sg(h_c))], averaged over
// edges. Gradient reaches only the parent-side arguments; the child side is
// stop-gradient in both terms.
Tensor mrtva_edges(const std::vector<Tensor>& g, const std::vector<Tensor>& h,
                   const std::vector<std::pair<int, int>>& edges);

// immediate parent-child edges of one anchor's quadtree (84 per full bag)
std::vector<std::pair<int, int>> parent_child_edges(const PatchIndex& index);
Tensor mrtva_symmetric(const std::vector<Tensor>& g, const std::vector<Tensor>& h,
                       const PatchIndex& index);

// Fixed-capacity FIFO of unit-norm feature rows (extra contrastive
// negatives). Stored values are detached: queue entries never carry grads.
class FeatureQueue {
public:
    FeatureQueue() = default;
    FeatureQueue(int capacity, int width);

    void push(std::span<const float> v); // L2-normalizes; zero vectors rejected
    int size() const { return static_cast<int>(entries_.size()); }
    int capacity() const { return capacity_; }
    int width() const { return width_; }

    // [size, width] constant tensor, oldest entry first; size 0 -> undefined
    Tensor snapshot() const;

    // checkpoint plumbing: rows in FIFO order
    std::vector<float> flat() const;
    void restore(const std::vector<float>& rows);

private:
    int capacity_ = 0;
    int width_ = 0;
    std::deque<std::vector<float>> entries_;
};

// Symmetric InfoNCE over a batch of paired rows plus queued negatives.
// v and w are raw [B, d] rows; both sides are L2-normalized here.
Tensor itc_loss(const Tensor& v, const Tensor& w, const FeatureQueue& queue_v,
                const FeatureQueue& queue_w, const Tensor& tau);

// mean binary cross-entropy over match logits [n, 2]; labels 1 = paired
Tensor itm_loss(const Tensor& logits, const std::vector<int>& labels);

// distinct masked positions, ceil(mask_rate * n) of them, sorted
std::vector<int> choose_masked_positions(int n, float mask_rate, Rng& rng);

struct MlmResult {
    Tensor loss;
    std::vector<int> masked_pos; // sorted
    std::vector<int> targets;    // true token at each masked position
    Tensor logits;               // [|masked_pos|, vocab]
};

// mask tokens, fuse with the image row, cross-entropy at masked slots
MlmResult mlm_loss(const ModelParams& p, const Tensor& v, const std::vector<int>& tokens,
                   Rng& rng, float mask_rate = 0.15f);

struct PlmResult {
    Tensor loss;
    int prefix_len = 0; // uniform in [1, L-1]
    Tensor logits;      // [L - prefix_len, vocab] suffix logits
    bool skipped = false;
};

// teacher-forced suffix cross-entropy behind a causal mask; L < 2 skips
PlmResult plm_loss(const ModelParams& p, const Tensor& v, const std::vector<int>& tokens, Rng& rng);

// ---------------------------------------------------------------- composite

struct LossFlags {
    bool enable_cvta = true;
    bool enable_mrtva = true;
};

struct LossBreakdown {
    double cvta = 0, mrtva = 0, itc = 0, itm = 0, mlm = 0, plm = 0;
    double bl = 0;    // itc + itm + mlm + plm
    double total = 0; // bl + enabled alignment terms
};

struct TotalLoss {
    Tensor total; // graph scalar over the enabled terms
    LossBreakdown values;
};

// undefined tensors count as exact zero; disabled terms are dropped from the
// graph entirely so no gradient flows through them
TotalLoss combine_losses(const Tensor& cvta, const Tensor& mrtva, const Tensor& itc,
                         const Tensor& itm, const Tensor& mlm, const Tensor& plm,
                         const LossFlags& flags);

} // namespace mralign
