#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mralign/rng.hpp"
#include "mralign/slide.hpp"
#include "mralign/tensor.hpp"

namespace mralign {

// Closed keyword vocabulary: per class, one group of coarse-signal tokens and
// one group of fine-signal tokens, plus a shared pool of noise tokens. All
// groups are disjoint; ids are dense in [0, size).
struct Vocabulary {
    int n_classes = 0;
    int per_group = 0; // tokens per (class, coarse|fine) group
    int n_noise = 0;

    std::vector<std::string> tokens;            // id -> string
    std::unordered_map<std::string, int> ids;   // string -> id

    static Vocabulary make(int n_classes = 4, int per_group = 6, int n_noise = 16);

    int size() const { return static_cast<int>(tokens.size()); }

    int coarse_token(int cls, int j) const;
    int fine_token(int cls, int j) const;
    int noise_token(int j) const;

    std::vector<int> coarse_group(int cls) const;
    std::vector<int> fine_group(int cls) const;
    std::vector<int> noise_group() const;

    bool is_noise(int id) const;
    bool is_coarse(int id) const; // signal token from a coarse group
    bool is_fine(int id) const;   // signal token from a fine group
    // class owning a signal token, -1 for noise tokens
    int class_of(int id) const;

    const std::string& token_string(int id) const;
    int id_of(const std::string& s) const; // unknown token -> error
};

struct CaptionConfig {
    double noise_rate = 1.0; // Poisson rate of noise tokens per caption
    // Noise draws come from a fixed per-slide subset of the noise group this
    // big (<= 0 or >= group size: the whole group). Keeping the subset small
    // stops the shared noise tokens from flooding every bag's keyword set.
    int noise_pool = 4;
};

// One synthetic caption for one patch: a shuffled copy of the full signal
// group the patch's level exposes (coarse at 5x/10x, fine at 20x/40x), plus
// Poisson-many noise tokens, order shuffled.
std::vector<int> synth_caption(const PatchId& pid, int label, const Vocabulary& vocab, Rng& rng,
                               const CaptionConfig& cfg = {});

struct CaptionEntry {
    PatchId pid;
    std::vector<int> tokens;
};

// stable per-patch caption seed so regeneration order never matters
uint64_t caption_seed(uint64_t data_seed, const PatchId& pid);

// captions for every member of one anchor's quadtree, member order
std::vector<CaptionEntry> synth_bag_captions(const PatchIndex& index, int label,
                                             const Vocabulary& vocab, uint64_t data_seed,
                                             const CaptionConfig& cfg = {});

// encoders are injected so bag assembly stays independent of the model:
// both return a [1, d] feature row (graph-carrying when grads are enabled)
using PatchEncoder = std::function<Tensor(const std::vector<float>& patch512)>;
using TokenEncoder = std::function<Tensor(int token_id)>;

// all 85 member features of one anchor, rows in level-major member order
struct VisualBag {
    PatchId anchor;
    std::vector<PatchId> members;
    Tensor V; // 85 x d
};

VisualBag make_visual_bag(const Slide& slide, const Anchor& anchor, const PatchIndex& index,
                          const PatchEncoder& encode);

// deduplicated keyword set of one anchor plus the per-patch sequences it
// came from; T rows align with `keywords`
struct TextBag {
    PatchId anchor;
    std::vector<int> keywords; // first-occurrence order, no duplicates
    std::vector<std::pair<PatchId, std::vector<int>>> per_patch;
    Tensor T; // k x d
};

TextBag make_text_bag(const PatchId& anchor, const std::vector<CaptionEntry>& captions,
                      const TokenEncoder& encode);

// line format: `slide anchor level row col : token token ...`
void save_captions(const std::string& path, const std::vector<CaptionEntry>& entries,
                   const Vocabulary& vocab);
std::vector<CaptionEntry> load_captions(const std::string& path, const Vocabulary& vocab);

} // namespace mralign
