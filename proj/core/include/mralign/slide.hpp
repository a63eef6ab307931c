#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mralign/rng.hpp"

namespace mralign {

// magnification levels, coarse to fine
inline constexpr std::array<int, 4> kLevels = {5, 10, 20, 40};
inline constexpr int kPatchSide = 512;      // resampled patch side at every level
inline constexpr int kAnchorNative = 4096;  // native (40x) footprint of one 5x anchor
inline constexpr int kPooledSide = 64;      // patch side after the encoder's fixed 8x pool

int level_index(int level); // 5->0, 10->1, 20->2, 40->3, anything else throws

// Synthetic slide generator controls. Classes factor into a coarse layout id
// and a fine texture id: the coarse wave frequency is only readable at low
// magnification while the fine stripe orientation pools to exactly zero
// below 20x, so no single level separates all classes.
struct GenConfig {
    int n_classes = 4;
    int side_multiple = 1;      // native side = 4096 * side_multiple
    float texture_amp = 1.0f;   // master amplitude; 0 collapses to constant background
    float tissue_base = 0.35f;  // tissue darker than background
    float bg_level = 0.90f;
    float coarse_amp = 0.06f;   // per-axis sinusoid amplitude
    float fine_amp = 0.08f;
    float noise_amp = 0.02f;
    int fine_period = 32;       // native px; must divide 64 so coarse pools cancel it
    int coarse_period_a = 2048; // coarse id 0
    int coarse_period_b = 1024; // coarse id 1

    // per-cell tissue intensity offsets: within-slide regional variation that
    // true parent-child pairs share and same-level strangers do not.
    // amp 0 disables; the cell must be a positive power-of-two multiple of 64
    // dividing the anchor side so pooled windows never straddle cells.
    float region_amp = 0.0f;
    int region_cell = 256;

    // sparse localized class texture: a random blob_density fraction of the
    // region cells carry an amplified period-32 square wave along the class's
    // fine axis. Like the global fine stripes it pools to exactly zero at 5x
    // and 10x, but the evidence is local: only patches overlapping a blob
    // cell see it. amp 0 disables.
    float blob_amp = 0.0f;
    float blob_density = 0.25f;
};

struct Slide {
    int slide_id = 0;
    int label = 0;
    uint64_t slide_seed = 0;
    int side = kAnchorNative;
    GenConfig cfg;

    // per-slide draws
    float cx = 0, cy = 0, rx = 0, ry = 0; // tissue ellipse in native coords
    float tissue_eff = 0, bg_eff = 0;     // amplitude-folded levels
    float noise_eff = 0;

    // per-axis additive wave tables, length `side`
    std::vector<float> wave_x, wave_y; // coarse component
    std::vector<float> fine_x, fine_y; // fine component (one axis is all zero)

    // regional offset grid, row-major (side/region_cell)^2; empty when off
    std::vector<float> region_off;
    int region_grid = 0;

    // blob gating grid on the same cells; axis 0 varies along y, 1 along x
    std::vector<uint8_t> blob_cell;
    int blob_grid = 0;
    int blob_axis = 0;
    float blob_eff = 0.0f;

    bool inside_tissue(int x, int y) const {
        float dx = (static_cast<float>(x) - cx) / rx;
        float dy = (static_cast<float>(y) - cy) / ry;
        return dx * dx + dy * dy <= 1.0f;
    }

    float native_at(int x, int y) const {
        uint64_t h = Rng::mix(slide_seed ^ 0x9a3cULL, (static_cast<uint64_t>(static_cast<uint32_t>(x)) << 32) |
                                                          static_cast<uint32_t>(y));
        float n = noise_eff * (static_cast<float>(h >> 40) * 0x1.0p-23f - 1.0f); // [-amp, amp)
        float v;
        if (inside_tissue(x, y)) {
            v = tissue_eff + wave_x[static_cast<size_t>(x)] + wave_y[static_cast<size_t>(y)] +
                fine_x[static_cast<size_t>(x)] + fine_y[static_cast<size_t>(y)] + n;
            if (region_grid > 0)
                v += region_off[static_cast<size_t>(y / cfg.region_cell) * region_grid +
                                static_cast<size_t>(x / cfg.region_cell)];
            if (blob_grid > 0 && blob_cell[static_cast<size_t>(y / cfg.region_cell) * blob_grid +
                                           static_cast<size_t>(x / cfg.region_cell)]) {
                int t = blob_axis == 0 ? y : x;
                v += ((t >> 4) & 1) ? -blob_eff : blob_eff; // +eff on even half-periods
            }
        } else {
            v = bg_eff + n;
        }
        return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    }

    void fill_native(std::vector<float>& buf) const; // row-major side*side
};

// class label -> (coarse layout id, fine texture id)
inline int coarse_id_of(int label) { return label >> 1; }
inline int fine_id_of(int label) { return label & 1; }

Slide synth_slide(uint64_t data_seed, int slide_id, int label, const GenConfig& cfg);

// ------------------------------------------------------------------ patches

struct PatchId {
    int slide_id = 0;
    int anchor_idx = 0;
    int level = 5;
    int row = 0, col = 0; // grid position inside the anchor at this level
    bool operator==(const PatchId&) const = default;
};

// quadtree over one anchor: 1 + 4 + 16 + 64 members in level-major order,
// row-major inside each level
struct PatchIndex {
    PatchId anchor;
    std::vector<PatchId> members;
    std::vector<int> parent;                // index into members, -1 for the anchor
    std::vector<std::vector<int>> children; // indices into members
};

PatchIndex expand_children(const PatchId& anchor);
int member_offset(int level);                       // 0, 1, 5, 21
int member_index(int level, int row, int col);      // flat index into members

// native-pixel footprint of a patch, relative to its anchor's origin
struct Footprint {
    int x0, y0, side;
};
Footprint patch_footprint(const PatchId& pid);

// ------------------------------------------------------------------ anchors

struct Anchor {
    int idx = 0;
    int cell_x = 0, cell_y = 0; // aligned anchor-grid cell, units of 4096 native px
    float coverage = 0.0f;
};

struct AnchorSample {
    std::vector<Anchor> anchors;
    int requested = 0;
    int eligible = 0; // cells meeting the coverage bar; shortfall when < requested
};

// --------------------------------------------------------------- tissue mask

// 256-bin histogram split maximizing between-class variance; ties and the
// degenerate single-mass case resolve to the lowest level
int otsu_threshold(const std::vector<int64_t>& hist);

struct TissueMask {
    int side = 0; // 5x-equivalent side = native/8
    std::vector<uint8_t> mask;
    int otsu_level = 0;
    int64_t tissue_count = 0;
};

// 8x8 block means of the native raster (the 5x-equivalent intensity image)
std::vector<float> slide_mip8(const Slide& slide);
TissueMask tissue_mask_from_mip8(const std::vector<float>& mip8, int side);
TissueMask tissue_mask(const Slide& slide);

AnchorSample sample_anchors(const Slide& slide, const TissueMask& mask, int n_anchors,
                            float min_coverage, uint64_t seed);

// ------------------------------------------------------------------- pixels

// area-average resample of the patch footprint to 512x512; at 40x this is a
// bit-exact native crop
std::vector<float> read_patch(const Slide& slide, const Anchor& anchor, const PatchId& pid);

// one-shot area means by `factor`, double accumulation per block
std::vector<float> block_mean(const std::vector<float>& in, int in_side, int factor);

// fixed 8x pool of a 512x512 patch to 64x64, the same rounding the staged
// pyramid uses, so cached features match read_patch + pool bit for bit
void pool8(const float* patch512, float* out64);

// staged downsamples of one slide; pooled patch features are crops + pool8
struct SlidePyramid {
    int side = 0;
    std::vector<float> native; // side^2
    std::vector<float> a2;     // (side/2)^2, feeds 20x patches
    std::vector<float> a4;     // (side/4)^2, feeds 10x patches
    std::vector<float> a8;     // (side/8)^2, feeds 5x patches and the tissue mask
};
SlidePyramid build_pyramid(const Slide& slide);

// 64x64 pooled intensity feature of one patch, bit-exact with
// pool8(read_patch(...)) over the staged pyramid
std::array<float, kPooledSide * kPooledSide> pooled_patch(const SlidePyramid& pyr,
                                                          const Anchor& anchor,
                                                          const PatchId& pid);

// ------------------------------------------------------------------ file io

void save_raster(const std::string& path, int h, int w, const float* data);
std::vector<float> load_raster(const std::string& path, int& h, int& w);

void save_patch_index(const std::string& path, uint64_t config_hash,
                      const std::vector<PatchIndex>& indices);
std::vector<PatchIndex> load_patch_index(const std::string& path, uint64_t expect_hash);

} // namespace mralign
