#include "mralign/slide.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mralign {

int level_index(int level) {
    switch (level) {
        case 5: return 0;
        case 10: return 1;
        case 20: return 2;
        case 40: return 3;
    }
    throw std::invalid_argument("level_index: unknown level " + std::to_string(level));
}

// ------------------------------------------------------------------- slides

Slide synth_slide(uint64_t data_seed, int slide_id, int label, const GenConfig& cfg) {
    if (cfg.n_classes < 1) throw std::invalid_argument("synth_slide: n_classes must be >= 1");
    if (label < 0 || label >= cfg.n_classes)
        throw std::invalid_argument("synth_slide: label " + std::to_string(label) + " outside 0.." +
                                    std::to_string(cfg.n_classes - 1));
    if (cfg.side_multiple < 1) throw std::invalid_argument("synth_slide: side_multiple must be >= 1");
    if (cfg.fine_period <= 0 || 64 % cfg.fine_period != 0)
        throw std::invalid_argument("synth_slide: fine_period must divide 64, got " +
                                    std::to_string(cfg.fine_period));
    if (cfg.region_cell <= 0 || cfg.region_cell % 64 != 0 || kAnchorNative % cfg.region_cell != 0)
        throw std::invalid_argument("synth_slide: region_cell must be a multiple of 64 dividing " +
                                    std::to_string(kAnchorNative) + ", got " +
                                    std::to_string(cfg.region_cell));
    if (cfg.blob_density < 0.0f || cfg.blob_density > 1.0f)
        throw std::invalid_argument("synth_slide: blob_density must be in [0, 1], got " +
                                    std::to_string(cfg.blob_density));

    Slide s;
    s.slide_id = slide_id;
    s.label = label;
    s.cfg = cfg;
    s.slide_seed = Rng::mix(data_seed, static_cast<uint64_t>(slide_id) + 0x51deULL);
    s.side = kAnchorNative * cfg.side_multiple;

    Rng rng(s.slide_seed);
    float half = static_cast<float>(s.side) * 0.5f;
    s.cx = half + static_cast<float>(rng.next_range(-0.02, 0.02)) * static_cast<float>(s.side);
    s.cy = half + static_cast<float>(rng.next_range(-0.02, 0.02)) * static_cast<float>(s.side);
    s.rx = half * static_cast<float>(rng.next_range(0.96, 1.08));
    s.ry = half * static_cast<float>(rng.next_range(0.96, 1.08));
    float amp_jitter = static_cast<float>(rng.next_range(0.85, 1.15));
    float phase_x = static_cast<float>(rng.next_range(-0.2, 0.2));
    float phase_y = static_cast<float>(rng.next_range(-0.2, 0.2));

    float a = cfg.texture_amp;
    s.bg_eff = cfg.bg_level;
    s.tissue_eff = cfg.bg_level + (cfg.tissue_base - cfg.bg_level) * a;
    s.noise_eff = cfg.noise_amp * a;

    int coarse = coarse_id_of(label);
    int fine = fine_id_of(label);
    float period = static_cast<float>(coarse == 0 ? cfg.coarse_period_a : cfg.coarse_period_b);
    float camp = cfg.coarse_amp * a * amp_jitter;
    float famp = cfg.fine_amp * a * amp_jitter;

    s.wave_x.resize(static_cast<size_t>(s.side));
    s.wave_y.resize(static_cast<size_t>(s.side));
    s.fine_x.assign(static_cast<size_t>(s.side), 0.0f);
    s.fine_y.assign(static_cast<size_t>(s.side), 0.0f);
    const float two_pi = 6.2831853f;
    int half_period = cfg.fine_period / 2;
    for (int i = 0; i < s.side; ++i) {
        float fi = static_cast<float>(i);
        s.wave_x[static_cast<size_t>(i)] = camp * std::sin(two_pi * fi / period + phase_x);
        s.wave_y[static_cast<size_t>(i)] = camp * std::sin(two_pi * fi / period + phase_y);
        // aligned square wave: +amp on even half-periods, -amp on odd ones, so
        // any pooling window that spans whole periods sums to exactly zero
        float sq = ((i / half_period) % 2 == 0) ? famp : -famp;
        if (fine == 0)
            s.fine_y[static_cast<size_t>(i)] = sq;
        else
            s.fine_x[static_cast<size_t>(i)] = sq;
    }

    if (cfg.region_amp != 0.0f) {
        s.region_grid = s.side / cfg.region_cell;
        s.region_off.resize(static_cast<size_t>(s.region_grid) * s.region_grid);
        Rng roff(Rng::mix(s.slide_seed, 0x0ff5e7ULL));
        float ramp = cfg.region_amp * a;
        for (float& o : s.region_off)
            o = ramp * static_cast<float>(roff.next_range(-1.0, 1.0));
    }

    if (cfg.blob_amp != 0.0f) {
        s.blob_grid = s.side / cfg.region_cell;
        s.blob_axis = fine == 0 ? 0 : 1; // same axis the fine stripes use
        s.blob_eff = cfg.blob_amp * a * amp_jitter;
        s.blob_cell.resize(static_cast<size_t>(s.blob_grid) * s.blob_grid);
        Rng brng(Rng::mix(s.slide_seed, 0xb10bULL));
        for (auto& b : s.blob_cell)
            b = brng.next_range(0.0, 1.0) < static_cast<double>(cfg.blob_density) ? 1 : 0;
    }
    return s;
}

void Slide::fill_native(std::vector<float>& buf) const {
    buf.resize(static_cast<size_t>(side) * side);
    for (int y = 0; y < side; ++y) {
        float* row = buf.data() + static_cast<size_t>(y) * side;
        for (int x = 0; x < side; ++x) row[x] = native_at(x, y);
    }
}

// ------------------------------------------------------------------ patches

int member_offset(int level) {
    static constexpr std::array<int, 4> off = {0, 1, 5, 21};
    return off[static_cast<size_t>(level_index(level))];
}

int member_index(int level, int row, int col) {
    int li = level_index(level);
    int dim = 1 << li;
    if (row < 0 || row >= dim || col < 0 || col >= dim)
        throw std::invalid_argument("member_index: position (" + std::to_string(row) + "," +
                                    std::to_string(col) + ") outside level " + std::to_string(level));
    return member_offset(level) + row * dim + col;
}

PatchIndex expand_children(const PatchId& anchor) {
    if (anchor.level != 5 || anchor.row != 0 || anchor.col != 0)
        throw std::invalid_argument("expand_children: anchor must be a level-5 patch at (0,0)");
    PatchIndex idx;
    idx.anchor = anchor;
    idx.members.reserve(85);
    for (int li = 0; li < 4; ++li) {
        int dim = 1 << li;
        for (int r = 0; r < dim; ++r)
            for (int c = 0; c < dim; ++c)
                idx.members.push_back(PatchId{anchor.slide_id, anchor.anchor_idx, kLevels[static_cast<size_t>(li)], r, c});
    }
    idx.parent.assign(idx.members.size(), -1);
    idx.children.assign(idx.members.size(), {});
    for (size_t i = 0; i < idx.members.size(); ++i) {
        const PatchId& p = idx.members[i];
        if (p.level == 5) continue;
        int parent_level = kLevels[static_cast<size_t>(level_index(p.level) - 1)];
        int pi = member_index(parent_level, p.row / 2, p.col / 2);
        idx.parent[i] = pi;
        idx.children[static_cast<size_t>(pi)].push_back(static_cast<int>(i));
    }
    return idx;
}

Footprint patch_footprint(const PatchId& pid) {
    int li = level_index(pid.level);
    int side = kAnchorNative >> li;
    int dim = 1 << li;
    if (pid.row < 0 || pid.row >= dim || pid.col < 0 || pid.col >= dim)
        throw std::invalid_argument("patch_footprint: (" + std::to_string(pid.row) + "," +
                                    std::to_string(pid.col) + ") outside level " + std::to_string(pid.level));
    return Footprint{pid.col * side, pid.row * side, side};
}

// --------------------------------------------------------------------- otsu

int otsu_threshold(const std::vector<int64_t>& hist) {
    if (hist.size() != 256)
        throw std::invalid_argument("otsu_threshold: expected 256 bins, got " + std::to_string(hist.size()));
    int64_t total = 0;
    double weighted = 0.0;
    for (size_t i = 0; i < hist.size(); ++i) {
        if (hist[i] < 0) throw std::invalid_argument("otsu_threshold: negative bin count");
        total += hist[i];
        weighted += static_cast<double>(i) * static_cast<double>(hist[i]);
    }
    if (total == 0) throw std::invalid_argument("otsu_threshold: empty histogram");

    // maximize w0*w1*(mu0-mu1)^2 over split t: [0..t] vs [t+1..255]
    int best_t = 0;
    double best_var = -1.0;
    int64_t n0 = 0;
    double sum0 = 0.0;
    for (int t = 0; t < 256; ++t) {
        n0 += hist[static_cast<size_t>(t)];
        sum0 += static_cast<double>(t) * static_cast<double>(hist[static_cast<size_t>(t)]);
        int64_t n1 = total - n0;
        double var = 0.0; // one-sided splits carry zero between-class variance
        if (n0 > 0 && n1 > 0) {
            double mu0 = sum0 / static_cast<double>(n0);
            double mu1 = (weighted - sum0) / static_cast<double>(n1);
            var = static_cast<double>(n0) * static_cast<double>(n1) * (mu0 - mu1) * (mu0 - mu1);
        }
        if (var > best_var) { // strict >, ties keep the lowest level
            best_var = var;
            best_t = t;
        }
    }
    return best_t;
}

// --------------------------------------------------------------- tissue mask

std::vector<float> slide_mip8(const Slide& slide) {
    std::vector<float> native;
    slide.fill_native(native);
    return block_mean(native, slide.side, 8);
}

namespace {
int bin_of(float v) {
    int b = static_cast<int>(v * 256.0f);
    return b < 0 ? 0 : (b > 255 ? 255 : b);
}
} // namespace

TissueMask tissue_mask_from_mip8(const std::vector<float>& mip8, int side) {
    if (static_cast<size_t>(side) * side != mip8.size())
        throw std::invalid_argument("tissue_mask: mip size " + std::to_string(mip8.size()) +
                                    " does not match side " + std::to_string(side));
    std::vector<int64_t> hist(256, 0);
    for (float v : mip8) ++hist[static_cast<size_t>(bin_of(v))];
    TissueMask tm;
    tm.side = side;
    tm.otsu_level = otsu_threshold(hist);
    tm.mask.resize(mip8.size());
    for (size_t i = 0; i < mip8.size(); ++i) {
        // tissue is darker than background, so it sits at or below the split
        bool tissue = bin_of(mip8[i]) <= tm.otsu_level;
        tm.mask[i] = tissue ? 1 : 0;
        tm.tissue_count += tissue ? 1 : 0;
    }
    return tm;
}

TissueMask tissue_mask(const Slide& slide) {
    return tissue_mask_from_mip8(slide_mip8(slide), slide.side / 8);
}

AnchorSample sample_anchors(const Slide& slide, const TissueMask& mask, int n_anchors,
                            float min_coverage, uint64_t seed) {
    if (n_anchors < 0) throw std::invalid_argument("sample_anchors: negative n_anchors");
    if (mask.side != slide.side / 8)
        throw std::invalid_argument("sample_anchors: mask side " + std::to_string(mask.side) +
                                    " does not match slide side " + std::to_string(slide.side));
    int cells = slide.side / kAnchorNative;
    AnchorSample out;
    out.requested = n_anchors;

    std::vector<Anchor> eligible;
    for (int cy = 0; cy < cells; ++cy) {
        for (int cx = 0; cx < cells; ++cx) {
            int64_t covered = 0;
            int base_x = cx * kPatchSide, base_y = cy * kPatchSide;
            for (int y = 0; y < kPatchSide; ++y) {
                const uint8_t* row = mask.mask.data() + static_cast<size_t>(base_y + y) * mask.side + base_x;
                for (int x = 0; x < kPatchSide; ++x) covered += row[x];
            }
            float cov = static_cast<float>(covered) / static_cast<float>(kPatchSide * kPatchSide);
            if (cov >= min_coverage) eligible.push_back(Anchor{0, cx, cy, cov});
        }
    }
    out.eligible = static_cast<int>(eligible.size());

    Rng rng(Rng::mix(seed, 0xA2C0ULL));
    rng.shuffle(eligible);
    int take = std::min<int>(n_anchors, out.eligible);
    out.anchors.assign(eligible.begin(), eligible.begin() + take);
    for (int i = 0; i < take; ++i) out.anchors[static_cast<size_t>(i)].idx = i;
    return out;
}

// ------------------------------------------------------------------- pixels

std::vector<float> read_patch(const Slide& slide, const Anchor& anchor, const PatchId& pid) {
    Footprint fp = patch_footprint(pid);
    int ox = anchor.cell_x * kAnchorNative + fp.x0;
    int oy = anchor.cell_y * kAnchorNative + fp.y0;
    if (ox < 0 || oy < 0 || ox + fp.side > slide.side || oy + fp.side > slide.side)
        throw std::invalid_argument("read_patch: footprint escapes the slide raster");

    int s = fp.side / kPatchSide; // 8, 4, 2 or 1
    std::vector<float> out(static_cast<size_t>(kPatchSide) * kPatchSide);
    double inv = 1.0 / (static_cast<double>(s) * s);
    for (int py = 0; py < kPatchSide; ++py) {
        for (int px = 0; px < kPatchSide; ++px) {
            double acc = 0.0;
            int y0 = oy + py * s, x0 = ox + px * s;
            for (int sy = 0; sy < s; ++sy)
                for (int sx = 0; sx < s; ++sx) acc += slide.native_at(x0 + sx, y0 + sy);
            out[static_cast<size_t>(py) * kPatchSide + px] = static_cast<float>(acc * inv);
        }
    }
    return out;
}

std::vector<float> block_mean(const std::vector<float>& in, int in_side, int factor) {
    if (factor <= 0 || in_side % factor != 0)
        throw std::invalid_argument("block_mean: factor " + std::to_string(factor) +
                                    " does not divide side " + std::to_string(in_side));
    if (static_cast<size_t>(in_side) * in_side != in.size())
        throw std::invalid_argument("block_mean: buffer size mismatch");
    int out_side = in_side / factor;
    std::vector<float> out(static_cast<size_t>(out_side) * out_side);
    double inv = 1.0 / (static_cast<double>(factor) * factor);
    for (int oy = 0; oy < out_side; ++oy) {
        for (int ox = 0; ox < out_side; ++ox) {
            double acc = 0.0;
            for (int sy = 0; sy < factor; ++sy) {
                const float* row = in.data() + static_cast<size_t>(oy * factor + sy) * in_side +
                                   static_cast<size_t>(ox) * factor;
                for (int sx = 0; sx < factor; ++sx) acc += row[sx];
            }
            out[static_cast<size_t>(oy) * out_side + ox] = static_cast<float>(acc * inv);
        }
    }
    return out;
}

void pool8(const float* patch512, float* out64) {
    for (int oy = 0; oy < kPooledSide; ++oy) {
        for (int ox = 0; ox < kPooledSide; ++ox) {
            double acc = 0.0;
            for (int sy = 0; sy < 8; ++sy) {
                const float* row = patch512 + static_cast<size_t>(oy * 8 + sy) * kPatchSide + ox * 8;
                for (int sx = 0; sx < 8; ++sx) acc += row[sx];
            }
            out64[static_cast<size_t>(oy) * kPooledSide + ox] = static_cast<float>(acc / 64.0);
        }
    }
}

SlidePyramid build_pyramid(const Slide& slide) {
    SlidePyramid pyr;
    pyr.side = slide.side;
    slide.fill_native(pyr.native);
    pyr.a2 = block_mean(pyr.native, slide.side, 2);
    pyr.a4 = block_mean(pyr.native, slide.side, 4);
    pyr.a8 = block_mean(pyr.native, slide.side, 8);
    return pyr;
}

std::array<float, kPooledSide * kPooledSide> pooled_patch(const SlidePyramid& pyr,
                                                          const Anchor& anchor,
                                                          const PatchId& pid) {
    int li = level_index(pid.level);
    int s = 8 >> li; // read_patch resample factor, also the stage downsample
    const std::vector<float>* stage = nullptr;
    switch (li) {
        case 0: stage = &pyr.a8; break;
        case 1: stage = &pyr.a4; break;
        case 2: stage = &pyr.a2; break;
        default: stage = &pyr.native; break;
    }
    int stage_side = pyr.side / s;
    Footprint fp = patch_footprint(pid);
    // patch footprint in stage coordinates is always 512x512
    int ox = (anchor.cell_x * kAnchorNative + fp.x0) / s;
    int oy = (anchor.cell_y * kAnchorNative + fp.y0) / s;
    if (ox < 0 || oy < 0 || ox + kPatchSide > stage_side || oy + kPatchSide > stage_side)
        throw std::invalid_argument("pooled_patch: footprint escapes the slide raster");

    std::vector<float> crop(static_cast<size_t>(kPatchSide) * kPatchSide);
    for (int y = 0; y < kPatchSide; ++y) {
        const float* src = stage->data() + static_cast<size_t>(oy + y) * stage_side + ox;
        std::copy(src, src + kPatchSide, crop.begin() + static_cast<long>(y) * kPatchSide);
    }
    std::array<float, kPooledSide * kPooledSide> out{};
    pool8(crop.data(), out.data());
    return out;
}

// ------------------------------------------------------------------ file io

void save_raster(const std::string& path, int h, int w, const float* data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_raster: cannot open " + path);
    f << "mralign-raster v1 " << h << " " << w << " f32le\n";
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(float)) * h * w);
    if (!f) throw std::runtime_error("save_raster: short write to " + path);
}

std::vector<float> load_raster(const std::string& path, int& h, int& w) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_raster: cannot open " + path);
    std::string magic, version, dtype;
    f >> magic >> version >> h >> w >> dtype;
    if (magic != "mralign-raster" || version != "v1" || dtype != "f32le" || h <= 0 || w <= 0)
        throw std::runtime_error("load_raster: bad header in " + path);
    f.get(); // newline
    std::vector<float> data(static_cast<size_t>(h) * w);
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(sizeof(float)) * h * w);
    if (f.gcount() != static_cast<std::streamsize>(sizeof(float)) * h * w)
        throw std::runtime_error("load_raster: truncated payload in " + path);
    return data;
}

void save_patch_index(const std::string& path, uint64_t config_hash,
                      const std::vector<PatchIndex>& indices) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_patch_index: cannot open " + path);
    char head[64];
    std::snprintf(head, sizeof head, "# mralign-patch-index v1 config=%016llx\n",
                  static_cast<unsigned long long>(config_hash));
    f << head;
    for (const PatchIndex& idx : indices) {
        for (size_t i = 0; i < idx.members.size(); ++i) {
            const PatchId& p = idx.members[i];
            f << p.slide_id << ' ' << p.anchor_idx << ' ' << p.level << ' ' << p.row << ' ' << p.col << ' ';
            int pi = idx.parent[i];
            if (pi < 0) {
                f << "-\n";
            } else {
                const PatchId& pp = idx.members[static_cast<size_t>(pi)];
                f << pp.level << ':' << pp.row << ':' << pp.col << '\n';
            }
        }
    }
    if (!f) throw std::runtime_error("save_patch_index: short write to " + path);
}

std::vector<PatchIndex> load_patch_index(const std::string& path, uint64_t expect_hash) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_patch_index: cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("load_patch_index: empty file " + path);
    char expect_head[64];
    std::snprintf(expect_head, sizeof expect_head, "# mralign-patch-index v1 config=%016llx",
                  static_cast<unsigned long long>(expect_hash));
    if (line != expect_head)
        throw std::runtime_error("load_patch_index: header mismatch, file has '" + line + "'");

    std::vector<PatchIndex> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        PatchId p;
        char parent_ref[64];
        if (std::sscanf(line.c_str(), "%d %d %d %d %d %63s", &p.slide_id, &p.anchor_idx, &p.level,
                        &p.row, &p.col, parent_ref) != 6)
            throw std::runtime_error("load_patch_index: bad line '" + line + "'");
        if (p.level == 5) {
            out.push_back(PatchIndex{});
            out.back().anchor = p;
        }
        if (out.empty()) throw std::runtime_error("load_patch_index: member before its anchor");
        out.back().members.push_back(p);
    }
    // rebuild the tree and sanity-check the stored order
    for (PatchIndex& idx : out) {
        PatchIndex fresh = expand_children(idx.anchor);
        if (fresh.members != idx.members)
            throw std::runtime_error("load_patch_index: member order does not match the quadtree layout");
        idx.parent = std::move(fresh.parent);
        idx.children = std::move(fresh.children);
    }
    return out;
}

} // namespace mralign
