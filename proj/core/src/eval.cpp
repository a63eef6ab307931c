#include "mralign/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

#include "mralign/losses.hpp"

namespace mralign {

// ------------------------------------------------------------ text side

KeywordDictionary build_dictionary(const ModelParams& p, const Vocabulary& vocab) {
    if (vocab.size() != p.cfg.vocab_size)
        throw std::invalid_argument("build_dictionary: vocabulary size " +
                                    std::to_string(vocab.size()) + " != model vocab " +
                                    std::to_string(p.cfg.vocab_size));
    NoGradGuard ng;
    std::vector<int> ids(static_cast<size_t>(vocab.size()));
    std::iota(ids.begin(), ids.end(), 0);
    return KeywordDictionary{vocab.size(), text_encode_rows(p, ids)};
}

PromptSet class_prompts(const Vocabulary& vocab) {
    PromptSet ps;
    ps.n_classes = vocab.n_classes;
    ps.templates.resize(static_cast<size_t>(vocab.n_classes));
    for (int c = 0; c < vocab.n_classes; ++c) {
        std::vector<int> coarse = vocab.coarse_group(c);
        std::vector<int> fine = vocab.fine_group(c);
        std::vector<int> both = coarse;
        both.insert(both.end(), fine.begin(), fine.end());
        ps.templates[static_cast<size_t>(c)] = {both, coarse, fine};
    }
    return ps;
}

static Tensor mean_row(const Tensor& m) {
    int rows = m.dim(0);
    return matmul(Tensor::full({1, rows}, 1.0f / static_cast<float>(rows)), m);
}

static Tensor mean_of_rows(const std::vector<Tensor>& rows) {
    Tensor acc = rows[0];
    for (size_t i = 1; i < rows.size(); ++i) acc = add(acc, rows[i]);
    return scale(acc, 1.0f / static_cast<float>(rows.size()));
}

Tensor prompt_features(const ModelParams& p, const PromptSet& prompts, bool ensemble) {
    if (prompts.n_classes < 1) throw std::invalid_argument("prompt_features: no classes");
    NoGradGuard ng;
    std::vector<Tensor> class_rows;
    for (int c = 0; c < prompts.n_classes; ++c) {
        const auto& tpls = prompts.templates[static_cast<size_t>(c)];
        if (tpls.empty())
            throw std::invalid_argument("prompt_features: class " + std::to_string(c) +
                                        " has no templates");
        std::vector<Tensor> feats;
        size_t n_tpl = ensemble ? tpls.size() : 1; // no ensembling: first template only
        for (size_t t = 0; t < n_tpl; ++t) {
            const auto& ids = tpls[t];
            if (ids.empty())
                throw std::invalid_argument("prompt_features: empty template for class " +
                                            std::to_string(c));
            feats.push_back(l2_normalize(mean_row(text_encode_rows(p, ids))));
        }
        class_rows.push_back(l2_normalize(mean_of_rows(feats)));
    }
    return concat(class_rows, 0);
}

// ------------------------------------------------------------ tile scoring

static TileScore score_against_prompts(const Tensor& unit_row, const Tensor& prompts) {
    Tensor s = softmax(matmul(unit_row, transpose(prompts)), 1);
    TileScore out;
    out.probs.resize(static_cast<size_t>(s.dim(1)));
    for (int j = 0; j < s.dim(1); ++j) {
        out.probs[static_cast<size_t>(j)] = s.at(0, j);
        if (s.at(0, j) > s.at(0, out.pred)) out.pred = j;
    }
    return out;
}

static void check_tile_inputs(const Tensor& v_row, const Tensor& prompts) {
    if (v_row.ndim() != 2 || v_row.dim(0) != 1)
        throw std::invalid_argument("classify_tile: visual feature must be [1, d], got " +
                                    shape_str(v_row.shape()));
    if (prompts.ndim() != 2 || prompts.dim(1) != v_row.dim(1))
        throw std::invalid_argument("classify_tile: prompts " + shape_str(prompts.shape()) +
                                    " do not match feature width " + std::to_string(v_row.dim(1)));
}

TileScore classify_tile_guided(const ModelParams& p, const Tensor& v_row,
                               const KeywordDictionary& dict, const Tensor& prompts, int k_o) {
    check_tile_inputs(v_row, prompts);
    if (k_o < 1) throw std::invalid_argument("classify_tile_guided: k_o must be >= 1");
    NoGradGuard ng;
    PositiveSet sel = select_topk_positive(v_row, dict.rows, k_o);
    FusedRep f = fuse(p, v_row, take_rows(dict.rows, sel.rows[0]), k_o);
    return score_against_prompts(l2_normalize(f.z), prompts);
}

TileScore classify_tile_classical(const Tensor& v_row, const Tensor& prompts) {
    check_tile_inputs(v_row, prompts);
    NoGradGuard ng;
    return score_against_prompts(l2_normalize(v_row), prompts);
}

WsiResult classify_wsi(const std::vector<TileScore>& tiles, int n_classes, int top_k) {
    if (tiles.empty()) throw std::invalid_argument("classify_wsi: no tiles");
    if (n_classes < 1 || top_k < 1)
        throw std::invalid_argument("classify_wsi: n_classes and top_k must be >= 1");
    WsiResult out;
    out.class_scores.resize(static_cast<size_t>(n_classes), 0.0);
    std::vector<double> col(tiles.size());
    for (int c = 0; c < n_classes; ++c) {
        for (size_t i = 0; i < tiles.size(); ++i) {
            if (static_cast<int>(tiles[i].probs.size()) != n_classes)
                throw std::invalid_argument("classify_wsi: tile has " +
                                            std::to_string(tiles[i].probs.size()) +
                                            " class probs, expected " + std::to_string(n_classes));
            col[i] = tiles[i].probs[static_cast<size_t>(c)];
        }
        std::sort(col.begin(), col.end(), std::greater<>());
        int take = std::min<int>(top_k, static_cast<int>(col.size()));
        double s = 0.0;
        for (int i = 0; i < take; ++i) s += col[static_cast<size_t>(i)];
        out.class_scores[static_cast<size_t>(c)] = s;
        if (s > out.class_scores[static_cast<size_t>(out.pred)]) out.pred = c;
    }
    return out;
}

std::vector<int> backproject_scores(int native_side, int cell, int n_classes,
                                    const std::vector<std::pair<Footprint, TileScore>>& tiles) {
    if (native_side < 1 || cell < 1 || native_side % cell != 0)
        throw std::invalid_argument("backproject_scores: cell " + std::to_string(cell) +
                                    " must divide side " + std::to_string(native_side));
    if (n_classes < 1) throw std::invalid_argument("backproject_scores: n_classes must be >= 1");
    int grid = native_side / cell;
    std::vector<std::vector<double>> sums(static_cast<size_t>(grid) * grid,
                                          std::vector<double>(static_cast<size_t>(n_classes), 0.0));
    std::vector<int> counts(static_cast<size_t>(grid) * grid, 0);

    for (const auto& [fp, score] : tiles) {
        if (fp.side < 1 || fp.x0 < 0 || fp.y0 < 0 || fp.x0 + fp.side > native_side ||
            fp.y0 + fp.side > native_side)
            throw std::invalid_argument("backproject_scores: footprint (" + std::to_string(fp.x0) +
                                        "," + std::to_string(fp.y0) + ")+" +
                                        std::to_string(fp.side) + " outside side " +
                                        std::to_string(native_side));
        if (fp.x0 % cell != 0 || fp.y0 % cell != 0 || fp.side % cell != 0)
            throw std::invalid_argument("backproject_scores: footprint not aligned to cell " +
                                        std::to_string(cell));
        if (static_cast<int>(score.probs.size()) != n_classes)
            throw std::invalid_argument("backproject_scores: tile has " +
                                        std::to_string(score.probs.size()) +
                                        " class probs, expected " + std::to_string(n_classes));
        for (int gy = fp.y0 / cell; gy < (fp.y0 + fp.side) / cell; ++gy)
            for (int gx = fp.x0 / cell; gx < (fp.x0 + fp.side) / cell; ++gx) {
                size_t g = static_cast<size_t>(gy) * grid + gx;
                for (int c = 0; c < n_classes; ++c)
                    sums[g][static_cast<size_t>(c)] += score.probs[static_cast<size_t>(c)];
                ++counts[g];
            }
    }

    std::vector<int> out(static_cast<size_t>(grid) * grid, n_classes);
    for (size_t g = 0; g < out.size(); ++g) {
        if (counts[g] == 0) continue;
        int best = 0;
        for (int c = 1; c < n_classes; ++c)
            if (sums[g][static_cast<size_t>(c)] > sums[g][static_cast<size_t>(best)]) best = c;
        out[g] = best;
    }
    return out;
}

// ------------------------------------------------------------ metrics

std::vector<std::vector<int64_t>> confusion_matrix(const std::vector<int>& truth,
                                                   const std::vector<int>& pred, int n_classes) {
    if (truth.size() != pred.size())
        throw std::invalid_argument("confusion_matrix: " + std::to_string(truth.size()) +
                                    " truths vs " + std::to_string(pred.size()) + " predictions");
    std::vector<std::vector<int64_t>> m(static_cast<size_t>(n_classes),
                                        std::vector<int64_t>(static_cast<size_t>(n_classes), 0));
    for (size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= n_classes || pred[i] < 0 || pred[i] >= n_classes)
            throw std::invalid_argument("confusion_matrix: label out of range at row " +
                                        std::to_string(i));
        ++m[static_cast<size_t>(truth[i])][static_cast<size_t>(pred[i])];
    }
    return m;
}

static void check_confusion(const std::vector<std::vector<int64_t>>& m) {
    if (m.empty()) throw std::invalid_argument("metrics: empty confusion matrix");
    for (const auto& row : m) {
        if (row.size() != m.size())
            throw std::invalid_argument("metrics: confusion matrix must be square");
        for (int64_t v : row)
            if (v < 0) throw std::invalid_argument("metrics: negative confusion count");
    }
}

double weighted_f1(const std::vector<std::vector<int64_t>>& confusion) {
    check_confusion(confusion);
    size_t n = confusion.size();
    int64_t total = 0;
    for (const auto& row : confusion) for (int64_t v : row) total += v;
    if (total == 0) throw std::invalid_argument("weighted_f1: empty confusion matrix");
    double out = 0.0;
    for (size_t c = 0; c < n; ++c) {
        int64_t support = 0, predicted = 0;
        for (size_t j = 0; j < n; ++j) {
            support += confusion[c][j];
            predicted += confusion[j][c];
        }
        if (support == 0) continue;
        double tp = static_cast<double>(confusion[c][c]);
        double prec = predicted > 0 ? tp / static_cast<double>(predicted) : 0.0;
        double rec = tp / static_cast<double>(support);
        double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        out += f1 * static_cast<double>(support) / static_cast<double>(total);
    }
    return out;
}

double balanced_accuracy(const std::vector<std::vector<int64_t>>& confusion) {
    check_confusion(confusion);
    double sum = 0.0;
    int classes = 0;
    for (size_t c = 0; c < confusion.size(); ++c) {
        int64_t support = 0;
        for (int64_t v : confusion[c]) support += v;
        if (support == 0) continue;
        sum += static_cast<double>(confusion[c][c]) / static_cast<double>(support);
        ++classes;
    }
    if (classes == 0) throw std::invalid_argument("balanced_accuracy: no class has support");
    return sum / static_cast<double>(classes);
}

// ------------------------------------------------------------ harness

EvalResult evaluate(const ModelParams& p, const Dataset& data, const EvalConfig& cfg,
                    std::vector<TileRecord>* records) {
    if (data.anchors.empty()) throw std::invalid_argument("evaluate: empty dataset");
    if (cfg.tiles_per_anchor < 1)
        throw std::invalid_argument("evaluate: tiles_per_anchor must be >= 1");
    NoGradGuard ng;

    KeywordDictionary dict = build_dictionary(p, data.vocab);
    Tensor prompts = prompt_features(p, class_prompts(data.vocab), cfg.prompt_ensemble);
    int n_classes = data.vocab.n_classes;
    float dark = 0.5f * (data.cfg.gen.tissue_base + data.cfg.gen.bg_level);

    std::vector<int> truth, pred;
    std::map<int, std::pair<int, std::vector<TileScore>>> slides; // id -> (label, tiles)

    for (size_t a = 0; a < data.anchors.size(); ++a) {
        const AnchorData& ad = data.anchors[a];
        std::vector<int> rows = included_members(ad.index, cfg.levels);
        std::vector<int> eligible;
        for (int r : rows) {
            const auto& px = ad.pooled[static_cast<size_t>(r)];
            int covered = 0;
            for (float v : px) covered += v < dark;
            if (static_cast<float>(covered) >= cfg.min_tissue_fraction * static_cast<float>(px.size()))
                eligible.push_back(r);
        }
        if (eligible.empty()) continue;
        Rng rng(Rng::mix(Rng::mix(cfg.seed, 0xe7a1ULL), static_cast<uint64_t>(a)));
        rng.shuffle(eligible);
        if (static_cast<int>(eligible.size()) > cfg.tiles_per_anchor)
            eligible.resize(static_cast<size_t>(cfg.tiles_per_anchor));

        int t = static_cast<int>(eligible.size());
        std::vector<float> flat;
        flat.reserve(static_cast<size_t>(t) * kPooledSide * kPooledSide);
        for (int r : eligible) {
            const auto& f = ad.pooled[static_cast<size_t>(r)];
            flat.insert(flat.end(), f.begin(), f.end());
        }
        Tensor V = encode_pooled(p, Tensor::from_vec({t, kPooledSide * kPooledSide}, std::move(flat)));
        for (int i = 0; i < t; ++i) {
            Tensor v = slice(V, 0, i, 1);
            TileScore s = cfg.guided ? classify_tile_guided(p, v, dict, prompts, cfg.k_o)
                                     : classify_tile_classical(v, prompts);
            truth.push_back(ad.label);
            pred.push_back(s.pred);
            if (records)
                records->push_back(TileRecord{
                    ad.slide_id, ad.index.anchor.anchor_idx, ad.label,
                    patch_footprint(ad.index.members[static_cast<size_t>(eligible[static_cast<size_t>(i)])]), s});
            auto& entry = slides[ad.slide_id];
            entry.first = ad.label;
            entry.second.push_back(std::move(s));
        }
    }
    if (truth.empty()) throw std::runtime_error("evaluate: no eligible tiles at the chosen levels");

    EvalResult out;
    out.n_tiles = static_cast<int>(truth.size());
    out.n_slides = static_cast<int>(slides.size());
    out.tile_confusion = confusion_matrix(truth, pred, n_classes);
    out.tile_weighted_f1 = weighted_f1(out.tile_confusion);
    out.tile_balanced_acc = balanced_accuracy(out.tile_confusion);

    for (int k : cfg.wsi_top_k) {
        std::vector<int> st, sp;
        for (const auto& [sid, entry] : slides) {
            st.push_back(entry.first);
            sp.push_back(classify_wsi(entry.second, n_classes, k).pred);
        }
        out.wsi_f1_by_k[k] = weighted_f1(confusion_matrix(st, sp, n_classes));
    }
    return out;
}

// ------------------------------------------------------------ ablations

std::vector<AblationArm> loss_combo_arms(const TrainConfig& base) {
    std::vector<AblationArm> arms;
    auto mk = [&](const char* name, bool kw, bool cross) {
        TrainConfig c = base;
        c.enable_cvta = kw;
        c.enable_mrtva = cross;
        arms.push_back(AblationArm{"loss", name, c});
    };
    mk("base", false, false);
    mk("base+keyword", true, false);
    mk("base+cross_res", false, true);
    mk("full", true, true);
    return arms;
}

std::vector<AblationArm> hierarchy_arms(const TrainConfig& base) {
    std::vector<AblationArm> arms;
    TrainConfig on = base;
    on.enable_parent_child = true;
    arms.push_back(AblationArm{"hierarchy", "parent_child", on});
    TrainConfig off = base;
    off.enable_parent_child = false;
    arms.push_back(AblationArm{"hierarchy", "level_pairs", off});
    return arms;
}

std::vector<AblationArm> resolution_arms(const TrainConfig& base) {
    std::vector<AblationArm> arms;
    auto mk = [&](const char* name, std::vector<int> levels) {
        TrainConfig c = base;
        c.resolution_subset = std::move(levels);
        arms.push_back(AblationArm{"resolution", name, c});
    };
    mk("5-10", {5, 10});
    mk("20-40", {20, 40});
    mk("5-10-20", {5, 10, 20});
    mk("10-20-40", {10, 20, 40});
    mk("5-10-20-40", {5, 10, 20, 40});
    return arms;
}

std::vector<AblationArm> top_k_arms(const TrainConfig& base, const std::vector<int>& ks) {
    if (ks.empty()) throw std::invalid_argument("top_k_arms: empty k list");
    std::vector<AblationArm> arms;
    for (int k : ks) {
        TrainConfig c = base;
        c.k_o = k;
        arms.push_back(AblationArm{"top_k", "k" + std::to_string(k), c});
    }
    return arms;
}

ArmResult run_arm(const AblationArm& arm, const Dataset& train_data, const Dataset& eval_data,
                  const EvalConfig& eval_base) {
    Trainer t(arm.cfg, train_data);
    t.run();
    EvalConfig e = eval_base;
    e.levels = arm.cfg.resolution_subset;
    e.k_o = arm.cfg.k_o;
    EvalResult r = evaluate(t.params(), eval_data, e);
    ArmResult out;
    out.axis = arm.axis;
    out.name = arm.name;
    out.seed = arm.cfg.seed;
    out.tile_weighted_f1 = r.tile_weighted_f1;
    out.tile_balanced_acc = r.tile_balanced_acc;
    out.first_total = t.records().front().losses.total;
    out.last_total = t.records().back().losses.total;
    return out;
}

std::string format_arm_table(const std::vector<ArmResult>& rows) {
    std::string out = "axis        arm             seed   tile_f1  tile_ba  first_loss  last_loss\n";
    char line[160];
    for (const ArmResult& r : rows) {
        std::snprintf(line, sizeof(line), "%-11s %-15s %-6llu %8.4f %8.4f %11.4f %10.4f\n",
                      r.axis.c_str(), r.name.c_str(), static_cast<unsigned long long>(r.seed),
                      r.tile_weighted_f1, r.tile_balanced_acc, r.first_total, r.last_total);
        out += line;
    }
    return out;
}

// ------------------------------------------------------------ presets

TrainConfig smoke_preset(uint64_t seed) {
    TrainConfig c;
    c.model.vocab_size = 40;
    c.batch_size = 4;
    c.k_o = 5;
    c.lr_peak = 3e-3f;
    c.warmup_steps = 10;
    c.queue_capacity = 32;
    c.seed = seed;
    c.max_steps = 100;
    c.data.gen.n_classes = 2;
    c.data.n_slides = 16;
    c.data.anchors_per_slide = 1;
    c.data.data_seed = Rng::mix(seed, 0x53ed5ULL);
    return c;
}

TrainConfig bench_preset(uint64_t seed, int train_slides) {
    TrainConfig c;
    c.model.vocab_size = 64;
    c.batch_size = 4;
    c.k_o = 9;
    c.lr_peak = 3e-3f;
    c.warmup_steps = 10;
    c.queue_capacity = 64;
    c.seed = seed;
    c.max_steps = 150;
    c.data.gen.n_classes = 4;
    c.data.n_slides = train_slides;
    c.data.anchors_per_slide = 1;
    c.data.data_seed = Rng::mix(seed, 0xda7aULL);
    return c;
}

DataConfig bench_eval_data(const TrainConfig& bench, int eval_slides) {
    DataConfig d = bench.data;
    d.n_slides = eval_slides;
    d.data_seed = Rng::mix(bench.data.data_seed, 0xe7a1da7aULL);
    return d;
}

} // namespace mralign
