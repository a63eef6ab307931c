#include "mralign/runs.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

namespace fs = std::filesystem;

namespace mralign {

namespace {

std::string hex16(uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << s;
    if (!out) throw std::runtime_error("write failed: " + p.string());
}

void write_pgm(const fs::path& p, const std::vector<float>& img, int side) {
    if (static_cast<size_t>(side) * static_cast<size_t>(side) != img.size())
        throw std::invalid_argument("write_pgm: " + std::to_string(img.size()) +
                                    " pixels for side " + std::to_string(side));
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << "P5\n" << side << " " << side << "\n255\n";
    std::vector<unsigned char> bytes(img.size());
    for (size_t i = 0; i < img.size(); ++i) {
        float v = img[i] < 0.0f ? 0.0f : (img[i] > 1.0f ? 1.0f : img[i]);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + p.string());
}

// a dataset directory is usable iff its manifest exists, came from gen-data,
// hashes to cfg's data section, and still lists only files that exist
RunManifest require_dataset(const std::string& dir, const DataConfig& want) {
    fs::path mp = fs::path(dir) / "manifest.txt";
    if (!fs::exists(mp)) throw std::runtime_error("dataset: missing manifest " + mp.string());
    RunManifest m = load_manifest(mp.string());
    if (m.command != "gen-data")
        throw std::runtime_error("dataset: manifest at " + mp.string() + " is from '" +
                                 m.command + "', expected gen-data");
    if (m.config_hash != data_hash(want))
        throw std::runtime_error("dataset: data hash mismatch: manifest " + hex16(m.config_hash) +
                                 " vs config " + hex16(data_hash(want)));
    for (const auto& [kind, rel] : m.files)
        if (!fs::exists(fs::path(dir) / rel))
            throw std::runtime_error("dataset: manifest lists missing " + kind + " file " + rel);
    return m;
}

// gen-data's post-write recount: quadtree shape re-derived from each index
void revalidate_index(const PatchIndex& index) {
    if (index.members.size() != 85)
        throw std::runtime_error("gen-data: index has " + std::to_string(index.members.size()) +
                                 " members, expected 85");
    std::map<int, int> hist;
    for (const PatchId& m : index.members) ++hist[m.level];
    if (hist != std::map<int, int>{{5, 1}, {10, 4}, {20, 16}, {40, 64}})
        throw std::runtime_error("gen-data: index level histogram is not {1,4,16,64}");
    std::vector<int> all(index.members.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    if (hierarchy_edges(index, all).size() != 84)
        throw std::runtime_error("gen-data: index does not have 84 parent-child edges");
}

} // namespace

GenDataOutput cmd_gen_data(const TrainConfig& cfg, const std::string& out_dir) {
    validate(cfg);
    if (out_dir.empty()) throw std::invalid_argument("gen-data: empty output directory");
    Dataset ds = build_dataset(cfg.data);

    fs::create_directories(fs::path(out_dir) / "slides");
    RunManifest m;
    m.command = "gen-data";
    m.config_hash = data_hash(cfg.data);
    m.seed = cfg.data.data_seed;

    save_config((fs::path(out_dir) / "config.txt").string(), cfg);
    m.files.emplace_back("config", "config.txt");

    for (int sid = 0; sid < cfg.data.n_slides; ++sid) {
        Slide slide = synth_slide(cfg.data.data_seed, sid, sid % cfg.data.gen.n_classes,
                                  cfg.data.gen);
        char name[48];
        std::snprintf(name, sizeof(name), "slides/slide_%04d.pgm", sid);
        write_pgm(fs::path(out_dir) / name, slide_mip8(slide), slide.side / 8);
        m.files.emplace_back("slide", name);
    }

    std::string captions, index_txt;
    char line[160];
    for (size_t a = 0; a < ds.anchors.size(); ++a) {
        const AnchorData& ad = ds.anchors[a];
        revalidate_index(ad.index);
        std::snprintf(line, sizeof(line), "anchor %zu slide %d cell %d label %d\n", a,
                      ad.slide_id, ad.index.anchor.anchor_idx, ad.label);
        index_txt += line;
        for (size_t i = 0; i < ad.index.members.size(); ++i) {
            const PatchId& pid = ad.index.members[i];
            Footprint fp = patch_footprint(pid);
            std::snprintf(line, sizeof(line), "%zu %d %d %d %d %d %d %d\n", i, pid.level, pid.row,
                          pid.col, fp.x0, fp.y0, fp.side, ad.index.parent[i]);
            index_txt += line;
            std::snprintf(line, sizeof(line), "%zu %zu %d %d %d :", a, i, pid.level, pid.row,
                          pid.col);
            captions += line;
            for (int t : ad.captions[i].tokens) captions += ' ' + std::to_string(t);
            captions += '\n';
        }
    }
    write_text(fs::path(out_dir) / "captions.txt", captions);
    m.files.emplace_back("captions", "captions.txt");
    write_text(fs::path(out_dir) / "patch_index.txt", index_txt);
    m.files.emplace_back("index", "patch_index.txt");

    save_manifest((fs::path(out_dir) / "manifest.txt").string(), m);
    GenDataOutput out;
    out.dir = out_dir;
    out.manifest = m;
    out.n_slides = cfg.data.n_slides;
    out.n_anchors = static_cast<int>(ds.anchors.size());
    return out;
}

TrainOutput cmd_train(const TrainConfig& cfg, const std::string& dataset_dir,
                      const std::string& out_dir, const std::string& resume) {
    validate(cfg);
    require_dataset(dataset_dir, cfg.data);
    Dataset ds = build_dataset(cfg.data);

    Trainer t(cfg, ds);
    if (!resume.empty()) t.load(resume);
    t.run();

    fs::create_directories(out_dir);
    RunManifest m;
    m.command = "train";
    m.config_hash = config_hash(cfg);
    m.seed = cfg.seed;
    save_config((fs::path(out_dir) / "config.txt").string(), cfg);
    m.files.emplace_back("config", "config.txt");

    std::string log;
    for (const std::string& l : t.log_lines()) log += l + '\n';
    write_text(fs::path(out_dir) / "runlog.txt", log);
    m.files.emplace_back("log", "runlog.txt");

    TrainOutput out;
    out.checkpoint = (fs::path(out_dir) / "model.ckpt").string();
    t.save(out.checkpoint);
    m.files.emplace_back("checkpoint", "model.ckpt");
    m.files.emplace_back("dataset", dataset_dir);
    save_manifest((fs::path(out_dir) / "manifest.txt").string(), m);

    out.runlog = (fs::path(out_dir) / "runlog.txt").string();
    out.manifest = m;
    out.steps = t.step();
    out.final_total = t.records().empty() ? 0.0 : t.records().back().losses.total;
    return out;
}

EvalOutput cmd_eval(const TrainConfig& cfg, const std::string& dataset_dir,
                    const std::string& checkpoint, const std::string& out_dir, bool guided,
                    bool prompt_ensemble) {
    validate(cfg);
    require_dataset(dataset_dir, cfg.data);
    Dataset ds = build_dataset(cfg.data);

    // hash check is deliberately skipped: held-out evaluation loads a
    // checkpoint whose run had a different data section
    ModelParams params = ModelParams::init(cfg.model, cfg.seed);
    load_into(params, load_checkpoint(checkpoint, 0));

    EvalConfig e;
    e.levels = cfg.resolution_subset;
    e.k_o = cfg.k_o;
    e.guided = guided;
    e.prompt_ensemble = prompt_ensemble;
    e.seed = cfg.seed;
    std::vector<TileRecord> tiles;
    EvalResult r = evaluate(params, ds, e, &tiles);

    char line[160];
    std::string rep = "mralign-eval v1\n";
    rep += std::string("mode ") + (guided ? "guided" : "classical") + '\n';
    rep += std::string("prompt_ensemble ") + (prompt_ensemble ? "1" : "0") + '\n';
    rep += "levels ";
    for (size_t i = 0; i < e.levels.size(); ++i)
        rep += (i ? "," : "") + std::to_string(e.levels[i]);
    rep += "\nk_o " + std::to_string(e.k_o) + '\n';
    rep += "tiles " + std::to_string(r.n_tiles) + '\n';
    rep += "slides " + std::to_string(r.n_slides) + '\n';
    rep += "confusion " + std::to_string(r.tile_confusion.size()) + '\n';
    for (const auto& row : r.tile_confusion) {
        for (size_t j = 0; j < row.size(); ++j) {
            std::snprintf(line, sizeof(line), "%s%lld", j ? " " : "",
                          static_cast<long long>(row[j]));
            rep += line;
        }
        rep += '\n';
    }
    std::snprintf(line, sizeof(line), "tile_weighted_f1 %.12g\n", r.tile_weighted_f1);
    rep += line;
    std::snprintf(line, sizeof(line), "tile_balanced_acc %.12g\n", r.tile_balanced_acc);
    rep += line;
    for (const auto& [k, f1] : r.wsi_f1_by_k) {
        std::snprintf(line, sizeof(line), "wsi_f1 %d %.12g\n", k, f1);
        rep += line;
    }

    // class-id grids per anchor, painted at the finest tile granularity
    const int cell = kAnchorNative / 8;
    std::map<std::pair<int, int>, std::vector<std::pair<Footprint, TileScore>>> by_anchor;
    std::map<std::pair<int, int>, int> anchor_label;
    for (const TileRecord& t : tiles) {
        by_anchor[{t.slide_id, t.anchor_idx}].emplace_back(t.fp, t.score);
        anchor_label[{t.slide_id, t.anchor_idx}] = t.label;
    }
    std::string seg = "mralign-seg v1\ncell " + std::to_string(cell) + "\nbackground " +
                      std::to_string(ds.vocab.n_classes) + '\n';
    for (const auto& [key, fps] : by_anchor) {
        int grid = kAnchorNative / cell;
        std::vector<int> ids = backproject_scores(kAnchorNative, cell, ds.vocab.n_classes, fps);
        std::snprintf(line, sizeof(line), "anchor %d %d %d %d\n", key.first, key.second,
                      anchor_label[key], grid);
        seg += line;
        for (int y = 0; y < grid; ++y) {
            for (int x = 0; x < grid; ++x)
                seg += (x ? " " : "") + std::to_string(ids[static_cast<size_t>(y) * grid + x]);
            seg += '\n';
        }
    }

    fs::create_directories(out_dir);
    RunManifest m;
    m.command = "eval";
    m.config_hash = config_hash(cfg);
    m.seed = cfg.seed;
    save_config((fs::path(out_dir) / "config.txt").string(), cfg);
    m.files.emplace_back("config", "config.txt");
    write_text(fs::path(out_dir) / "report.txt", rep);
    m.files.emplace_back("report", "report.txt");
    write_text(fs::path(out_dir) / "segmentation.txt", seg);
    m.files.emplace_back("segmentation", "segmentation.txt");
    m.files.emplace_back("dataset", dataset_dir);
    m.files.emplace_back("checkpoint", checkpoint);
    save_manifest((fs::path(out_dir) / "manifest.txt").string(), m);

    EvalOutput out;
    out.result = std::move(r);
    out.report = std::move(rep);
    out.report_path = (fs::path(out_dir) / "report.txt").string();
    out.manifest = std::move(m);
    return out;
}

AblateOutput cmd_ablate(const TrainConfig& cfg, const std::string& axis,
                        const std::string& out_dir) {
    validate(cfg);
    std::vector<AblationArm> arms;
    if (axis == "loss" || axis == "losses") arms = loss_combo_arms(cfg);
    else if (axis == "hierarchy") arms = hierarchy_arms(cfg);
    else if (axis == "resolution") arms = resolution_arms(cfg);
    else if (axis == "k_o" || axis == "top_k") arms = top_k_arms(cfg, {3, 6, 9, 12, 15, 18});
    else
        throw std::invalid_argument("ablate: unknown axis '" + axis +
                                    "' (use loss|hierarchy|resolution|k_o)");

    Dataset train_data = build_dataset(cfg.data);
    DataConfig eval_cfg = bench_eval_data(cfg, cfg.data.n_slides);
    Dataset eval_data = build_dataset(eval_cfg);

    EvalConfig eval_base;
    eval_base.k_o = cfg.k_o;
    eval_base.seed = cfg.seed;

    AblateOutput out;
    for (const AblationArm& arm : arms)
        out.rows.push_back(run_arm(arm, train_data, eval_data, eval_base));
    out.table = format_arm_table(out.rows);
    out.shared_data_hash = data_hash(cfg.data);

    std::string rep = "mralign-ablate v1\naxis " + axis + "\nseed " + std::to_string(cfg.seed) +
                      "\ndata_hash " + hex16(out.shared_data_hash) + "\neval_data_hash " +
                      hex16(data_hash(eval_cfg)) + '\n' + out.table;

    fs::create_directories(out_dir);
    RunManifest m;
    m.command = "ablate";
    m.config_hash = config_hash(cfg);
    m.seed = cfg.seed;
    save_config((fs::path(out_dir) / "config.txt").string(), cfg);
    m.files.emplace_back("config", "config.txt");
    write_text(fs::path(out_dir) / "report.txt", rep);
    m.files.emplace_back("report", "report.txt");
    save_manifest((fs::path(out_dir) / "manifest.txt").string(), m);

    out.report_path = (fs::path(out_dir) / "report.txt").string();
    out.manifest = std::move(m);
    return out;
}

} // namespace mralign
