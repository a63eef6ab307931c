#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "mralign/runs.hpp"

using namespace mralign;
namespace fs = std::filesystem;

namespace {

TrainConfig cli_config() {
    TrainConfig cfg;
    cfg.model.d = 16;
    cfg.model.d_proj = 8;
    cfg.model.vision_hidden = 32;
    cfg.model.fusion_hidden = 32;
    cfg.model.vocab_size = 40;
    cfg.batch_size = 2;
    cfg.k_o = 5;
    cfg.lr_peak = 3e-3f;
    cfg.warmup_steps = 5;
    cfg.queue_capacity = 8;
    cfg.max_steps = 6;
    cfg.seed = 3;
    cfg.resolution_subset = {5, 10, 20};
    cfg.data.gen.n_classes = 2;
    cfg.data.n_slides = 4;
    cfg.data.data_seed = 11;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Workspace {
    fs::path root;
    Workspace(const char* name) : root(fs::path("/tmp") / name) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    std::string dir(const char* sub) const { return (root / sub).string(); }
};

} // namespace

TEST_CASE("gen-data materializes the corpus and reruns byte-identically") {
    Workspace ws("mralign_cli_gen");
    TrainConfig cfg = cli_config();

    GenDataOutput a = cmd_gen_data(cfg, ws.dir("ds"));
    CHECK(a.n_slides == 4);
    CHECK(a.n_anchors == 4);
    CHECK(a.manifest.command == "gen-data");
    CHECK(a.manifest.config_hash == data_hash(cfg.data));
    CHECK(a.manifest.seed == cfg.data.data_seed);

    // every listed file exists, relative to the dataset dir
    for (const auto& [kind, rel] : a.manifest.files) {
        CAPTURE(kind);
        CHECK(fs::exists(fs::path(ws.dir("ds")) / rel));
    }

    // 4 slides + config + captions + index
    CHECK(a.manifest.files.size() == 7);

    // rerun with the same seed: identical manifest and captions, bit for bit
    cmd_gen_data(cfg, ws.dir("ds2"));
    CHECK(slurp(ws.root / "ds" / "manifest.txt") == slurp(ws.root / "ds2" / "manifest.txt"));
    CHECK(slurp(ws.root / "ds" / "captions.txt") == slurp(ws.root / "ds2" / "captions.txt"));
    CHECK(slurp(ws.root / "ds" / "slides/slide_0000.pgm") ==
          slurp(ws.root / "ds2" / "slides/slide_0000.pgm"));

    // a different seed changes the manifest
    TrainConfig other = cfg;
    other.data.data_seed = 12;
    cmd_gen_data(other, ws.dir("ds3"));
    CHECK(slurp(ws.root / "ds" / "manifest.txt") != slurp(ws.root / "ds3" / "manifest.txt"));

    // reloading the written config reproduces the hash
    TrainConfig back = load_config((fs::path(ws.dir("ds")) / "config.txt").string());
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(data_hash(back.data) == a.manifest.config_hash);

    // degenerate configs are rejected with the offending key
    TrainConfig bad = cfg;
    bad.data.n_slides = 0;
    CHECK_THROWS_WITH_AS(cmd_gen_data(bad, ws.dir("bad")),
                         doctest::Contains("n_slides"), std::invalid_argument);
}

TEST_CASE("train writes checkpoint, log, and manifest; rejects bad datasets") {
    Workspace ws("mralign_cli_train");
    TrainConfig cfg = cli_config();
    cmd_gen_data(cfg, ws.dir("ds"));

    TrainOutput t = cmd_train(cfg, ws.dir("ds"), ws.dir("run"));
    CHECK(t.steps == 6);
    CHECK(fs::exists(t.checkpoint));
    CHECK(t.manifest.command == "train");
    CHECK(t.manifest.config_hash == config_hash(cfg));

    // log line count == step count
    std::string log = slurp(t.runlog);
    int lines = 0;
    for (char c : log) lines += c == '\n';
    CHECK(lines == t.steps);

    // missing dataset rejected before any training
    CHECK_THROWS_WITH_AS(cmd_train(cfg, ws.dir("nowhere"), ws.dir("run2")),
                         doctest::Contains("manifest"), std::runtime_error);

    // dataset generated under a different data config rejected
    TrainConfig other = cfg;
    other.data.data_seed = 12;
    cmd_gen_data(other, ws.dir("ds_other"));
    CHECK_THROWS_WITH_AS(cmd_train(cfg, ws.dir("ds_other"), ws.dir("run3")),
                         doctest::Contains("hash mismatch"), std::runtime_error);

    // a half-finished checkpoint resumed through the command reaches the same
    // final bytes as the uninterrupted run
    Dataset ds = build_dataset(cfg.data);
    Trainer part(cfg, ds);
    part.run(3);
    part.save((ws.root / "part.ckpt").string());
    TrainOutput resumed =
        cmd_train(cfg, ws.dir("ds"), ws.dir("resumed"), (ws.root / "part.ckpt").string());
    CHECK(resumed.steps == 6);
    CHECK(slurp(resumed.checkpoint) == slurp(t.checkpoint));
}

TEST_CASE("eval writes parseable reports whose metrics recompute from counts") {
    Workspace ws("mralign_cli_eval");
    TrainConfig cfg = cli_config();
    cmd_gen_data(cfg, ws.dir("ds"));
    TrainOutput t = cmd_train(cfg, ws.dir("ds"), ws.dir("run"));

    EvalOutput guided = cmd_eval(cfg, ws.dir("ds"), t.checkpoint, ws.dir("ev_g"), true, true);
    EvalOutput classical =
        cmd_eval(cfg, ws.dir("ds"), t.checkpoint, ws.dir("ev_c"), false, true);
    CHECK(guided.result.n_tiles == classical.result.n_tiles);
    CHECK(guided.report != classical.report);

    // recompute oracle: parse the stored confusion counts and rebuild both
    // metrics from them
    std::stringstream ss(guided.report);
    std::string line, word;
    int n_classes = 0;
    std::vector<std::vector<int64_t>> confusion;
    double stored_f1 = -1.0, stored_ba = -1.0;
    while (std::getline(ss, line)) {
        std::stringstream ls(line);
        ls >> word;
        if (word == "confusion") {
            ls >> n_classes;
            confusion.resize(static_cast<size_t>(n_classes));
            for (auto& row : confusion) {
                REQUIRE(std::getline(ss, line));
                std::stringstream rs(line);
                int64_t v;
                while (rs >> v) row.push_back(v);
                REQUIRE(static_cast<int>(row.size()) == n_classes);
            }
        } else if (word == "tile_weighted_f1") {
            ls >> stored_f1;
        } else if (word == "tile_balanced_acc") {
            ls >> stored_ba;
        }
    }
    REQUIRE(n_classes == 2);
    CHECK(weighted_f1(confusion) == doctest::Approx(stored_f1).epsilon(1e-9));
    CHECK(balanced_accuracy(confusion) == doctest::Approx(stored_ba).epsilon(1e-9));

    // segmentation grids: one per anchor, every id within [0, background]
    std::string seg = slurp(fs::path(ws.dir("ev_g")) / "segmentation.txt");
    CHECK(seg.find("mralign-seg v1") == 0);
    std::stringstream gs(seg);
    std::getline(gs, line); // header
    int ids = 0, anchors = 0;
    while (gs >> word) {
        if (word == "anchor") ++anchors;
        if (word == "anchor" || word == "cell" || word == "background") {
            std::getline(gs, line);
            continue;
        }
        char* end = nullptr;
        long v = std::strtol(word.c_str(), &end, 10);
        REQUIRE((end && *end == '\0'));
        CHECK(v >= 0);
        CHECK(v <= cfg.data.gen.n_classes);
        ++ids;
    }
    CHECK(anchors == 4);
    CHECK(ids == 4 * 8 * 8);

    // prompt ensembling off is a distinct, runnable mode
    EvalOutput no_pe = cmd_eval(cfg, ws.dir("ds"), t.checkpoint, ws.dir("ev_np"), true, false);
    CHECK(no_pe.report.find("prompt_ensemble 0") != std::string::npos);

    // wrong checkpoint path is rejected
    CHECK_THROWS_AS(cmd_eval(cfg, ws.dir("ds"), ws.dir("nope.ckpt"), ws.dir("ev_x"), true, true),
                    std::runtime_error);
}

TEST_CASE("ablate runs an axis and arms share the corpus hash") {
    Workspace ws("mralign_cli_ablate");
    TrainConfig cfg = cli_config();
    cfg.max_steps = 2;

    AblateOutput loss = cmd_ablate(cfg, "loss", ws.dir("ab_loss"));
    CHECK(loss.rows.size() == 4);
    CHECK(loss.shared_data_hash == data_hash(cfg.data));
    CHECK(loss.table.find("full") != std::string::npos);

    std::string report = slurp(loss.report_path);
    char hex[24];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(loss.shared_data_hash));
    CHECK(report.find(std::string("data_hash ") + hex) != std::string::npos);

    AblateOutput ko = cmd_ablate(cfg, "k_o", ws.dir("ab_ko"));
    CHECK(ko.rows.size() == 6);
    std::vector<std::string> names;
    for (const auto& r : ko.rows) names.push_back(r.name);
    CHECK(names == std::vector<std::string>{"k3", "k6", "k9", "k12", "k15", "k18"});

    CHECK_THROWS_WITH_AS(cmd_ablate(cfg, "flux", ws.dir("ab_x")), doctest::Contains("axis"),
                         std::invalid_argument);
}
