#include <stdexcept>

#include "doctest.h"

#include "mralign/config.hpp"

using namespace mralign;

namespace {

// touch every field so round-trip failures can't hide behind defaults
TrainConfig varied_config() {
    TrainConfig cfg;
    cfg.model.d = 48;
    cfg.model.d_proj = 24;
    cfg.model.vision_hidden = 96;
    cfg.model.fusion_hidden = 80;
    cfg.model.n_fusion_blocks = 3;
    cfg.model.vocab_size = 72;
    cfg.model.tau_init = 0.05f;
    cfg.epochs = 7;
    cfg.batch_size = 12;
    cfg.k_o = 4;
    cfg.lr_peak = 2.5e-4f;
    cfg.warmup_steps = 33;
    cfg.weight_decay = 0.015f;
    cfg.beta1 = 0.85f;
    cfg.beta2 = 0.97f;
    cfg.queue_capacity = 48;
    cfg.mask_rate = 0.2f;
    cfg.seed = 0xdeadbeefcafef00dULL;
    cfg.max_steps = 123;
    cfg.enable_cvta = false;
    cfg.enable_mrtva = true;
    cfg.enable_parent_child = false;
    cfg.resolution_subset = {10, 20};
    cfg.data.gen.n_classes = 3;
    cfg.data.gen.side_multiple = 2;
    cfg.data.gen.texture_amp = 0.9f;
    cfg.data.gen.tissue_base = 0.3f;
    cfg.data.gen.bg_level = 0.85f;
    cfg.data.gen.coarse_amp = 0.05f;
    cfg.data.gen.fine_amp = 0.07f;
    cfg.data.gen.noise_amp = 0.01f;
    cfg.data.gen.fine_period = 16;
    cfg.data.gen.coarse_period_a = 1024;
    cfg.data.gen.coarse_period_b = 512;
    cfg.data.gen.region_amp = 0.04f;
    cfg.data.gen.region_cell = 512;
    cfg.data.gen.blob_amp = 0.11f;
    cfg.data.gen.blob_density = 0.3f;
    cfg.data.n_slides = 24;
    cfg.data.anchors_per_slide = 2;
    cfg.data.min_coverage = 0.6f;
    cfg.data.caption_noise_rate = 1.5;
    cfg.data.caption_noise_pool = 6;
    cfg.data.keywords_per_group = 5;
    cfg.data.noise_tokens = 12;
    cfg.data.data_seed = 99;
    return cfg;
}

} // namespace

TEST_CASE("config text round-trips hash-identically") {
    TrainConfig cfg = varied_config();
    TrainConfig back = parse_config(config_dump(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(config_dump(back) == config_dump(cfg));

    // defaults round-trip too
    TrainConfig def;
    CHECK(config_hash(parse_config(config_dump(def))) == config_hash(def));
}

TEST_CASE("config parser ignores comments and rejects malformed input") {
    TrainConfig cfg = parse_config("# comment only\n\n  train.k_o = 5  # trailing\n");
    CHECK(cfg.k_o == 5);
    CHECK(cfg.epochs == TrainConfig{}.epochs); // untouched fields keep defaults

    CHECK_THROWS_AS(parse_config("nonsense line\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("train.unknown=1\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("train.k_o=abc\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("train.k_o=5x\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("train.lr_peak=fast\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("train.enable_cvta=2\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("train.resolution_subset=5,x\n"), std::invalid_argument);
}

TEST_CASE("config overrides change exactly the named field") {
    TrainConfig cfg = varied_config();
    uint64_t before = config_hash(cfg);

    apply_override(cfg, "train.batch_size", "3");
    CHECK(cfg.batch_size == 3);
    CHECK(config_hash(cfg) != before);

    apply_override(cfg, "train.resolution_subset", "5,40");
    CHECK(cfg.resolution_subset == std::vector<int>{5, 40});

    apply_override(cfg, "data.data_seed", "7");
    CHECK(cfg.data.data_seed == 7);

    // everything else still matches a reference with the same three edits
    TrainConfig ref = varied_config();
    ref.batch_size = 3;
    ref.resolution_subset = {5, 40};
    ref.data.data_seed = 7;
    CHECK(config_hash(cfg) == config_hash(ref));

    CHECK_THROWS_AS(apply_override(cfg, "nope", "1"), std::invalid_argument);
}

TEST_CASE("config file save/load preserves the hash") {
    TrainConfig cfg = varied_config();
    save_config("/tmp/mralign_cfg_test.txt", cfg);
    TrainConfig back = load_config("/tmp/mralign_cfg_test.txt");
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK_THROWS_AS(load_config("/tmp/mralign_no_such_file.txt"), std::runtime_error);
}

TEST_CASE("run manifest round-trips") {
    RunManifest m;
    m.command = "train";
    m.config_hash = 0x0123456789abcdefULL;
    m.seed = 42;
    m.files = {{"checkpoint", "/tmp/run/model.ckpt"}, {"log", "/tmp/run/runlog.txt"}};
    save_manifest("/tmp/mralign_manifest_test.txt", m);

    RunManifest back = load_manifest("/tmp/mralign_manifest_test.txt");
    CHECK(back.command == m.command);
    CHECK(back.config_hash == m.config_hash);
    CHECK(back.seed == m.seed);
    CHECK(back.tool == std::string(kToolVersion));
    CHECK(back.files == m.files);

    save_config("/tmp/mralign_not_manifest.txt", TrainConfig{});
    CHECK_THROWS_AS(load_manifest("/tmp/mralign_not_manifest.txt"), std::runtime_error);
    CHECK_THROWS_AS(load_manifest("/tmp/mralign_no_such_file.txt"), std::runtime_error);
}
