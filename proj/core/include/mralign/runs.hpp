#pragma once

#include <string>
#include <vector>

#include "mralign/config.hpp"
#include "mralign/eval.hpp"

namespace mralign {

// Command implementations behind the CLI. Each writes its artifacts plus a
// manifest under out_dir and returns what it produced; errors throw.

// materializes the corpus: slide rasters, captions, patch index, manifest
struct GenDataOutput {
    std::string dir;
    RunManifest manifest;
    int n_slides = 0;
    int n_anchors = 0;
};
GenDataOutput cmd_gen_data(const TrainConfig& cfg, const std::string& out_dir);

// dataset_dir must hold a gen-data manifest whose hash matches cfg's data
// section; training state then rebuilds deterministically from the config
struct TrainOutput {
    std::string checkpoint;
    std::string runlog;
    RunManifest manifest;
    int steps = 0;
    double final_total = 0.0;
};
TrainOutput cmd_train(const TrainConfig& cfg, const std::string& dataset_dir,
                      const std::string& out_dir, const std::string& resume = "");

// scores a checkpoint on the dataset; writes metric + segmentation reports.
// The checkpoint must match cfg's model shapes but may come from a run with a
// different data section (held-out evaluation).
struct EvalOutput {
    EvalResult result;
    std::string report; // same text as report.txt
    std::string report_path;
    RunManifest manifest;
};
EvalOutput cmd_eval(const TrainConfig& cfg, const std::string& dataset_dir,
                    const std::string& checkpoint, const std::string& out_dir, bool guided,
                    bool prompt_ensemble);

// one ablation axis at cfg.seed: "loss", "hierarchy", "resolution", or "k_o";
// arms share the training corpus and score on a held-out corpus derived from it
struct AblateOutput {
    std::vector<ArmResult> rows;
    std::string table;
    std::string report_path;
    RunManifest manifest;
    uint64_t shared_data_hash = 0;
};
AblateOutput cmd_ablate(const TrainConfig& cfg, const std::string& axis,
                        const std::string& out_dir);

} // namespace mralign
