#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mralign/bags.hpp"
#include "mralign/model.hpp"
#include "mralign/trainer.hpp"

namespace mralign {

// ------------------------------------------------------------ text side

// one text feature row per vocabulary token, row i = token id i
struct KeywordDictionary {
    int vocab_size = 0;
    Tensor rows; // [vocab, d], detached values
};
KeywordDictionary build_dictionary(const ModelParams& p, const Vocabulary& vocab);

// per class, keyword-id sets acting as prompt templates:
// coarse+fine signal, coarse only, fine only
struct PromptSet {
    int n_classes = 0;
    std::vector<std::vector<std::vector<int>>> templates; // [class][template][ids]
};
PromptSet class_prompts(const Vocabulary& vocab);

// [n_classes, d] unit rows; per template the prompt feature is the normalized
// mean of its keyword features, and the ensemble renormalizes the template
// mean (a single template passes through unchanged). ensemble=false keeps
// only each class's first template.
Tensor prompt_features(const ModelParams& p, const PromptSet& prompts, bool ensemble = true);

// ------------------------------------------------------------ tile scoring

struct TileScore {
    int pred = 0;
    std::vector<float> probs; // softmax over class prompt cosines
};

// guided: retrieve the top-k_o dictionary keywords for the tile, fuse them
// with the visual feature, and score the fused representation against the
// class prompts
TileScore classify_tile_guided(const ModelParams& p, const Tensor& v_row,
                               const KeywordDictionary& dict, const Tensor& prompts, int k_o);
// classical: score the raw visual feature against the class prompts
TileScore classify_tile_classical(const Tensor& v_row, const Tensor& prompts);

// slide score per class = sum of its top-min(K, n) tile probabilities;
// prediction = argmax, ties to the lower class id
struct WsiResult {
    int pred = 0;
    std::vector<double> class_scores;
};
WsiResult classify_wsi(const std::vector<TileScore>& tiles, int n_classes, int top_k);

// tile scores painted back onto a slide grid of `cell` native px per cell:
// overlapping tiles average their class probabilities, empty cells take the
// background id n_classes, footprints outside the slide are rejected
std::vector<int> backproject_scores(int native_side, int cell, int n_classes,
                                    const std::vector<std::pair<Footprint, TileScore>>& tiles);

// ------------------------------------------------------------ metrics

std::vector<std::vector<int64_t>> confusion_matrix(const std::vector<int>& truth,
                                                   const std::vector<int>& pred, int n_classes);
// support-weighted mean of per-class F1 (absent classes carry zero weight)
double weighted_f1(const std::vector<std::vector<int64_t>>& confusion);
// mean recall over classes with support
double balanced_accuracy(const std::vector<std::vector<int64_t>>& confusion);

// ------------------------------------------------------------ harness

struct EvalConfig {
    std::vector<int> levels = {5, 10, 20, 40};
    int tiles_per_anchor = 10;
    int k_o = 9;
    bool guided = true;
    bool prompt_ensemble = true;      // false: first template per class only
    float min_tissue_fraction = 0.5f; // tile eligibility on pooled intensity
    std::vector<int> wsi_top_k = {1, 5, 10, 50, 100};
    uint64_t seed = 1;
};

struct EvalResult {
    int n_tiles = 0;
    int n_slides = 0;
    std::vector<std::vector<int64_t>> tile_confusion;
    double tile_weighted_f1 = 0.0;
    double tile_balanced_acc = 0.0;
    std::map<int, double> wsi_f1_by_k;
};

// per-tile detail for segmentation reports (footprints are anchor-relative)
struct TileRecord {
    int slide_id = 0;
    int anchor_idx = 0;
    int label = 0;
    Footprint fp;
    TileScore score;
};

EvalResult evaluate(const ModelParams& p, const Dataset& data, const EvalConfig& cfg,
                    std::vector<TileRecord>* records = nullptr);

// ------------------------------------------------------------ ablations

struct AblationArm {
    std::string axis; // "loss", "hierarchy", "resolution", "top_k"
    std::string name;
    TrainConfig cfg;
};

std::vector<AblationArm> loss_combo_arms(const TrainConfig& base);
std::vector<AblationArm> hierarchy_arms(const TrainConfig& base);
std::vector<AblationArm> resolution_arms(const TrainConfig& base);
std::vector<AblationArm> top_k_arms(const TrainConfig& base, const std::vector<int>& ks);

struct ArmResult {
    std::string axis;
    std::string name;
    uint64_t seed = 0;
    double tile_weighted_f1 = 0.0;
    double tile_balanced_acc = 0.0;
    double first_total = 0.0; // training loss at the first step
    double last_total = 0.0;  // and at the last
};

// trains the arm on `train_data` and scores it on `eval_data`; the arm's
// resolution subset and k_o drive both training and evaluation
ArmResult run_arm(const AblationArm& arm, const Dataset& train_data, const Dataset& eval_data,
                  const EvalConfig& eval_base);

std::string format_arm_table(const std::vector<ArmResult>& rows);

// ------------------------------------------------------------ presets

// small two-class setup for end-to-end smoke runs
TrainConfig smoke_preset(uint64_t seed);
// four-class desk benchmark: one anchor per slide, short high-lr schedule
TrainConfig bench_preset(uint64_t seed, int train_slides = 120);
DataConfig bench_eval_data(const TrainConfig& bench, int eval_slides = 80);

} // namespace mralign
