#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mralign/bags.hpp"
#include "mralign/losses.hpp"
#include "mralign/model.hpp"
#include "mralign/optim.hpp"
#include "mralign/slide.hpp"

namespace mralign {

// synthetic corpus parameters, shared by every arm of an ablation run
struct DataConfig {
    GenConfig gen;
    int n_slides = 16;
    int anchors_per_slide = 1;
    float min_coverage = 0.7f;
    double caption_noise_rate = 1.0;
    int caption_noise_pool = 4; // per-slide noise subset size
    int keywords_per_group = 6;
    int noise_tokens = 16;
    uint64_t data_seed = 1;
};

// one anchor's precomputed material: full 85-member quadtree, cached pooled
// rasters, and per-member captions (resolution filtering happens at use time)
struct AnchorData {
    int slide_id = 0;
    int label = 0;
    PatchIndex index;
    std::vector<std::vector<float>> pooled; // 85 x (64*64)
    std::vector<CaptionEntry> captions;     // member order
};

struct Dataset {
    DataConfig cfg;
    Vocabulary vocab;
    std::vector<AnchorData> anchors;
};

// deterministic per (cfg); labels cycle slide_id % n_classes
Dataset build_dataset(const DataConfig& cfg);

// rows of `index.members` whose level is in `levels` (ascending member order)
std::vector<int> included_members(const PatchIndex& index, const std::vector<int>& levels);

// parent-child edges restricted to included members, reindexed to local rows
std::vector<std::pair<int, int>> hierarchy_edges(const PatchIndex& index,
                                                 const std::vector<int>& member_rows);
// no-hierarchy arm: complete bipartite pairs between consecutive included levels
std::vector<std::pair<int, int>> bipartite_level_edges(const PatchIndex& index,
                                                       const std::vector<int>& member_rows);

struct TrainConfig {
    ModelConfig model;

    int epochs = 50;
    int batch_size = 64; // anchors per optimizer step
    int k_o = 9;
    float lr_peak = 5e-5f;
    int warmup_steps = 1000;
    float weight_decay = 0.02f;
    float beta1 = 0.9f;
    float beta2 = 0.98f;
    int queue_capacity = 256;
    float mask_rate = 0.15f;
    uint64_t seed = 1;
    int max_steps = -1; // > 0 caps the run regardless of epochs

    bool enable_cvta = true;
    bool enable_mrtva = true;
    bool enable_parent_child = true;
    std::vector<int> resolution_subset = {5, 10, 20, 40};

    DataConfig data;
};

void validate(const TrainConfig& cfg);
uint64_t config_hash(const TrainConfig& cfg); // FNV-1a over a canonical dump
std::string config_dump(const TrainConfig& cfg);
// dataset identity: just the data.* lines, so arms with different training
// flags can prove they share a corpus
std::string data_dump(const DataConfig& d);
uint64_t data_hash(const DataConfig& d);

// linear 0 -> lr_peak over warmup, then cosine lr_peak -> 0 at total_steps
float lr_schedule(int step, const TrainConfig& cfg, int total_steps);

struct StepRecord {
    int step = 0;
    LossBreakdown losses;
    float lr = 0.0f;
};

class Trainer {
public:
    Trainer(const TrainConfig& cfg, const Dataset& data);

    // runs n optimizer steps (n < 0: the remainder of the schedule)
    void run(int n_steps = -1);

    int step() const { return step_; }
    int total_steps() const { return total_steps_; }
    const ModelParams& params() const { return params_; }
    ModelParams& params() { return params_; }
    const std::vector<StepRecord>& records() const { return records_; }
    const std::vector<std::string>& log_lines() const { return log_; }
    int plm_skips() const { return plm_skips_; }

    void save(const std::string& path) const;
    void load(const std::string& path); // config hash must match

private:
    void one_step();

    TrainConfig cfg_;
    const Dataset* data_;
    std::vector<int> train_rows_; // member rows per resolution subset (shared shape)
    ModelParams params_;
    std::vector<OptState> opt_;
    FeatureQueue queue_v_, queue_w_;
    int step_ = 0;
    int steps_per_epoch_ = 0;
    int total_steps_ = 0;
    int plm_skips_ = 0;
    std::vector<StepRecord> records_;
    std::vector<std::string> log_;
};

} // namespace mralign
