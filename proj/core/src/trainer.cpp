#include "mralign/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace mralign {

// ------------------------------------------------------------------- dataset

static void validate_data(const DataConfig& cfg) {
    if (cfg.n_slides < 1)
        throw std::invalid_argument("build_dataset: n_slides must be >= 1, got " +
                                    std::to_string(cfg.n_slides));
    if (cfg.anchors_per_slide < 1)
        throw std::invalid_argument("build_dataset: anchors_per_slide must be >= 1, got " +
                                    std::to_string(cfg.anchors_per_slide));
    if (!(cfg.min_coverage > 0.0f) || cfg.min_coverage > 1.0f)
        throw std::invalid_argument("build_dataset: min_coverage must be in (0, 1]");
}

Dataset build_dataset(const DataConfig& cfg) {
    validate_data(cfg);
    Dataset ds;
    ds.cfg = cfg;
    ds.vocab = Vocabulary::make(cfg.gen.n_classes, cfg.keywords_per_group, cfg.noise_tokens);
    CaptionConfig cc{cfg.caption_noise_rate, cfg.caption_noise_pool};

    for (int sid = 0; sid < cfg.n_slides; ++sid) {
        int label = sid % cfg.gen.n_classes;
        Slide slide = synth_slide(cfg.data_seed, sid, label, cfg.gen);
        SlidePyramid pyr = build_pyramid(slide);
        TissueMask tm = tissue_mask_from_mip8(pyr.a8, slide.side / 8);
        uint64_t aseed = Rng::mix(Rng::mix(cfg.data_seed, 0xa17c5ULL), static_cast<uint64_t>(sid));
        AnchorSample as =
            sample_anchors(slide, tm, cfg.anchors_per_slide, cfg.min_coverage, aseed);
        if (as.anchors.empty())
            throw std::runtime_error("build_dataset: slide " + std::to_string(sid) +
                                     " has no anchor cell meeting coverage " +
                                     std::to_string(cfg.min_coverage));
        for (const Anchor& a : as.anchors) {
            AnchorData ad;
            ad.slide_id = sid;
            ad.label = label;
            ad.index = expand_children(PatchId{sid, a.idx, 5, 0, 0});
            ad.pooled.reserve(ad.index.members.size());
            for (const PatchId& pid : ad.index.members) {
                auto f = pooled_patch(pyr, a, pid);
                ad.pooled.emplace_back(f.begin(), f.end());
            }
            ad.captions = synth_bag_captions(ad.index, label, ds.vocab, cfg.data_seed, cc);
            ds.anchors.push_back(std::move(ad));
        }
    }
    return ds;
}

// ----------------------------------------------------------- level filtering

static void validate_levels(const std::vector<int>& levels) {
    if (levels.empty()) throw std::invalid_argument("resolution subset must not be empty");
    for (size_t i = 0; i < levels.size(); ++i) {
        level_index(levels[i]); // throws on unknown level
        if (i > 0 && levels[i] <= levels[i - 1])
            throw std::invalid_argument("resolution subset must be strictly ascending");
    }
}

std::vector<int> included_members(const PatchIndex& index, const std::vector<int>& levels) {
    validate_levels(levels);
    std::vector<int> rows;
    for (size_t i = 0; i < index.members.size(); ++i)
        if (std::find(levels.begin(), levels.end(), index.members[i].level) != levels.end())
            rows.push_back(static_cast<int>(i));
    return rows;
}

std::vector<std::pair<int, int>> hierarchy_edges(const PatchIndex& index,
                                                 const std::vector<int>& member_rows) {
    std::unordered_map<int, int> local;
    for (size_t i = 0; i < member_rows.size(); ++i) local[member_rows[i]] = static_cast<int>(i);
    std::vector<std::pair<int, int>> edges;
    for (size_t i = 0; i < member_rows.size(); ++i) {
        int parent = index.parent[static_cast<size_t>(member_rows[i])];
        if (parent < 0) continue;
        auto it = local.find(parent);
        if (it != local.end()) edges.emplace_back(it->second, static_cast<int>(i));
    }
    return edges;
}

std::vector<std::pair<int, int>> bipartite_level_edges(const PatchIndex& index,
                                                       const std::vector<int>& member_rows) {
    // locals grouped by level, coarse to fine
    std::vector<std::vector<int>> by_level(kLevels.size());
    for (size_t i = 0; i < member_rows.size(); ++i) {
        int li = level_index(index.members[static_cast<size_t>(member_rows[i])].level);
        by_level[static_cast<size_t>(li)].push_back(static_cast<int>(i));
    }
    std::vector<std::pair<int, int>> edges;
    const std::vector<int>* prev = nullptr;
    for (const auto& group : by_level) {
        if (group.empty()) continue;
        if (prev)
            for (int a : *prev)
                for (int b : group) edges.emplace_back(a, b);
        prev = &group;
    }
    return edges;
}

// -------------------------------------------------------------------- config

void validate(const TrainConfig& cfg) {
    validate_levels(cfg.resolution_subset);
    validate_data(cfg.data);
    if (cfg.batch_size < 1)
        throw std::invalid_argument("train config: batch_size must be >= 1");
    if (cfg.k_o < 1) throw std::invalid_argument("train config: k_o must be >= 1");
    if (cfg.epochs < 1 && cfg.max_steps <= 0)
        throw std::invalid_argument("train config: need epochs >= 1 or max_steps > 0");
    if (!(cfg.lr_peak > 0.0f)) throw std::invalid_argument("train config: lr_peak must be > 0");
    if (cfg.warmup_steps < 0)
        throw std::invalid_argument("train config: warmup_steps must be >= 0");
    if (cfg.queue_capacity < 1)
        throw std::invalid_argument("train config: queue_capacity must be >= 1");
    if (!(cfg.mask_rate > 0.0f) || cfg.mask_rate > 1.0f)
        throw std::invalid_argument("train config: mask_rate must be in (0, 1]");
}

namespace {
struct DumpWriter {
    std::string out;
    char buf[256];
    void put_i(const char* k, int64_t v) {
        std::snprintf(buf, sizeof(buf), "%s=%lld\n", k, static_cast<long long>(v));
        out += buf;
    }
    void put_f(const char* k, double v) {
        std::snprintf(buf, sizeof(buf), "%s=%.9g\n", k, v);
        out += buf;
    }
};

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}
} // namespace

std::string data_dump(const DataConfig& d) {
    DumpWriter w;
    w.put_i("data.n_classes", d.gen.n_classes);
    w.put_i("data.side_multiple", d.gen.side_multiple);
    w.put_f("data.texture_amp", d.gen.texture_amp);
    w.put_f("data.tissue_base", d.gen.tissue_base);
    w.put_f("data.bg_level", d.gen.bg_level);
    w.put_f("data.coarse_amp", d.gen.coarse_amp);
    w.put_f("data.fine_amp", d.gen.fine_amp);
    w.put_f("data.noise_amp", d.gen.noise_amp);
    w.put_i("data.fine_period", d.gen.fine_period);
    w.put_i("data.coarse_period_a", d.gen.coarse_period_a);
    w.put_i("data.coarse_period_b", d.gen.coarse_period_b);
    w.put_f("data.region_amp", d.gen.region_amp);
    w.put_i("data.region_cell", d.gen.region_cell);
    w.put_f("data.blob_amp", d.gen.blob_amp);
    w.put_f("data.blob_density", d.gen.blob_density);
    w.put_i("data.n_slides", d.n_slides);
    w.put_i("data.anchors_per_slide", d.anchors_per_slide);
    w.put_f("data.min_coverage", d.min_coverage);
    w.put_f("data.caption_noise_rate", d.caption_noise_rate);
    w.put_i("data.caption_noise_pool", d.caption_noise_pool);
    w.put_i("data.keywords_per_group", d.keywords_per_group);
    w.put_i("data.noise_tokens", d.noise_tokens);
    w.put_i("data.data_seed", static_cast<int64_t>(d.data_seed));
    return w.out;
}

uint64_t data_hash(const DataConfig& d) { return fnv1a(data_dump(d)); }

std::string config_dump(const TrainConfig& cfg) {
    DumpWriter w;
    auto put_i = [&](const char* k, int64_t v) { w.put_i(k, v); };
    auto put_f = [&](const char* k, double v) { w.put_f(k, v); };
    std::string& out = w.out;
    put_i("model.d", cfg.model.d);
    put_i("model.d_proj", cfg.model.d_proj);
    put_i("model.vision_hidden", cfg.model.vision_hidden);
    put_i("model.fusion_hidden", cfg.model.fusion_hidden);
    put_i("model.n_fusion_blocks", cfg.model.n_fusion_blocks);
    put_i("model.vocab_size", cfg.model.vocab_size);
    put_f("model.tau_init", cfg.model.tau_init);
    put_i("train.epochs", cfg.epochs);
    put_i("train.batch_size", cfg.batch_size);
    put_i("train.k_o", cfg.k_o);
    put_f("train.lr_peak", cfg.lr_peak);
    put_i("train.warmup_steps", cfg.warmup_steps);
    put_f("train.weight_decay", cfg.weight_decay);
    put_f("train.beta1", cfg.beta1);
    put_f("train.beta2", cfg.beta2);
    put_i("train.queue_capacity", cfg.queue_capacity);
    put_f("train.mask_rate", cfg.mask_rate);
    put_i("train.seed", static_cast<int64_t>(cfg.seed));
    put_i("train.max_steps", cfg.max_steps);
    put_i("train.enable_cvta", cfg.enable_cvta);
    put_i("train.enable_mrtva", cfg.enable_mrtva);
    put_i("train.enable_parent_child", cfg.enable_parent_child);
    out += "train.resolution_subset=";
    for (size_t i = 0; i < cfg.resolution_subset.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(cfg.resolution_subset[i]);
    }
    out += '\n';
    out += data_dump(cfg.data);
    return out;
}

uint64_t config_hash(const TrainConfig& cfg) { return fnv1a(config_dump(cfg)); }

float lr_schedule(int step, const TrainConfig& cfg, int total_steps) {
    if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
    if (total_steps <= 0) throw std::invalid_argument("lr_schedule: total_steps must be > 0");
    if (step < cfg.warmup_steps)
        return cfg.lr_peak * static_cast<float>(step) / static_cast<float>(cfg.warmup_steps);
    int span = total_steps - cfg.warmup_steps;
    if (span <= 0) return 0.0f;
    double t = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
    if (t > 1.0) t = 1.0;
    return static_cast<float>(static_cast<double>(cfg.lr_peak) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t)));
}

// ------------------------------------------------------------------- trainer

// [1, rows] * M: differentiable row mean
static Tensor mean_row(const Tensor& m) {
    int rows = m.dim(0);
    return matmul(Tensor::full({1, rows}, 1.0f / static_cast<float>(rows)), m);
}

static Tensor mean_of(std::vector<Tensor>& terms) {
    Tensor acc = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return scale(acc, 1.0f / static_cast<float>(terms.size()));
}

static std::vector<int> bag_keywords(const AnchorData& ad, const std::vector<int>& rows) {
    std::vector<int> out;
    std::unordered_set<int> seen;
    for (int r : rows)
        for (int t : ad.captions[static_cast<size_t>(r)].tokens)
            if (seen.insert(t).second) out.push_back(t);
    return out;
}

Trainer::Trainer(const TrainConfig& cfg, const Dataset& data) : cfg_(cfg), data_(&data) {
    validate(cfg);
    if (data.anchors.size() < 2)
        throw std::invalid_argument("trainer: need at least 2 anchors, got " +
                                    std::to_string(data.anchors.size()));
    if (cfg.model.vocab_size != data.vocab.size())
        throw std::invalid_argument("trainer: model vocab " + std::to_string(cfg.model.vocab_size) +
                                    " != dataset vocab " + std::to_string(data.vocab.size()));
    train_rows_ = included_members(data.anchors[0].index, cfg.resolution_subset);

    params_ = ModelParams::init(cfg.model, cfg.seed);
    opt_.resize(params_.named.size());
    for (size_t i = 0; i < opt_.size(); ++i) {
        size_t n = static_cast<size_t>(params_.named[i].second.numel());
        opt_[i].m.assign(n, 0.0f);
        opt_[i].v.assign(n, 0.0f);
    }
    queue_v_ = FeatureQueue(cfg.queue_capacity, cfg.model.d);
    queue_w_ = FeatureQueue(cfg.queue_capacity, cfg.model.d);

    int n = static_cast<int>(data.anchors.size());
    int batch_eff = std::min(cfg.batch_size, n);
    steps_per_epoch_ = std::max(1, n / batch_eff);
    total_steps_ = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * steps_per_epoch_;
}

void Trainer::run(int n_steps) {
    int left = n_steps < 0 ? total_steps_ - step_ : n_steps;
    for (; left > 0 && step_ < total_steps_; --left) one_step();
}

void Trainer::one_step() {
    const int n = static_cast<int>(data_->anchors.size());
    const int batch_eff = std::min(cfg_.batch_size, n);
    const int epoch = step_ / steps_per_epoch_;
    const int offset = (step_ % steps_per_epoch_) * batch_eff;

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng ord(Rng::mix(Rng::mix(cfg_.seed, 0x0dde7ULL), static_cast<uint64_t>(epoch)));
    ord.shuffle(order);

    Rng samp = substream(cfg_.seed, Stream::sampling, static_cast<uint64_t>(step_));
    Rng maskr = substream(cfg_.seed, Stream::masking, static_cast<uint64_t>(step_));

    Tensor tau_t = tau(params_);
    const int m = static_cast<int>(train_rows_.size());

    std::vector<Tensor> cvta_terms, mrtva_terms, mlm_terms, plm_terms;
    std::vector<Tensor> v_bars, w_bars, itm_rows;
    std::vector<int> itm_labels;

    for (int b = 0; b < batch_eff; ++b) {
        int ai = order[static_cast<size_t>(offset + b)];
        const AnchorData& ad = data_->anchors[static_cast<size_t>(ai)];

        std::vector<float> flat;
        flat.reserve(static_cast<size_t>(m) * kPooledSide * kPooledSide);
        for (int r : train_rows_) {
            const auto& f = ad.pooled[static_cast<size_t>(r)];
            flat.insert(flat.end(), f.begin(), f.end());
        }
        Tensor V = encode_pooled(params_, Tensor::from_vec({m, kPooledSide * kPooledSide}, std::move(flat)));

        std::vector<int> kws = bag_keywords(ad, train_rows_);
        Tensor T = text_encode_rows(params_, kws);
        PositiveSet pos = select_topk_positive(V, T, cfg_.k_o);

        if (cfg_.enable_cvta) cvta_terms.push_back(cvta_loss(V, T, pos, tau_t));

        if (cfg_.enable_mrtva) {
            auto edges = cfg_.enable_parent_child ? hierarchy_edges(ad.index, train_rows_)
                                                  : bipartite_level_edges(ad.index, train_rows_);
            if (!edges.empty()) {
                std::vector<Tensor> g(static_cast<size_t>(m)), h(static_cast<size_t>(m));
                for (int i = 0; i < m; ++i) {
                    Tensor vi = slice(V, 0, i, 1);
                    FusedRep f = fuse(params_, vi, take_rows(T, pos.rows[static_cast<size_t>(i)]),
                                      cfg_.k_o);
                    g[static_cast<size_t>(i)] = project_g(params_, f.z);
                    h[static_cast<size_t>(i)] = predict_h(params_, g[static_cast<size_t>(i)]);
                }
                mrtva_terms.push_back(mrtva_edges(g, h, edges));
            }
        }

        v_bars.push_back(mean_row(V));
        w_bars.push_back(mean_row(T));

        // matched pair on the coarsest included member, mismatched pair
        // against a uniformly drawn other bag's keywords
        Tensor v0 = slice(V, 0, 0, 1);
        FusedRep fp = fuse(params_, v0, take_rows(T, pos.rows[0]), cfg_.k_o);
        itm_rows.push_back(fp.z);
        itm_labels.push_back(1);
        int aj = static_cast<int>(samp.next_below(static_cast<uint64_t>(n - 1)));
        if (aj >= ai) ++aj;
        std::vector<int> neg_kws = bag_keywords(data_->anchors[static_cast<size_t>(aj)], train_rows_);
        Tensor Tn = text_encode_rows(params_, neg_kws);
        PositiveSet pn = select_topk_positive(v0, Tn, cfg_.k_o);
        FusedRep fn = fuse(params_, v0, take_rows(Tn, pn.rows[0]), cfg_.k_o);
        itm_rows.push_back(fn.z);
        itm_labels.push_back(0);

        // one member per anchor feeds the token-level heads
        int mi = static_cast<int>(samp.next_below(static_cast<uint64_t>(m)));
        Tensor vm = slice(V, 0, mi, 1);
        const auto& toks = ad.captions[static_cast<size_t>(train_rows_[static_cast<size_t>(mi)])].tokens;
        MlmResult mr = mlm_loss(params_, vm, toks, maskr, cfg_.mask_rate);
        mlm_terms.push_back(mr.loss);
        PlmResult pr = plm_loss(params_, vm, toks, maskr);
        if (pr.skipped) ++plm_skips_;
        plm_terms.push_back(pr.loss);
    }

    Tensor cvta_t = cvta_terms.empty() ? Tensor() : mean_of(cvta_terms);
    Tensor mrtva_t = mrtva_terms.empty() ? Tensor() : mean_of(mrtva_terms);
    Tensor itc_t = itc_loss(concat(v_bars, 0), concat(w_bars, 0), queue_v_, queue_w_, tau_t);
    Tensor itm_t = itm_loss(itm_logits(params_, concat(itm_rows, 0)), itm_labels);
    Tensor mlm_t = mean_of(mlm_terms);
    Tensor plm_t = mean_of(plm_terms);

    TotalLoss tl = combine_losses(cvta_t, mrtva_t, itc_t, itm_t, mlm_t, plm_t,
                                  LossFlags{cfg_.enable_cvta, cfg_.enable_mrtva});
    const LossBreakdown& v = tl.values;
    for (double x : {v.total, v.bl, v.cvta, v.mrtva, v.itc, v.itm, v.mlm, v.plm})
        if (!std::isfinite(x)) {
            char msg[256];
            std::snprintf(msg, sizeof(msg),
                          "train: non-finite loss at step %d: total=%g cvta=%g mrtva=%g itc=%g "
                          "itm=%g mlm=%g plm=%g",
                          step_, v.total, v.cvta, v.mrtva, v.itc, v.itm, v.mlm, v.plm);
            throw std::runtime_error(msg);
        }

    // enqueue this batch's pairs only after the loss used the older negatives
    for (size_t b = 0; b < v_bars.size(); ++b) {
        queue_v_.push(v_bars[b].data());
        queue_w_.push(w_bars[b].data());
    }

    auto ps = params_.all();
    for (auto& t : ps) t.zero_grad();
    backward(tl.total);

    float lr = lr_schedule(step_, cfg_, total_steps_);
    AdamHyper hyp{lr, cfg_.beta1, cfg_.beta2, 1e-8f, cfg_.weight_decay};
    for (size_t i = 0; i < ps.size(); ++i) {
        AdamHyper h = hyp;
        if (params_.named[i].first == "log_tau") h.weight_decay = 0.0f; // decay would drag tau to 1
        adamw_step(ps[i], opt_[i], h);
    }
    { // contrastive floor: sharper than tau = 0.01 destabilizes the InfoNCE terms
        auto lt = params_.get("log_tau").mutable_data();
        const float floor = std::log(0.01f);
        if (lt[0] < floor) lt[0] = floor;
    }

    char line[256];
    std::snprintf(line, sizeof(line), "%d %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.8f", step_,
                  v.total, v.bl, v.cvta, v.mrtva, v.itc, v.itm, v.mlm, v.plm, lr);
    log_.emplace_back(line);
    records_.push_back(StepRecord{step_, v, lr});
    ++step_;
}

// -------------------------------------------------------------- checkpointing

static std::vector<float> queue_blob(const FeatureQueue& q) {
    std::vector<float> rows = q.flat();
    std::vector<float> blob;
    blob.reserve(rows.size() + 1);
    blob.push_back(static_cast<float>(q.size()));
    blob.insert(blob.end(), rows.begin(), rows.end());
    return blob;
}

static void restore_queue(FeatureQueue& q, const Tensor& blob) {
    auto d = blob.data();
    if (d.empty()) throw std::runtime_error("trainer load: empty queue blob");
    int count = static_cast<int>(d[0]);
    size_t want = static_cast<size_t>(count) * static_cast<size_t>(q.width());
    if (d.size() != want + 1)
        throw std::runtime_error("trainer load: queue blob holds " + std::to_string(d.size() - 1) +
                                 " floats, header says " + std::to_string(want));
    q.restore(std::vector<float>(d.begin() + 1, d.end()));
}

void Trainer::save(const std::string& path) const {
    Checkpoint ck;
    ck.config_hash = config_hash(cfg_);
    ck.seed = cfg_.seed;
    ck.step = step_;
    ck.tensors = params_.named;
    for (size_t i = 0; i < opt_.size(); ++i) {
        const std::string& name = params_.named[i].first;
        int len = static_cast<int>(opt_[i].m.size());
        ck.tensors.emplace_back("opt_m/" + name, Tensor::from_vec({len}, opt_[i].m));
        ck.tensors.emplace_back("opt_v/" + name, Tensor::from_vec({len}, opt_[i].v));
    }
    ck.tensors.emplace_back("queue/v", Tensor::from_vec({queue_v_.size() * queue_v_.width() + 1},
                                                        queue_blob(queue_v_)));
    ck.tensors.emplace_back("queue/w", Tensor::from_vec({queue_w_.size() * queue_w_.width() + 1},
                                                        queue_blob(queue_w_)));
    save_checkpoint(path, ck);
}

static const Tensor& find_tensor(const Checkpoint& ck, const std::string& name) {
    for (const auto& [n, t] : ck.tensors)
        if (n == name) return t;
    throw std::runtime_error("trainer load: checkpoint missing tensor '" + name + "'");
}

void Trainer::load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path, config_hash(cfg_));
    load_into(params_, ck);
    for (size_t i = 0; i < opt_.size(); ++i) {
        const std::string& name = params_.named[i].first;
        auto m = find_tensor(ck, "opt_m/" + name).data();
        auto v = find_tensor(ck, "opt_v/" + name).data();
        if (m.size() != opt_[i].m.size() || v.size() != opt_[i].v.size())
            throw std::runtime_error("trainer load: optimizer state size mismatch for '" + name +
                                     "'");
        opt_[i].m.assign(m.begin(), m.end());
        opt_[i].v.assign(v.begin(), v.end());
        opt_[i].step = ck.step;
    }
    restore_queue(queue_v_, find_tensor(ck, "queue/v"));
    restore_queue(queue_w_, find_tensor(ck, "queue/w"));
    step_ = static_cast<int>(ck.step);
    if (step_ > total_steps_)
        throw std::runtime_error("trainer load: checkpoint step " + std::to_string(step_) +
                                 " beyond schedule " + std::to_string(total_steps_));
}

} // namespace mralign
