#include "mralign/bags.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace mralign {

Vocabulary Vocabulary::make(int n_classes, int per_group, int n_noise) {
    if (n_classes < 1 || per_group < 1 || n_noise < 0)
        throw std::invalid_argument("Vocabulary::make: need n_classes >= 1, per_group >= 1, n_noise >= 0, got " +
                                    std::to_string(n_classes) + "/" + std::to_string(per_group) + "/" +
                                    std::to_string(n_noise));
    Vocabulary v;
    v.n_classes = n_classes;
    v.per_group = per_group;
    v.n_noise = n_noise;
    char buf[64];
    for (int c = 0; c < n_classes; ++c) {
        for (int j = 0; j < per_group; ++j) {
            std::snprintf(buf, sizeof buf, "c%d_coarse_%d", c, j);
            v.tokens.emplace_back(buf);
        }
        for (int j = 0; j < per_group; ++j) {
            std::snprintf(buf, sizeof buf, "c%d_fine_%d", c, j);
            v.tokens.emplace_back(buf);
        }
    }
    for (int j = 0; j < n_noise; ++j) {
        std::snprintf(buf, sizeof buf, "noise_%d", j);
        v.tokens.emplace_back(buf);
    }
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i) v.ids.emplace(v.tokens[i], i);
    return v;
}

namespace {

void check_class(const Vocabulary& v, int cls) {
    if (cls < 0 || cls >= v.n_classes)
        throw std::invalid_argument("Vocabulary: class " + std::to_string(cls) + " outside [0, " +
                                    std::to_string(v.n_classes) + ")");
}

} // namespace

int Vocabulary::coarse_token(int cls, int j) const {
    check_class(*this, cls);
    if (j < 0 || j >= per_group)
        throw std::invalid_argument("Vocabulary::coarse_token: index " + std::to_string(j) + " outside [0, " +
                                    std::to_string(per_group) + ")");
    return cls * 2 * per_group + j;
}

int Vocabulary::fine_token(int cls, int j) const {
    check_class(*this, cls);
    if (j < 0 || j >= per_group)
        throw std::invalid_argument("Vocabulary::fine_token: index " + std::to_string(j) + " outside [0, " +
                                    std::to_string(per_group) + ")");
    return cls * 2 * per_group + per_group + j;
}

int Vocabulary::noise_token(int j) const {
    if (j < 0 || j >= n_noise)
        throw std::invalid_argument("Vocabulary::noise_token: index " + std::to_string(j) + " outside [0, " +
                                    std::to_string(n_noise) + ")");
    return n_classes * 2 * per_group + j;
}

std::vector<int> Vocabulary::coarse_group(int cls) const {
    check_class(*this, cls);
    std::vector<int> g(static_cast<size_t>(per_group));
    for (int j = 0; j < per_group; ++j) g[static_cast<size_t>(j)] = coarse_token(cls, j);
    return g;
}

std::vector<int> Vocabulary::fine_group(int cls) const {
    check_class(*this, cls);
    std::vector<int> g(static_cast<size_t>(per_group));
    for (int j = 0; j < per_group; ++j) g[static_cast<size_t>(j)] = fine_token(cls, j);
    return g;
}

std::vector<int> Vocabulary::noise_group() const {
    std::vector<int> g(static_cast<size_t>(n_noise));
    for (int j = 0; j < n_noise; ++j) g[static_cast<size_t>(j)] = noise_token(j);
    return g;
}

bool Vocabulary::is_noise(int id) const {
    if (id < 0 || id >= size())
        throw std::invalid_argument("Vocabulary::is_noise: id " + std::to_string(id) + " outside [0, " +
                                    std::to_string(size()) + ")");
    return id >= n_classes * 2 * per_group;
}

bool Vocabulary::is_coarse(int id) const { return !is_noise(id) && id % (2 * per_group) < per_group; }

bool Vocabulary::is_fine(int id) const { return !is_noise(id) && id % (2 * per_group) >= per_group; }

int Vocabulary::class_of(int id) const {
    if (is_noise(id)) return -1;
    return id / (2 * per_group);
}

const std::string& Vocabulary::token_string(int id) const {
    if (id < 0 || id >= size())
        throw std::invalid_argument("Vocabulary::token_string: id " + std::to_string(id) + " outside [0, " +
                                    std::to_string(size()) + ")");
    return tokens[static_cast<size_t>(id)];
}

int Vocabulary::id_of(const std::string& s) const {
    auto it = ids.find(s);
    if (it == ids.end()) throw std::invalid_argument("Vocabulary::id_of: unknown token '" + s + "'");
    return it->second;
}

std::vector<int> synth_caption(const PatchId& pid, int label, const Vocabulary& vocab, Rng& rng,
                               const CaptionConfig& cfg) {
    check_class(vocab, label);
    if (cfg.noise_rate < 0.0)
        throw std::invalid_argument("synth_caption: noise_rate must be >= 0, got " + std::to_string(cfg.noise_rate));
    int li = level_index(pid.level); // validates the level
    std::vector<int> cap = li <= 1 ? vocab.coarse_group(label) : vocab.fine_group(label);
    int extra = vocab.n_noise > 0 ? rng.next_poisson(cfg.noise_rate) : 0;
    if (extra > 0) {
        std::vector<int> pool = vocab.noise_group();
        if (cfg.noise_pool > 0 && cfg.noise_pool < vocab.n_noise) {
            // slide-level subset, independent of per-caption rng state
            Rng prng(Rng::mix(0x6e015eULL, static_cast<uint64_t>(static_cast<uint32_t>(pid.slide_id))));
            prng.shuffle(pool);
            pool.resize(static_cast<size_t>(cfg.noise_pool));
        }
        for (int i = 0; i < extra; ++i)
            cap.push_back(pool[static_cast<size_t>(rng.next_below(pool.size()))]);
    }
    rng.shuffle(cap);
    return cap;
}

uint64_t caption_seed(uint64_t data_seed, const PatchId& pid) {
    uint64_t h = Rng::mix(data_seed, 0xca9710ULL);
    h = Rng::mix(h, static_cast<uint64_t>(pid.slide_id));
    h = Rng::mix(h, static_cast<uint64_t>(pid.anchor_idx));
    h = Rng::mix(h, static_cast<uint64_t>(pid.level));
    h = Rng::mix(h, (static_cast<uint64_t>(static_cast<uint32_t>(pid.row)) << 32) |
                        static_cast<uint32_t>(pid.col));
    return h;
}

std::vector<CaptionEntry> synth_bag_captions(const PatchIndex& index, int label,
                                             const Vocabulary& vocab, uint64_t data_seed,
                                             const CaptionConfig& cfg) {
    std::vector<CaptionEntry> out;
    out.reserve(index.members.size());
    for (const PatchId& pid : index.members) {
        Rng rng(caption_seed(data_seed, pid));
        out.push_back({pid, synth_caption(pid, label, vocab, rng, cfg)});
    }
    return out;
}

VisualBag make_visual_bag(const Slide& slide, const Anchor& anchor, const PatchIndex& index,
                          const PatchEncoder& encode) {
    PatchIndex want = expand_children(index.anchor);
    if (index.members != want.members)
        throw std::invalid_argument("make_visual_bag: index members do not form the anchor's quadtree (" +
                                    std::to_string(index.members.size()) + " members)");
    std::vector<Tensor> rows;
    rows.reserve(index.members.size());
    int d = -1;
    for (const PatchId& pid : index.members) {
        Tensor r = encode(read_patch(slide, anchor, pid));
        if (r.ndim() != 2 || r.dim(0) != 1)
            throw std::runtime_error("make_visual_bag: encoder must return a [1, d] row, got " + shape_str(r.shape()));
        if (d < 0) d = r.dim(1);
        if (r.dim(1) != d)
            throw std::runtime_error("make_visual_bag: encoder width changed from " + std::to_string(d) + " to " +
                                     std::to_string(r.dim(1)));
        rows.push_back(r);
    }
    VisualBag bag;
    bag.anchor = index.anchor;
    bag.members = index.members;
    bag.V = concat(rows, 0);
    return bag;
}

TextBag make_text_bag(const PatchId& anchor, const std::vector<CaptionEntry>& captions,
                      const TokenEncoder& encode) {
    TextBag bag;
    bag.anchor = anchor;
    std::unordered_set<int> seen;
    for (const CaptionEntry& e : captions) {
        bag.per_patch.emplace_back(e.pid, e.tokens);
        for (int t : e.tokens)
            if (seen.insert(t).second) bag.keywords.push_back(t);
    }
    if (bag.keywords.empty())
        throw std::runtime_error("make_text_bag: zero keywords across the bag of slide " +
                                 std::to_string(anchor.slide_id) + " anchor " + std::to_string(anchor.anchor_idx));
    std::vector<Tensor> rows;
    rows.reserve(bag.keywords.size());
    int d = -1;
    for (int t : bag.keywords) {
        Tensor r = encode(t);
        if (r.ndim() != 2 || r.dim(0) != 1)
            throw std::runtime_error("make_text_bag: encoder must return a [1, d] row, got " + shape_str(r.shape()));
        if (d < 0) d = r.dim(1);
        if (r.dim(1) != d)
            throw std::runtime_error("make_text_bag: encoder width changed from " + std::to_string(d) + " to " +
                                     std::to_string(r.dim(1)));
        rows.push_back(r);
    }
    bag.T = concat(rows, 0);
    return bag;
}

void save_captions(const std::string& path, const std::vector<CaptionEntry>& entries,
                   const Vocabulary& vocab) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("save_captions: cannot open '" + path + "' for writing");
    for (const CaptionEntry& e : entries) {
        f << e.pid.slide_id << ' ' << e.pid.anchor_idx << ' ' << e.pid.level << ' ' << e.pid.row << ' '
          << e.pid.col << " :";
        for (int t : e.tokens) f << ' ' << vocab.token_string(t);
        f << '\n';
    }
    if (!f) throw std::runtime_error("save_captions: write to '" + path + "' failed");
}

std::vector<CaptionEntry> load_captions(const std::string& path, const Vocabulary& vocab) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_captions: cannot open '" + path + "'");
    std::vector<CaptionEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        CaptionEntry e;
        std::string sep;
        if (!(ss >> e.pid.slide_id >> e.pid.anchor_idx >> e.pid.level >> e.pid.row >> e.pid.col >> sep) ||
            sep != ":")
            throw std::runtime_error("load_captions: malformed line " + std::to_string(lineno) + " in '" + path +
                                     "'");
        std::string tok;
        while (ss >> tok) e.tokens.push_back(vocab.id_of(tok));
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace mralign
