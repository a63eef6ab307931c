#include "mralign/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mralign {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int64_t to_int(const std::string& key, const std::string& v) {
    size_t pos = 0;
    int64_t out;
    try {
        out = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
    }
    if (pos != v.size())
        throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
    return out;
}

double to_float(const std::string& key, const std::string& v) {
    size_t pos = 0;
    double out;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
    }
    if (pos != v.size())
        throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    int64_t x = to_int(key, v);
    if (x != 0 && x != 1)
        throw std::invalid_argument("config: " + key + " must be 0 or 1, got '" + v + "'");
    return x == 1;
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::string item;
    std::stringstream ss(v);
    while (std::getline(ss, item, ','))
        out.push_back(static_cast<int>(to_int(key, trim(item))));
    return out;
}

// closed-world dispatch: the key set is exactly what config_dump emits
void set_field(TrainConfig& cfg, const std::string& key, const std::string& v) {
    auto i = [&] { return static_cast<int>(to_int(key, v)); };
    auto f = [&] { return static_cast<float>(to_float(key, v)); };

    if (key == "model.d") cfg.model.d = i();
    else if (key == "model.d_proj") cfg.model.d_proj = i();
    else if (key == "model.vision_hidden") cfg.model.vision_hidden = i();
    else if (key == "model.fusion_hidden") cfg.model.fusion_hidden = i();
    else if (key == "model.n_fusion_blocks") cfg.model.n_fusion_blocks = i();
    else if (key == "model.vocab_size") cfg.model.vocab_size = i();
    else if (key == "model.tau_init") cfg.model.tau_init = f();
    else if (key == "train.epochs") cfg.epochs = i();
    else if (key == "train.batch_size") cfg.batch_size = i();
    else if (key == "train.k_o") cfg.k_o = i();
    else if (key == "train.lr_peak") cfg.lr_peak = f();
    else if (key == "train.warmup_steps") cfg.warmup_steps = i();
    else if (key == "train.weight_decay") cfg.weight_decay = f();
    else if (key == "train.beta1") cfg.beta1 = f();
    else if (key == "train.beta2") cfg.beta2 = f();
    else if (key == "train.queue_capacity") cfg.queue_capacity = i();
    else if (key == "train.mask_rate") cfg.mask_rate = f();
    else if (key == "train.seed") cfg.seed = static_cast<uint64_t>(to_int(key, v));
    else if (key == "train.max_steps") cfg.max_steps = i();
    else if (key == "train.enable_cvta") cfg.enable_cvta = to_bool(key, v);
    else if (key == "train.enable_mrtva") cfg.enable_mrtva = to_bool(key, v);
    else if (key == "train.enable_parent_child") cfg.enable_parent_child = to_bool(key, v);
    else if (key == "train.resolution_subset") cfg.resolution_subset = to_int_list(key, v);
    else if (key == "data.n_classes") cfg.data.gen.n_classes = i();
    else if (key == "data.side_multiple") cfg.data.gen.side_multiple = i();
    else if (key == "data.texture_amp") cfg.data.gen.texture_amp = f();
    else if (key == "data.tissue_base") cfg.data.gen.tissue_base = f();
    else if (key == "data.bg_level") cfg.data.gen.bg_level = f();
    else if (key == "data.coarse_amp") cfg.data.gen.coarse_amp = f();
    else if (key == "data.fine_amp") cfg.data.gen.fine_amp = f();
    else if (key == "data.noise_amp") cfg.data.gen.noise_amp = f();
    else if (key == "data.fine_period") cfg.data.gen.fine_period = i();
    else if (key == "data.coarse_period_a") cfg.data.gen.coarse_period_a = i();
    else if (key == "data.coarse_period_b") cfg.data.gen.coarse_period_b = i();
    else if (key == "data.region_amp") cfg.data.gen.region_amp = f();
    else if (key == "data.region_cell") cfg.data.gen.region_cell = i();
    else if (key == "data.blob_amp") cfg.data.gen.blob_amp = f();
    else if (key == "data.blob_density") cfg.data.gen.blob_density = f();
    else if (key == "data.n_slides") cfg.data.n_slides = i();
    else if (key == "data.anchors_per_slide") cfg.data.anchors_per_slide = i();
    else if (key == "data.min_coverage") cfg.data.min_coverage = f();
    else if (key == "data.caption_noise_rate") cfg.data.caption_noise_rate = to_float(key, v);
    else if (key == "data.caption_noise_pool") cfg.data.caption_noise_pool = i();
    else if (key == "data.keywords_per_group") cfg.data.keywords_per_group = i();
    else if (key == "data.noise_tokens") cfg.data.noise_tokens = i();
    else if (key == "data.data_seed") cfg.data.data_seed = static_cast<uint64_t>(to_int(key, v));
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

} // namespace

TrainConfig parse_config(const std::string& text) {
    TrainConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        " is not key=value: '" + line + "'");
        set_field(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

void save_config(const std::string& path, const TrainConfig& cfg) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write " + path);
    out << config_dump(cfg);
    if (!out) throw std::runtime_error("config: write failed: " + path);
}

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
    set_field(cfg, trim(key), trim(value));
}

void save_manifest(const std::string& path, const RunManifest& m) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot write " + path);
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(m.config_hash));
    out << "mralign-manifest v1\n";
    out << "command " << m.command << "\n";
    out << "config_hash " << hex << "\n";
    out << "seed " << m.seed << "\n";
    out << "tool " << m.tool << "\n";
    for (const auto& [kind, p] : m.files) out << "file " << kind << " " << p << "\n";
    if (!out) throw std::runtime_error("manifest: write failed: " + path);
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open " + path);
    RunManifest m;
    std::string line;
    if (!std::getline(in, line) || trim(line) != "mralign-manifest v1")
        throw std::runtime_error("manifest: bad header in " + path);
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "command") {
            ss >> m.command;
        } else if (tag == "config_hash") {
            std::string hex;
            ss >> hex;
            m.config_hash = std::stoull(hex, nullptr, 16);
        } else if (tag == "seed") {
            std::string dec;
            ss >> dec;
            m.seed = std::stoull(dec, nullptr, 10);
        } else if (tag == "tool") {
            std::string rest;
            std::getline(ss, rest);
            m.tool = trim(rest);
        } else if (tag == "file") {
            std::string kind, p;
            ss >> kind;
            std::getline(ss, p);
            m.files.emplace_back(kind, trim(p));
        } else {
            throw std::runtime_error("manifest: unknown line tag '" + tag + "' in " + path);
        }
    }
    return m;
}

} // namespace mralign
