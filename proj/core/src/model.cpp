#include "mralign/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "mralign/rng.hpp"

namespace mralign {

void ModelParams::add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : named)
        if (n == name) throw std::invalid_argument("ModelParams::add: duplicate name '" + name + "'");
    named.emplace_back(name, std::move(t));
}

Tensor ModelParams::get(const std::string& name) const {
    for (const auto& [n, t] : named)
        if (n == name) return t;
    throw std::invalid_argument("ModelParams::get: unknown name '" + name + "'");
}

bool ModelParams::has(const std::string& name) const {
    for (const auto& [n, _] : named)
        if (n == name) return true;
    return false;
}

std::vector<Tensor> ModelParams::all() const {
    std::vector<Tensor> out;
    out.reserve(named.size());
    for (const auto& [_, t] : named) out.push_back(t);
    return out;
}

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.d < 1 || cfg.d_proj < 1 || cfg.vision_hidden < 1 || cfg.fusion_hidden < 1 ||
        cfg.n_fusion_blocks < 1 || cfg.vocab_size < 1)
        throw std::invalid_argument("ModelParams::init: all dims must be >= 1");
    ModelParams p;
    p.cfg = cfg;
    Rng rng = substream(seed, Stream::init);
    const int d = cfg.d, dp = cfg.d_proj, pooled = kPooledSide * kPooledSide;
    auto w = [&](std::vector<int> shape, float fan_in) {
        return Tensor::randn(std::move(shape), rng, 1.0f / std::sqrt(fan_in), true);
    };
    auto b = [&](int n) { return Tensor::zeros({1, n}, true); };

    p.add("vision/w1", w({pooled, cfg.vision_hidden}, static_cast<float>(pooled)));
    p.add("vision/b1", b(cfg.vision_hidden));
    p.add("vision/w2", w({cfg.vision_hidden, d}, static_cast<float>(cfg.vision_hidden)));
    p.add("vision/b2", b(d));

    p.add("text/emb", Tensor::randn({cfg.vocab_size, d}, rng, 0.5f, true));
    p.add("text/mix_w", w({d, d}, static_cast<float>(d)));
    p.add("text/mix_b", b(d));

    p.add("fuse/type_img", Tensor::randn({1, d}, rng, 0.1f, true));
    p.add("fuse/pad", Tensor::randn({1, d}, rng, 0.1f, true));
    char name[64];
    for (int i = 0; i < cfg.n_fusion_blocks; ++i) {
        auto block = [&](const char* part, Tensor t) {
            std::snprintf(name, sizeof name, "fuse/b%d/%s", i, part);
            p.add(name, std::move(t));
        };
        block("wq", w({d, d}, static_cast<float>(d)));
        block("wk", w({d, d}, static_cast<float>(d)));
        block("wv", w({d, d}, static_cast<float>(d)));
        block("wo", w({d, d}, static_cast<float>(4 * d))); // damped residual writes
        block("mlp_w1", w({d, cfg.fusion_hidden}, static_cast<float>(d)));
        block("mlp_b1", b(cfg.fusion_hidden));
        block("mlp_w2", w({cfg.fusion_hidden, d}, static_cast<float>(4 * cfg.fusion_hidden)));
        block("mlp_b2", b(d));
    }

    p.add("head/pj_w", w({d, dp}, static_cast<float>(d)));
    p.add("head/pj_b", b(dp));
    p.add("head/pd_w", w({dp, dp}, static_cast<float>(dp)));
    p.add("head/pd_b", b(dp));

    p.add("head/itm_w", w({d, 2}, static_cast<float>(d)));
    p.add("head/itm_b", b(2));
    p.add("head/mlm_w", w({d, cfg.vocab_size}, static_cast<float>(d)));
    p.add("head/mlm_b", b(cfg.vocab_size));
    p.add("mask_emb", Tensor::randn({1, d}, rng, 0.1f, true));

    p.add("plm/wq", w({d, d}, static_cast<float>(d)));
    p.add("plm/wk", w({d, d}, static_cast<float>(d)));
    p.add("plm/wv", w({d, d}, static_cast<float>(d)));
    p.add("plm/wo", w({d, d}, static_cast<float>(4 * d)));
    p.add("plm/mlp_w1", w({d, cfg.fusion_hidden}, static_cast<float>(d)));
    p.add("plm/mlp_b1", b(cfg.fusion_hidden));
    p.add("plm/mlp_w2", w({cfg.fusion_hidden, d}, static_cast<float>(4 * cfg.fusion_hidden)));
    p.add("plm/mlp_b2", b(d));
    p.add("plm/out_w", w({d, cfg.vocab_size}, static_cast<float>(d)));
    p.add("plm/out_b", b(cfg.vocab_size));

    p.add("log_tau", Tensor::scalar(std::log(cfg.tau_init), true));
    return p;
}

Tensor tau(const ModelParams& p) { return exp(p.get("log_tau")); }

Tensor encode_pooled(const ModelParams& p, const Tensor& x) {
    const int pooled = kPooledSide * kPooledSide;
    if (x.ndim() != 2 || x.dim(1) != pooled)
        throw std::invalid_argument("encode_pooled: want [n, " + std::to_string(pooled) + "], got " +
                                    shape_str(x.shape()));
    // Standardize each row: raw pooled intensities share a dominant brightness
    // component that would leave all features near-parallel, while the class
    // texture lives in the residual ripple.
    const float inv_n = 1.0f / static_cast<float>(pooled);
    Tensor ones_col = Tensor::full({pooled, 1}, 1.0f);
    Tensor ones_row = Tensor::full({1, pooled}, 1.0f);
    Tensor mu = scale(matmul(x, ones_col), inv_n);
    Tensor centered = sub(x, matmul(mu, ones_row));
    Tensor var = scale(matmul(mul(centered, centered), ones_col), inv_n);
    Tensor inv_sigma = exp(scale(log(add(var, Tensor::full({x.dim(0), 1}, 1e-6f))), -0.5f));
    Tensor xn = mul(centered, matmul(inv_sigma, ones_row));

    Tensor h = tanh(affine_rows(xn, p.get("vision/w1"), p.get("vision/b1")));
    return affine_rows(h, p.get("vision/w2"), p.get("vision/b2"));
}

Tensor vision_encode(const ModelParams& p, const std::vector<float>& patch512) {
    if (patch512.size() != static_cast<size_t>(kPatchSide) * kPatchSide)
        throw std::invalid_argument("vision_encode: want a " + std::to_string(kPatchSide) + "x" +
                                    std::to_string(kPatchSide) + " patch, got " +
                                    std::to_string(patch512.size()) + " values");
    std::vector<float> pooled(static_cast<size_t>(kPooledSide) * kPooledSide);
    pool8(patch512.data(), pooled.data());
    return encode_pooled(p, Tensor::from_vec({1, kPooledSide * kPooledSide}, std::move(pooled)));
}

Tensor text_encode_rows(const ModelParams& p, const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("text_encode_rows: empty id list");
    for (int id : ids)
        if (id < 0 || id >= p.cfg.vocab_size)
            throw std::invalid_argument("text_encode_rows: token " + std::to_string(id) + " outside [0, " +
                                        std::to_string(p.cfg.vocab_size) + ")");
    Tensor e = take_rows(p.get("text/emb"), ids);
    return affine_rows(e, p.get("text/mix_w"), p.get("text/mix_b"));
}

Tensor text_encode(const ModelParams& p, int token_id) { return text_encode_rows(p, {token_id}); }

namespace {

// X + (softmax(Q K^T / sqrt(d) + mask) V) Wo with per-key additive mask rows
Tensor attention_block(const ModelParams& p, const std::string& prefix, const Tensor& X,
                       const Tensor& key_mask_row) {
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(p.cfg.d));
    Tensor q = matmul(X, p.get(prefix + "wq"));
    Tensor k = matmul(X, p.get(prefix + "wk"));
    Tensor v = matmul(X, p.get(prefix + "wv"));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    if (key_mask_row.defined()) {
        Tensor ones = Tensor::full({X.dim(0), 1}, 1.0f);
        scores = add(scores, matmul(ones, key_mask_row)); // broadcast mask to every row
    }
    Tensor att = matmul(softmax(scores, 1), v);
    return add(X, matmul(att, p.get(prefix + "wo")));
}

Tensor mlp_block(const ModelParams& p, const std::string& prefix, const Tensor& X) {
    Tensor h = tanh(affine_rows(X, p.get(prefix + "mlp_w1"), p.get(prefix + "mlp_b1")));
    return add(X, affine_rows(h, p.get(prefix + "mlp_w2"), p.get(prefix + "mlp_b2")));
}

} // namespace

FusedRep fuse(const ModelParams& p, const Tensor& v, const Tensor& W, int pad_to) {
    if (v.ndim() != 2 || v.dim(0) != 1 || v.dim(1) != p.cfg.d)
        throw std::invalid_argument("fuse: image row must be [1, " + std::to_string(p.cfg.d) + "], got " +
                                    shape_str(v.shape()));
    if (W.ndim() != 2 || W.dim(0) < 1 || W.dim(1) != p.cfg.d)
        throw std::invalid_argument("fuse: keyword rows must be [k>=1, " + std::to_string(p.cfg.d) +
                                    "], got " + shape_str(W.shape()));
    const int k = W.dim(0);
    const int slots = pad_to < 0 ? k : pad_to;
    if (slots < k)
        throw std::invalid_argument("fuse: pad_to " + std::to_string(slots) + " smaller than keyword count " +
                                    std::to_string(k));

    std::vector<Tensor> rows;
    rows.push_back(add(v, p.get("fuse/type_img")));
    rows.push_back(W);
    for (int i = k; i < slots; ++i) rows.push_back(p.get("fuse/pad"));
    Tensor X = concat(rows, 0);

    Tensor mask; // PAD keys excluded from every attention row
    if (slots > k) {
        std::vector<float> m(static_cast<size_t>(slots) + 1, 0.0f);
        for (int i = k + 1; i <= slots; ++i) m[static_cast<size_t>(i)] = -1e9f;
        mask = Tensor::from_vec({1, slots + 1}, std::move(m));
    }
    char prefix[32];
    for (int i = 0; i < p.cfg.n_fusion_blocks; ++i) {
        std::snprintf(prefix, sizeof prefix, "fuse/b%d/", i);
        X = attention_block(p, prefix, X, mask);
        X = mlp_block(p, prefix, X);
    }
    FusedRep rep;
    rep.z = slice(X, 0, 0, 1);
    rep.keyword_states = slice(X, 0, 1, k);
    rep.n_real = k;
    return rep;
}

Tensor project_g(const ModelParams& p, const Tensor& z) {
    return affine_rows(z, p.get("head/pj_w"), p.get("head/pj_b"));
}

Tensor predict_h(const ModelParams& p, const Tensor& g) {
    return affine_rows(g, p.get("head/pd_w"), p.get("head/pd_b"));
}

Tensor itm_logits(const ModelParams& p, const Tensor& z) {
    return affine_rows(z, p.get("head/itm_w"), p.get("head/itm_b"));
}

Tensor mlm_logits(const ModelParams& p, const Tensor& states) {
    return affine_rows(states, p.get("head/mlm_w"), p.get("head/mlm_b"));
}

Tensor plm_logits(const ModelParams& p, const Tensor& img, const std::vector<int>& tokens) {
    if (img.ndim() != 2 || img.dim(0) != 1 || img.dim(1) != p.cfg.d)
        throw std::invalid_argument("plm_logits: image row must be [1, " + std::to_string(p.cfg.d) +
                                    "], got " + shape_str(img.shape()));
    if (tokens.empty()) throw std::invalid_argument("plm_logits: empty token sequence");
    const int L = static_cast<int>(tokens.size());

    // input sequence [img, w_0 .. w_{L-2}]: position t predicts tokens[t]
    std::vector<Tensor> rows;
    rows.push_back(img);
    if (L > 1) rows.push_back(text_encode_rows(p, {tokens.begin(), tokens.end() - 1}));
    Tensor X = concat(rows, 0);

    std::vector<float> m(static_cast<size_t>(L) * L, 0.0f);
    for (int r = 0; r < L; ++r)
        for (int c = r + 1; c < L; ++c) m[static_cast<size_t>(r) * L + c] = -1e9f;
    Tensor causal = Tensor::from_vec({L, L}, std::move(m));

    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(p.cfg.d));
    Tensor q = matmul(X, p.get("plm/wq"));
    Tensor k = matmul(X, p.get("plm/wk"));
    Tensor v = matmul(X, p.get("plm/wv"));
    Tensor scores = add(scale(matmul(q, transpose(k)), inv_sqrt_d), causal);
    Tensor att = matmul(softmax(scores, 1), v);
    Tensor Y = add(X, matmul(att, p.get("plm/wo")));
    Tensor h = tanh(affine_rows(Y, p.get("plm/mlp_w1"), p.get("plm/mlp_b1")));
    Y = add(Y, affine_rows(h, p.get("plm/mlp_w2"), p.get("plm/mlp_b2")));
    return affine_rows(Y, p.get("plm/out_w"), p.get("plm/out_b"));
}

// ------------------------------------------------------------- checkpointing

namespace {
constexpr char kMagic[] = "mralign-ckpt v1\n";

template <typename T>
void put(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void get_raw(std::ifstream& f, T& v, const std::string& path) {
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!f) throw std::runtime_error("load_checkpoint: '" + path + "' truncated");
}
} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open '" + path + "' for writing");
    f.write(kMagic, sizeof kMagic - 1);
    put(f, ckpt.config_hash);
    put(f, ckpt.seed);
    put(f, ckpt.step);
    put(f, static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        put(f, static_cast<uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) put(f, static_cast<int32_t>(t.dim(i)));
        auto d = t.data();
        f.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("save_checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path, uint64_t want_config_hash) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    char magic[sizeof kMagic - 1];
    f.read(magic, sizeof magic);
    if (!f || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw std::runtime_error("load_checkpoint: '" + path + "' is not a v1 checkpoint");
    Checkpoint c;
    get_raw(f, c.config_hash, path);
    get_raw(f, c.seed, path);
    get_raw(f, c.step, path);
    if (want_config_hash != 0 && c.config_hash != want_config_hash) {
        char msg[128];
        std::snprintf(msg, sizeof msg, "load_checkpoint: config hash %016llx does not match expected %016llx",
                      static_cast<unsigned long long>(c.config_hash),
                      static_cast<unsigned long long>(want_config_hash));
        throw std::runtime_error(msg);
    }
    uint32_t n = 0;
    get_raw(f, n, path);
    for (uint32_t i = 0; i < n; ++i) {
        uint32_t name_len = 0;
        get_raw(f, name_len, path);
        if (name_len > 4096) throw std::runtime_error("load_checkpoint: '" + path + "' has a corrupt name length");
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (!f) throw std::runtime_error("load_checkpoint: '" + path + "' truncated");
        uint32_t ndim = 0;
        get_raw(f, ndim, path);
        if (ndim > 8) throw std::runtime_error("load_checkpoint: '" + path + "' has a corrupt rank");
        std::vector<int> shape(ndim);
        int64_t numel = 1;
        for (uint32_t j = 0; j < ndim; ++j) {
            int32_t dim = 0;
            get_raw(f, dim, path);
            if (dim < 1) throw std::runtime_error("load_checkpoint: '" + path + "' has a corrupt dim");
            shape[j] = dim;
            numel *= dim;
        }
        std::vector<float> data(static_cast<size_t>(numel));
        f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
        if (!f) throw std::runtime_error("load_checkpoint: '" + path + "' truncated");
        c.tensors.emplace_back(std::move(name), Tensor::from_vec(std::move(shape), std::move(data)));
    }
    return c;
}

void load_into(ModelParams& p, const Checkpoint& ckpt) {
    for (auto& [name, dst] : p.named) {
        const Tensor* src = nullptr;
        for (const auto& [n, t] : ckpt.tensors)
            if (n == name) {
                src = &t;
                break;
            }
        if (!src) throw std::runtime_error("load_into: checkpoint missing tensor '" + name + "'");
        if (src->shape() != dst.shape())
            throw std::runtime_error("load_into: shape mismatch for '" + name + "': checkpoint " +
                                     shape_str(src->shape()) + " vs model " + shape_str(dst.shape()));
        auto out = dst.mutable_data();
        auto in = src->data();
        std::copy(in.begin(), in.end(), out.begin());
    }
}

} // namespace mralign
