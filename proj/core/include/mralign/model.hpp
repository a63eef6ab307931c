#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mralign/slide.hpp"
#include "mralign/tensor.hpp"

namespace mralign {

struct ModelConfig {
    int d = 32;            // shared feature width
    int d_proj = 16;       // projection/prediction head width
    int vision_hidden = 64;
    int fusion_hidden = 64;
    int n_fusion_blocks = 2;
    int vocab_size = 64;
    float tau_init = 0.07f;

    bool operator==(const ModelConfig&) const = default;
};

// Named parameter registry. All tensors require grad and are shared handles,
// so optimizer updates through `all()` are visible everywhere.
struct ModelParams {
    ModelConfig cfg;
    std::vector<std::pair<std::string, Tensor>> named;

    static ModelParams init(const ModelConfig& cfg, uint64_t seed);

    Tensor get(const std::string& name) const; // unknown name -> error
    bool has(const std::string& name) const;
    std::vector<Tensor> all() const;

    void add(const std::string& name, Tensor t);
};

// temperature as a graph tensor: exp(log_tau) > 0 structurally
Tensor tau(const ModelParams& p);

// pooled rows [n, 64*64] -> features [n, d]; the canonical patch path is
// vision_encode = encode_pooled(pool8(patch))
Tensor encode_pooled(const ModelParams& p, const Tensor& x);
Tensor vision_encode(const ModelParams& p, const std::vector<float>& patch512);

// token id(s) -> feature rows [k, d] via embedding + mixing layer
Tensor text_encode(const ModelParams& p, int token_id);
Tensor text_encode_rows(const ModelParams& p, const std::vector<int>& ids);

struct FusedRep {
    Tensor z;              // [1, d] image-slot output
    Tensor keyword_states; // [n_real, d] keyword-slot outputs
    int n_real = 0;
};

// fusion stack over the sequence [image slot, keyword rows]: per block,
// single-head self-attention with PAD keys masked out, then a residual MLP.
// Keyword slots carry no positional signal, so z is permutation-invariant in
// them. `pad_to` < 0 keeps the raw keyword count; otherwise rows of the PAD
// embedding fill up to pad_to slots.
FusedRep fuse(const ModelParams& p, const Tensor& v, const Tensor& W, int pad_to = -1);

Tensor project_g(const ModelParams& p, const Tensor& z); // [*, d] -> [*, d_proj]
Tensor predict_h(const ModelParams& p, const Tensor& g); // [*, d_proj] -> [*, d_proj]

Tensor itm_logits(const ModelParams& p, const Tensor& z);      // [n, d] -> [n, 2]
Tensor mlm_logits(const ModelParams& p, const Tensor& states); // [n, d] -> [n, vocab]

// causal decoder over [image slot, token embeddings]: row t of the result
// holds next-token logits conditioned on the image and tokens[0..t-1].
Tensor plm_logits(const ModelParams& p, const Tensor& img, const std::vector<int>& tokens);

// ------------------------------------------------------------- checkpointing

struct Checkpoint {
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    int64_t step = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// rejects wrong magic, wrong version, truncation; if want_config_hash is
// nonzero a mismatch is rejected with both hashes in the message
Checkpoint load_checkpoint(const std::string& path, uint64_t want_config_hash = 0);

// copies checkpoint data into an already-built registry (names and shapes
// must match exactly); preserves tensor identity for optimizer state
void load_into(ModelParams& p, const Checkpoint& ckpt);

} // namespace mralign
