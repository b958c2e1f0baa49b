#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tden/data_types.hpp"
#include "tden/rng.hpp"
#include "tden/tensor.hpp"

namespace tden {

// Architecture hyperparameters. Desk-scale defaults; every field is
// config-reachable.
struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 0;  // 0 means 4 * d_model
    std::size_t k_i = 2;   // object-encoder blocks
    std::size_t k_s = 2;   // sentence-encoder blocks
    std::size_t k_e = 2;   // cross-modal encoder blocks
    std::size_t k_d = 2;   // cross-modal decoder blocks
    std::size_t vocab_size = 128;
    std::size_t n_object_classes = 24;
    std::size_t d_region_feat = 32;
    std::size_t max_seq_len = 20;
    std::size_t max_regions = 12;
    bool untie_word_classifier = false;

    std::size_t ff_width() const { return d_ff == 0 ? 4 * d_model : d_ff; }
    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const;

    static ModelConfig desk() { return ModelConfig{}; }
    static ModelConfig tiny();
};

// Named parameter registry. Modules register their tensors at construction;
// the optimizer, checkpointing, and the decoupling tests all address
// parameters through it. Names are hierarchical ("cross_dec.b0.attn.h1.wq").
class ParamRegistry {
public:
    Tensor add(const std::string& name, Tensor t);
    const std::vector<Tensor>& tensors() const { return tensors_; }
    const std::vector<std::string>& names() const { return names_; }
    std::vector<Tensor> with_prefix(const std::string& prefix) const;
    Tensor by_name(const std::string& name) const;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
};

// Attention mask: allowed[q * n_keys + k] says query q may look at key k.
struct AttnMask {
    std::size_t n_queries = 0;
    std::size_t n_keys = 0;
    std::vector<std::uint8_t> allowed;

    static AttnMask full(std::size_t nq, std::size_t nk);
    static AttnMask causal(std::size_t n);
    bool at(std::size_t q, std::size_t k) const { return allowed[q * n_keys + k] != 0; }
};

struct LinearParams {
    Tensor w;  // [in x out]
    Tensor b;  // [out]
    static LinearParams create(ParamRegistry& reg, const std::string& name, std::size_t in,
                               std::size_t out, Rng& rng, double sigma);
};

inline Tensor linear(const Tensor& x, const LinearParams& p) {
    return add_rowvec(matmul(x, p.w), p.b);
}

struct AttentionHeadParams {
    Tensor wq, wk, wv;  // [d x dh]
    Tensor bq, bk, bv;  // [dh]
    Tensor wo;          // [dh x d]
};

struct AttentionParams {
    std::vector<AttentionHeadParams> heads;
    Tensor bo;  // [d], shared output bias
    static AttentionParams create(ParamRegistry& reg, const std::string& name,
                                  const ModelConfig& cfg, Rng& rng, double sigma);
};

struct LayerNormParams {
    Tensor gain;  // [d], init 1
    Tensor bias;  // [d], init 0
    static LayerNormParams create(ParamRegistry& reg, const std::string& name, std::size_t d);
};

struct FeedForwardParams {
    LinearParams in;   // d -> d_ff
    LinearParams out;  // d_ff -> d
    static FeedForwardParams create(ParamRegistry& reg, const std::string& name,
                                    const ModelConfig& cfg, Rng& rng, double sigma);
};

// Pre-norm encoder block: x + attn(ln1(x)) followed by + ffn(ln2(.)).
struct EncoderBlockParams {
    LayerNormParams ln1, ln2;
    AttentionParams attn;
    FeedForwardParams ffn;
    static EncoderBlockParams create(ParamRegistry& reg, const std::string& name,
                                     const ModelConfig& cfg, Rng& rng, double sigma);
};

// Pre-norm decoder block: causal self-attention, then cross-attention over
// the visual tokens, then the feed-forward sublayer.
struct DecoderBlockParams {
    LayerNormParams ln1, ln2, ln3;
    AttentionParams self_attn;
    AttentionParams cross_attn;
    FeedForwardParams ffn;
    static DecoderBlockParams create(ParamRegistry& reg, const std::string& name,
                                     const ModelConfig& cfg, Rng& rng, double sigma);
};

struct WordEmbeddingParams {
    Tensor word;  // [vocab x d]
    Tensor pos;   // [max_seq_len x d], learned 1-D positions
    static WordEmbeddingParams create(ParamRegistry& reg, const std::string& name,
                                      const ModelConfig& cfg, Rng& rng, double sigma);
};

struct RegionEmbeddingParams {
    LinearParams feat;  // d_region_feat -> d
    Tensor geom_w;      // [5 x d], no bias so the geometry term vanishes at zero boxes
    Tensor mask_emb;    // [1 x d], added to masked-region rows
    static RegionEmbeddingParams create(ParamRegistry& reg, const std::string& name,
                                        const ModelConfig& cfg, Rng& rng, double sigma);
};

// Two-layer attention pooling: softmax(mlp(H)) weights over positions.
struct AttnPoolParams {
    LinearParams score_in;   // d -> d
    LinearParams score_out;  // d -> 1
    static AttnPoolParams create(ParamRegistry& reg, const std::string& name,
                                 const ModelConfig& cfg, Rng& rng, double sigma);
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Scaled dot-product attention over permitted keys; masked logits get -1e9
// before the softmax. Every query row must permit at least one key.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values,
                            const AttnMask& mask, const AttentionParams& p,
                            const ModelConfig& cfg);

Tensor encoder_block(const Tensor& x, const AttnMask& mask, const EncoderBlockParams& p,
                     const ModelConfig& cfg);

// `visual` enters as keys/values only and is never written to.
Tensor decoder_block(const Tensor& words, const Tensor& visual, const AttnMask& causal_mask,
                     const DecoderBlockParams& p, const ModelConfig& cfg);

// Wrapped token ids -> word embedding + learned position embedding.
Tensor embed_words(const TokenSeq& tokens, const WordEmbeddingParams& p,
                   const ModelConfig& cfg);

// Row 0 is the [IMG] token: the feature projection of the mean raw region
// feature. Rows 1..n are per-region feature projections plus the projected
// 5-value box geometry; masked rows additionally receive the learned mask
// embedding. No sequence position is injected for regions.
Tensor embed_regions(const RegionSet& regions, const RegionEmbeddingParams& p,
                     const ModelConfig& cfg);

// softmax(score_mlp(h)) attention over rows, returns the [1 x d] pooled vector.
Tensor attention_pool(const Tensor& h, const AttnPoolParams& p);

}  // namespace tden
