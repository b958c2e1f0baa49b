#include "tden/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace tden {

void ModelConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw std::invalid_argument("d_model must be a positive multiple of n_heads");
    if (k_i < 1 || k_s < 1 || k_e < 1 || k_d < 1)
        throw std::invalid_argument("all block counts must be >= 1");
    if (vocab_size < static_cast<std::size_t>(kNumSpecialIds))
        throw std::invalid_argument("vocab_size must include the four special ids");
    if (d_region_feat == 0 || max_seq_len < 2 || max_regions < 1)
        throw std::invalid_argument("degenerate model geometry");
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.k_i = c.k_s = c.k_e = c.k_d = 1;
    c.vocab_size = 128;  // full id layout so the synthetic corpus still fits
    c.n_object_classes = 6;
    c.d_region_feat = 8;
    c.max_seq_len = 12;
    c.max_regions = 4;
    return c;
}

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
    for (const auto& n : names_)
        if (n == name) throw std::logic_error("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
}

std::vector<Tensor> ParamRegistry::with_prefix(const std::string& prefix) const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i].rfind(prefix, 0) == 0) out.push_back(tensors_[i]);
    return out;
}

Tensor ParamRegistry::by_name(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return tensors_[i];
    throw std::out_of_range("no parameter named " + name);
}

AttnMask AttnMask::full(std::size_t nq, std::size_t nk) {
    return AttnMask{nq, nk, std::vector<std::uint8_t>(nq * nk, 1)};
}

AttnMask AttnMask::causal(std::size_t n) {
    AttnMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
    for (std::size_t q = 0; q < n; ++q)
        for (std::size_t k = 0; k <= q; ++k) m.allowed[q * n + k] = 1;
    return m;
}

LinearParams LinearParams::create(ParamRegistry& reg, const std::string& name, std::size_t in,
                                  std::size_t out, Rng& rng, double sigma) {
    LinearParams p;
    p.w = reg.add(name + ".w", Tensor::randn({in, out}, rng, sigma));
    p.b = reg.add(name + ".b", Tensor::zeros({out}));
    return p;
}

AttentionParams AttentionParams::create(ParamRegistry& reg, const std::string& name,
                                        const ModelConfig& cfg, Rng& rng, double sigma) {
    AttentionParams p;
    const std::size_t d = cfg.d_model, dh = cfg.head_dim();
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::string hn = name + ".h" + std::to_string(h);
        AttentionHeadParams hp;
        hp.wq = reg.add(hn + ".wq", Tensor::randn({d, dh}, rng, sigma));
        hp.wk = reg.add(hn + ".wk", Tensor::randn({d, dh}, rng, sigma));
        hp.wv = reg.add(hn + ".wv", Tensor::randn({d, dh}, rng, sigma));
        hp.bq = reg.add(hn + ".bq", Tensor::zeros({dh}));
        hp.bk = reg.add(hn + ".bk", Tensor::zeros({dh}));
        hp.bv = reg.add(hn + ".bv", Tensor::zeros({dh}));
        hp.wo = reg.add(hn + ".wo", Tensor::randn({dh, d}, rng, sigma));
        p.heads.push_back(hp);
    }
    p.bo = reg.add(name + ".bo", Tensor::zeros({d}));
    return p;
}

LayerNormParams LayerNormParams::create(ParamRegistry& reg, const std::string& name,
                                        std::size_t d) {
    LayerNormParams p;
    p.gain = reg.add(name + ".g", Tensor::full({d}, 1.0));
    p.bias = reg.add(name + ".b", Tensor::zeros({d}));
    return p;
}

FeedForwardParams FeedForwardParams::create(ParamRegistry& reg, const std::string& name,
                                            const ModelConfig& cfg, Rng& rng, double sigma) {
    FeedForwardParams p;
    p.in = LinearParams::create(reg, name + ".in", cfg.d_model, cfg.ff_width(), rng, sigma);
    p.out = LinearParams::create(reg, name + ".out", cfg.ff_width(), cfg.d_model, rng, sigma);
    return p;
}

EncoderBlockParams EncoderBlockParams::create(ParamRegistry& reg, const std::string& name,
                                              const ModelConfig& cfg, Rng& rng, double sigma) {
    EncoderBlockParams p;
    p.ln1 = LayerNormParams::create(reg, name + ".ln1", cfg.d_model);
    p.ln2 = LayerNormParams::create(reg, name + ".ln2", cfg.d_model);
    p.attn = AttentionParams::create(reg, name + ".attn", cfg, rng, sigma);
    p.ffn = FeedForwardParams::create(reg, name + ".ffn", cfg, rng, sigma);
    return p;
}

DecoderBlockParams DecoderBlockParams::create(ParamRegistry& reg, const std::string& name,
                                              const ModelConfig& cfg, Rng& rng, double sigma) {
    DecoderBlockParams p;
    p.ln1 = LayerNormParams::create(reg, name + ".ln1", cfg.d_model);
    p.ln2 = LayerNormParams::create(reg, name + ".ln2", cfg.d_model);
    p.ln3 = LayerNormParams::create(reg, name + ".ln3", cfg.d_model);
    p.self_attn = AttentionParams::create(reg, name + ".attn", cfg, rng, sigma);
    p.cross_attn = AttentionParams::create(reg, name + ".xattn", cfg, rng, sigma);
    p.ffn = FeedForwardParams::create(reg, name + ".ffn", cfg, rng, sigma);
    return p;
}

WordEmbeddingParams WordEmbeddingParams::create(ParamRegistry& reg, const std::string& name,
                                                const ModelConfig& cfg, Rng& rng, double sigma) {
    WordEmbeddingParams p;
    p.word = reg.add(name + ".word", Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, sigma));
    p.pos = reg.add(name + ".pos", Tensor::randn({cfg.max_seq_len, cfg.d_model}, rng, sigma));
    return p;
}

RegionEmbeddingParams RegionEmbeddingParams::create(ParamRegistry& reg, const std::string& name,
                                                    const ModelConfig& cfg, Rng& rng,
                                                    double sigma) {
    RegionEmbeddingParams p;
    p.feat = LinearParams::create(reg, name + ".feat", cfg.d_region_feat, cfg.d_model, rng, sigma);
    p.geom_w = reg.add(name + ".geom", Tensor::randn({5, cfg.d_model}, rng, sigma));
    p.mask_emb = reg.add(name + ".mask", Tensor::randn({1, cfg.d_model}, rng, sigma));
    return p;
}

AttnPoolParams AttnPoolParams::create(ParamRegistry& reg, const std::string& name,
                                      const ModelConfig& cfg, Rng& rng, double sigma) {
    AttnPoolParams p;
    p.score_in = LinearParams::create(reg, name + ".in", cfg.d_model, cfg.d_model, rng, sigma);
    p.score_out = LinearParams::create(reg, name + ".out", cfg.d_model, 1, rng, sigma);
    return p;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values,
                            const AttnMask& mask, const AttentionParams& p,
                            const ModelConfig& cfg) {
    const std::size_t lq = queries.rows(), lk = keys_values.rows();
    if (mask.n_queries != lq || mask.n_keys != lk)
        throw std::invalid_argument("attention mask is " + std::to_string(mask.n_queries) + "x" +
                                    std::to_string(mask.n_keys) + " but inputs are " +
                                    std::to_string(lq) + "x" + std::to_string(lk));
    for (std::size_t q = 0; q < lq; ++q) {
        bool any = false;
        for (std::size_t k = 0; k < lk && !any; ++k) any = mask.at(q, k);
        if (!any)
            throw std::invalid_argument("attention query row " + std::to_string(q) +
                                        " permits no keys");
    }

    // Additive bias: 0 where attending is allowed, -1e9 where not. The -1e9
    // shift underflows to an exactly-zero attention weight, which is what the
    // bitwise causality guarantee relies on.
    std::vector<double> bias(lq * lk, 0.0);
    for (std::size_t i = 0; i < bias.size(); ++i)
        if (!mask.allowed[i]) bias[i] = -1e9;
    Tensor bias_t = Tensor::from({lq, lk}, std::move(bias));

    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
    Tensor out;
    bool first = true;
    for (const AttentionHeadParams& h : p.heads) {
        Tensor q = add_rowvec(matmul(queries, h.wq), h.bq);
        Tensor k = add_rowvec(matmul(keys_values, h.wk), h.bk);
        Tensor v = add_rowvec(matmul(keys_values, h.wv), h.bv);
        Tensor logits = add(axpb(matmul(q, transpose(k)), scale, 0.0), bias_t);
        Tensor weights = softmax(logits);
        Tensor head = matmul(matmul(weights, v), h.wo);
        out = first ? head : add(out, head);
        first = false;
    }
    return add_rowvec(out, p.bo);
}

Tensor encoder_block(const Tensor& x, const AttnMask& mask, const EncoderBlockParams& p,
                     const ModelConfig& cfg) {
    Tensor normed = layer_norm(x, p.ln1.gain, p.ln1.bias);
    Tensor h = add(x, multi_head_attention(normed, normed, mask, p.attn, cfg));
    Tensor ff_in = layer_norm(h, p.ln2.gain, p.ln2.bias);
    Tensor ff = linear(gelu(linear(ff_in, p.ffn.in)), p.ffn.out);
    return add(h, ff);
}

Tensor decoder_block(const Tensor& words, const Tensor& visual, const AttnMask& causal_mask,
                     const DecoderBlockParams& p, const ModelConfig& cfg) {
    Tensor n1 = layer_norm(words, p.ln1.gain, p.ln1.bias);
    Tensor h = add(words, multi_head_attention(n1, n1, causal_mask, p.self_attn, cfg));
    Tensor n2 = layer_norm(h, p.ln2.gain, p.ln2.bias);
    AttnMask xmask = AttnMask::full(h.rows(), visual.rows());
    h = add(h, multi_head_attention(n2, visual, xmask, p.cross_attn, cfg));
    Tensor n3 = layer_norm(h, p.ln3.gain, p.ln3.bias);
    Tensor ff = linear(gelu(linear(n3, p.ffn.in)), p.ffn.out);
    return add(h, ff);
}

Tensor embed_words(const TokenSeq& tokens, const WordEmbeddingParams& p,
                   const ModelConfig& cfg) {
    if (tokens.empty() || tokens.ids[0] != kClsId)
        throw std::invalid_argument("embed_words expects a wrapped sequence starting with [CLS]");
    if (tokens.size() > cfg.max_seq_len)
        throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    std::vector<std::size_t> word_rows, pos_rows;
    word_rows.reserve(tokens.size());
    pos_rows.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int id = tokens.ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw std::out_of_range("word id " + std::to_string(id) +
                                    " outside vocabulary of size " +
                                    std::to_string(cfg.vocab_size));
        word_rows.push_back(static_cast<std::size_t>(id));
        pos_rows.push_back(i);
    }
    return add(gather_rows(p.word, word_rows), gather_rows(p.pos, pos_rows));
}

Tensor embed_regions(const RegionSet& regions, const RegionEmbeddingParams& p,
                     const ModelConfig& cfg) {
    regions.validate();
    const std::size_t n = regions.n();
    if (n > cfg.max_regions)
        throw std::invalid_argument("region count " + std::to_string(n) +
                                    " exceeds max_regions " + std::to_string(cfg.max_regions));
    const std::size_t df = cfg.d_region_feat;

    // Raw features and geometry are constants; assemble them into one matrix
    // with the mean-feature [IMG] row on top, then project.
    std::vector<double> feats((n + 1) * df, 0.0);
    std::vector<double> geoms((n + 1) * 5, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (regions.features[i].size() != df)
            throw std::invalid_argument("region feature width " +
                                        std::to_string(regions.features[i].size()) +
                                        " does not match d_region_feat " + std::to_string(df));
        for (std::size_t j = 0; j < df; ++j) {
            feats[(i + 1) * df + j] = regions.features[i][j];
            feats[j] += regions.features[i][j] / static_cast<double>(n);
        }
        const auto g = regions.boxes[i].as_array();
        for (std::size_t j = 0; j < 5; ++j) geoms[(i + 1) * 5 + j] = g[j];
    }

    Tensor feat_t = Tensor::from({n + 1, df}, std::move(feats));
    Tensor geom_t = Tensor::from({n + 1, 5}, std::move(geoms));
    Tensor out = add(linear(feat_t, p.feat), matmul(geom_t, p.geom_w));

    // Learned mask embedding on masked rows; the [IMG] row never gets one.
    bool any_masked = false;
    for (std::size_t i = 0; i < n; ++i) any_masked = any_masked || regions.is_masked(i);
    if (any_masked) {
        Tensor table = concat_rows(Tensor::zeros({1, cfg.d_model}), p.mask_emb);
        std::vector<std::size_t> rows;
        rows.reserve(n + 1);
        rows.push_back(0);
        for (std::size_t i = 0; i < n; ++i) rows.push_back(regions.is_masked(i) ? 1 : 0);
        out = add(out, gather_rows(table, rows));
    }
    return out;
}

Tensor attention_pool(const Tensor& h, const AttnPoolParams& p) {
    Tensor scores = linear(gelu(linear(h, p.score_in)), p.score_out);  // [L x 1]
    Tensor weights = softmax(transpose(scores));                       // [1 x L]
    return matmul(weights, h);                                         // [1 x d]
}

}  // namespace tden
