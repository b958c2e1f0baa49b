#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tden/nn.hpp"

namespace tden {

// Outputs of the two single-modality encoders for one image-sentence pair.
struct EncodedPair {
    Tensor h_sent;  // [(n_words + 2) x d]
    Tensor h_img;   // [(n_regions + 1) x d]
};

// Per-step invocation counters for the cross-modal stacks (and, for the
// one-encode-per-modality check, the single-modality encoders).
struct StackCounters {
    std::size_t object_encoder = 0;
    std::size_t sentence_encoder = 0;
    std::size_t cross_encoder = 0;
    std::size_t cross_decoder = 0;

    void reset() { *this = StackCounters{}; }
    std::size_t cross_modal_total() const { return cross_encoder + cross_decoder; }
};

// Two-stream decoupled encoder-decoder: shared object/sentence encoders
// feeding a cross-modal encoder (understanding stream) and a cross-modal
// decoder (generation stream). Forward passes are const; training mutates
// parameters only between steps.
class TdenModel {
public:
    TdenModel(const ModelConfig& cfg, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }

    // K_I blocks of unrestricted self-attention over [IMG] + region tokens.
    Tensor encode_objects(const RegionSet& regions) const;
    // K_S blocks of unrestricted self-attention over [CLS] w.. ([SEP]).
    Tensor encode_sentence(const TokenSeq& tokens) const;
    EncodedPair encode_pair(const TokenSeq& tokens, const RegionSet& regions) const;

    // Concatenates sentence rows then visual rows and runs K_E blocks with
    // unrestricted cross-modal attention.
    Tensor cross_encode(const EncodedPair& pair) const;
    // K_D decoder blocks: causal self-attention over word states plus
    // cross-attention into the visual states (read-only).
    Tensor cross_decode(const Tensor& word_states, const Tensor& visual_states) const;

    Tensor logits_words(const Tensor& states) const;        // MLM head (cross encoder rows)
    Tensor logits_words_dec(const Tensor& states) const;    // MSG head (decoder rows)
    Tensor logits_objects(const Tensor& states) const;

    // ISM pooling over encoder-stream outputs.
    Tensor pool_sentence(const Tensor& h) const { return attention_pool(h, ism_pool_sent_); }
    Tensor pool_image(const Tensor& h) const { return attention_pool(h, ism_pool_img_); }

    const ParamRegistry& params() const { return reg_; }
    ParamRegistry& params() { return reg_; }
    StackCounters& counters() const { return counters_; }

    // Parameter groups for the decoupling checks and selective updates.
    std::vector<Tensor> group(const std::string& prefix) const { return reg_.with_prefix(prefix); }

    // Deep-copies parameter values from a model with the same config.
    void copy_parameters_from(const TdenModel& other);

    const WordEmbeddingParams& word_embedding() const { return word_emb_; }
    const RegionEmbeddingParams& region_embedding() const { return region_emb_; }

private:
    ModelConfig cfg_;
    ParamRegistry reg_;
    WordEmbeddingParams word_emb_;
    RegionEmbeddingParams region_emb_;
    std::vector<EncoderBlockParams> obj_blocks_;
    std::vector<EncoderBlockParams> sent_blocks_;
    std::vector<EncoderBlockParams> cross_blocks_;
    std::vector<DecoderBlockParams> dec_blocks_;
    LinearParams word_classifier_;      // d -> vocab, shared by MLM and MSG by default
    LinearParams word_classifier_dec_;  // only allocated when untied
    LinearParams object_classifier_;    // d -> n_object_classes
    AttnPoolParams ism_pool_sent_;
    AttnPoolParams ism_pool_img_;
    mutable StackCounters counters_;
};

}  // namespace tden
