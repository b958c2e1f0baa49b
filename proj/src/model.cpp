#include "tden/model.hpp"

#include <stdexcept>

namespace tden {

namespace {
constexpr double kInitSigma = 0.02;
}

TdenModel::TdenModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::derive(init_seed, 1));
    word_emb_ = WordEmbeddingParams::create(reg_, "sent_emb", cfg_, rng, kInitSigma);
    region_emb_ = RegionEmbeddingParams::create(reg_, "obj_emb", cfg_, rng, kInitSigma);
    for (std::size_t i = 0; i < cfg_.k_i; ++i)
        obj_blocks_.push_back(EncoderBlockParams::create(
            reg_, "obj_enc.b" + std::to_string(i), cfg_, rng, kInitSigma));
    for (std::size_t i = 0; i < cfg_.k_s; ++i)
        sent_blocks_.push_back(EncoderBlockParams::create(
            reg_, "sent_enc.b" + std::to_string(i), cfg_, rng, kInitSigma));
    for (std::size_t i = 0; i < cfg_.k_e; ++i)
        cross_blocks_.push_back(EncoderBlockParams::create(
            reg_, "cross_enc.b" + std::to_string(i), cfg_, rng, kInitSigma));
    for (std::size_t i = 0; i < cfg_.k_d; ++i)
        dec_blocks_.push_back(DecoderBlockParams::create(
            reg_, "cross_dec.b" + std::to_string(i), cfg_, rng, kInitSigma));
    word_classifier_ =
        LinearParams::create(reg_, "word_cls", cfg_.d_model, cfg_.vocab_size, rng, kInitSigma);
    if (cfg_.untie_word_classifier)
        word_classifier_dec_ = LinearParams::create(reg_, "word_cls_dec", cfg_.d_model,
                                                    cfg_.vocab_size, rng, kInitSigma);
    object_classifier_ = LinearParams::create(reg_, "obj_cls", cfg_.d_model,
                                              cfg_.n_object_classes, rng, kInitSigma);
    ism_pool_sent_ = AttnPoolParams::create(reg_, "ism_pool.sent", cfg_, rng, kInitSigma);
    ism_pool_img_ = AttnPoolParams::create(reg_, "ism_pool.img", cfg_, rng, kInitSigma);
}

Tensor TdenModel::encode_objects(const RegionSet& regions) const {
    counters_.object_encoder++;
    Tensor h = embed_regions(regions, region_emb_, cfg_);
    AttnMask mask = AttnMask::full(h.rows(), h.rows());
    for (const auto& block : obj_blocks_) h = encoder_block(h, mask, block, cfg_);
    return h;
}

Tensor TdenModel::encode_sentence(const TokenSeq& tokens) const {
    counters_.sentence_encoder++;
    Tensor h = embed_words(tokens, word_emb_, cfg_);
    AttnMask mask = AttnMask::full(h.rows(), h.rows());
    for (const auto& block : sent_blocks_) h = encoder_block(h, mask, block, cfg_);
    return h;
}

EncodedPair TdenModel::encode_pair(const TokenSeq& tokens, const RegionSet& regions) const {
    return EncodedPair{encode_sentence(tokens), encode_objects(regions)};
}

Tensor TdenModel::cross_encode(const EncodedPair& pair) const {
    if (pair.h_sent.cols() != pair.h_img.cols())
        throw std::invalid_argument("encoded pair widths disagree: " + pair.h_sent.shape_str() +
                                    " vs " + pair.h_img.shape_str());
    counters_.cross_encoder++;
    Tensor h = concat_rows(pair.h_sent, pair.h_img);
    AttnMask mask = AttnMask::full(h.rows(), h.rows());
    for (const auto& block : cross_blocks_) h = encoder_block(h, mask, block, cfg_);
    return h;
}

Tensor TdenModel::cross_decode(const Tensor& word_states, const Tensor& visual_states) const {
    counters_.cross_decoder++;
    AttnMask causal = AttnMask::causal(word_states.rows());
    Tensor h = word_states;
    for (const auto& block : dec_blocks_)
        h = decoder_block(h, visual_states, causal, block, cfg_);
    return h;
}

void TdenModel::copy_parameters_from(const TdenModel& other) {
    const auto& src = other.params().tensors();
    const auto& dst = reg_.tensors();
    if (src.size() != dst.size())
        throw std::invalid_argument("cannot copy parameters between different architectures");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].shape() != dst[i].shape())
            throw std::invalid_argument("parameter shape mismatch at " +
                                        other.params().names()[i]);
        Tensor d = dst[i];
        d.values() = src[i].values();
        d.zero_grad();
    }
}

Tensor TdenModel::logits_words(const Tensor& states) const {
    return linear(states, word_classifier_);
}

Tensor TdenModel::logits_words_dec(const Tensor& states) const {
    return linear(states, cfg_.untie_word_classifier ? word_classifier_dec_ : word_classifier_);
}

Tensor TdenModel::logits_objects(const Tensor& states) const {
    return linear(states, object_classifier_);
}

}  // namespace tden
