#include "tden/sampling.hpp"

#include <cmath>
#include <stdexcept>

namespace tden {

Scheme scheme_from_string(const std::string& s) {
    if (s == "none") return Scheme::none;
    if (s == "two_pass_a") return Scheme::two_pass_a;
    if (s == "two_pass_b") return Scheme::two_pass_b;
    if (s == "two_pass_c") return Scheme::two_pass_c;
    throw std::invalid_argument("unknown scheme '" + s +
                                "' (expected none|two_pass_a|two_pass_b|two_pass_c)");
}

std::string to_string(Scheme s) {
    switch (s) {
        case Scheme::none: return "none";
        case Scheme::two_pass_a: return "two_pass_a";
        case Scheme::two_pass_b: return "two_pass_b";
        case Scheme::two_pass_c: return "two_pass_c";
    }
    return "?";
}

int sample_token(const std::vector<double>& dist, Rng& rng, bool argmax) {
    if (dist.size() < 2) throw std::invalid_argument("sampling distribution too small");
    double mass = 0.0;
    for (std::size_t id = 0; id < dist.size(); ++id) {
        if (std::isnan(dist[id]))
            throw std::domain_error("sampling distribution contains NaN");
        if (static_cast<int>(id) != kMaskId) mass += dist[id];
    }
    if (argmax) {
        std::size_t best = kMaskId == 0 ? 1 : 0;
        for (std::size_t id = 0; id < dist.size(); ++id)
            if (static_cast<int>(id) != kMaskId && dist[id] > dist[best]) best = id;
        return static_cast<int>(best);
    }
    if (mass < 1e-12) {
        // Degenerate distribution concentrated on [MASK]; fall back to a
        // uniform draw over the rest of the vocabulary.
        std::size_t idx = rng.uniform_int(dist.size() - 1);
        return static_cast<int>(idx >= static_cast<std::size_t>(kMaskId) ? idx + 1 : idx);
    }
    const double u = rng.uniform01() * mass;
    double cum = 0.0;
    int last = -1;
    for (std::size_t id = 0; id < dist.size(); ++id) {
        if (static_cast<int>(id) == kMaskId) continue;
        cum += dist[id];
        last = static_cast<int>(id);
        if (u < cum) return last;
    }
    return last;
}

int draw_alpha(Rng& rng) { return rng.uniform01() < 0.5 ? 1 : 0; }

SampledSequences sample_replacements(const PassOutputs& pass1, const MaskedBatch& batch,
                                     Rng& rng, bool argmax) {
    SampledSequences out;
    out.s_e.reserve(batch.size());
    out.s_d.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const MaskedItem& item = batch.items[i];
        TokenSeq se = item.original_words;
        TokenSeq sd = item.original_words;
        for (std::size_t k = 0; k < item.word_positions.size(); ++k) {
            const std::size_t pos = item.word_positions[k];
            se.ids[pos] = sample_token(pass1.enc_word_dists[i][k], rng, argmax);
            sd.ids[pos] = sample_token(pass1.dec_word_dists[i][k], rng, argmax);
        }
        out.s_e.push_back(std::move(se));
        out.s_d.push_back(std::move(sd));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scheme steps
// ---------------------------------------------------------------------------

namespace {

std::vector<double> softmax_row(const Tensor& logits, std::size_t row) {
    const std::size_t v = logits.cols();
    std::vector<double> p(v);
    const double* x = logits.data() + row * v;
    double mx = x[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
        p[j] = std::exp(x[j] - mx);
        sum += p[j];
    }
    for (std::size_t j = 0; j < v; ++j) p[j] /= sum;
    return p;
}

// Detached per-position distributions from the concatenated head logits.
std::vector<std::vector<std::vector<double>>> dists_from_mlm(const HeadResult& mlm,
                                                             const MaskedBatch& batch) {
    std::vector<std::vector<std::vector<double>>> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& positions = batch.items[i].word_positions;
        for (std::size_t k = 0; k < positions.size(); ++k)
            out[i].push_back(softmax_row(mlm.logits, mlm.item_offsets[i] + k));
    }
    return out;
}

std::vector<std::vector<std::vector<double>>> dists_from_msg(const HeadResult& msg,
                                                             const MaskedBatch& batch) {
    std::vector<std::vector<std::vector<double>>> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t pos : batch.items[i].word_positions)
            // Decoder output row j predicts the token at wrapped position j+1.
            out[i].push_back(softmax_row(msg.logits, msg.item_offsets[i] + pos - 1));
    }
    return out;
}

struct Pass1 {
    MaskedBatch masked;
    std::vector<EncodedPair> pairs;       // encoders over masked inputs
    std::vector<Tensor> visual;           // h_img per item, reused in pass 2
    std::vector<Tensor> word_states;      // h_sent per item
    std::vector<TokenSeq> originals;
};

Pass1 run_pass1_encoders(const PairBatch& batch, const TdenModel& model, Rng& rng,
                         const SamplingOptions& opts) {
    Pass1 p;
    p.masked = make_masked_batch(batch, rng, opts.p_words, opts.p_regions);
    for (const auto& item : p.masked.items) {
        EncodedPair pair = model.encode_pair(item.words, item.regions);
        p.visual.push_back(pair.h_img);
        p.word_states.push_back(pair.h_sent);
        p.pairs.push_back(std::move(pair));
        p.originals.push_back(item.original_words);
    }
    return p;
}

std::vector<Tensor> cross_encode_each(const TdenModel& model,
                                      const std::vector<Tensor>& word_states,
                                      const std::vector<Tensor>& visual) {
    std::vector<Tensor> outs;
    outs.reserve(word_states.size());
    for (std::size_t i = 0; i < word_states.size(); ++i)
        outs.push_back(model.cross_encode(EncodedPair{word_states[i], visual[i]}));
    return outs;
}

std::vector<Tensor> encode_sentences(const TdenModel& model, const std::vector<TokenSeq>& seqs) {
    std::vector<Tensor> outs;
    outs.reserve(seqs.size());
    for (const auto& s : seqs) outs.push_back(model.encode_sentence(s));
    return outs;
}

void require_all_losses(const SamplingOptions& opts, const char* scheme) {
    const auto& l = opts.losses;
    if (!(l.use_mlm && l.use_moc && l.use_ism && l.use_msg))
        throw std::invalid_argument(std::string(scheme) +
                                    " requires all four proxy tasks enabled");
    if (l.ism_placement != IsmPlacement::encoder)
        throw std::invalid_argument(std::string(scheme) +
                                    " supports encoder-level image-sentence matching only");
}

LossTerms finalize(std::vector<std::pair<std::string, Tensor>> terms, int alpha = -1) {
    LossTerms out;
    out.terms = std::move(terms);
    out.alpha = alpha;
    std::vector<Tensor> ts;
    for (auto& [n, t] : out.terms) ts.push_back(t);
    out.total = sum_terms(ts);
    return out;
}

}  // namespace

LossTerms step_scheme_none(const PairBatch& batch, const TdenModel& model, Rng& rng,
                           const SamplingOptions& opts) {
    MaskedBatch mb = make_masked_batch(batch, rng, opts.p_words, opts.p_regions);
    return loss_tden(mb, model, opts.losses);
}

LossTerms step_two_pass_a(const PairBatch& batch, const TdenModel& model, Rng& rng,
                          const SamplingOptions& opts, SampledSequences* capture_sampled) {
    require_all_losses(opts, "two_pass_a");
    Pass1 p1 = run_pass1_encoders(batch, model, rng, opts);

    std::vector<Tensor> cross1 = cross_encode_each(model, p1.word_states, p1.visual);
    HeadResult mlm1 = mlm_from_cross(model, cross1, p1.masked);
    Tensor moc1 = moc_from_cross(model, cross1, p1.masked);
    Tensor ism1 = ism_from_pairs(model, p1.pairs, opts.losses.ism_margin);
    HeadResult msg1 = msg_from_states(model, p1.word_states, p1.visual, p1.originals);

    PassOutputs po{dists_from_mlm(mlm1, p1.masked), dists_from_msg(msg1, p1.masked)};
    SampledSequences ss = sample_replacements(po, p1.masked, rng, opts.argmax);
    if (capture_sampled) *capture_sampled = ss;

    // Second pass: S_E through the understanding stream, S_D through the
    // generation stream, both coupled with the first-pass visual encodings.
    std::vector<Tensor> h_se = encode_sentences(model, ss.s_e);
    std::vector<Tensor> cross2 = cross_encode_each(model, h_se, p1.visual);
    HeadResult mlm2 = mlm_from_cross(model, cross2, p1.masked);
    Tensor moc2 = moc_from_cross(model, cross2, p1.masked);
    std::vector<Tensor> h_sd = encode_sentences(model, ss.s_d);
    HeadResult msg2 = msg_from_states(model, h_sd, p1.visual, p1.originals);

    return finalize({{"mlm", mlm1.loss},
                     {"moc", moc1},
                     {"ism", ism1},
                     {"msg", msg1.loss},
                     {"mlm2", mlm2.loss},
                     {"moc2", moc2},
                     {"msg2", msg2.loss}});
}

LossTerms step_two_pass_b(const PairBatch& batch, const TdenModel& model, Rng& rng,
                          const SamplingOptions& opts, SampledSequences* capture_sampled) {
    require_all_losses(opts, "two_pass_b");
    Pass1 p1 = run_pass1_encoders(batch, model, rng, opts);

    std::vector<Tensor> cross1 = cross_encode_each(model, p1.word_states, p1.visual);
    HeadResult mlm1 = mlm_from_cross(model, cross1, p1.masked);
    Tensor moc1 = moc_from_cross(model, cross1, p1.masked);
    Tensor ism1 = ism_from_pairs(model, p1.pairs, opts.losses.ism_margin);
    HeadResult msg1 = msg_from_states(model, p1.word_states, p1.visual, p1.originals);

    PassOutputs po{dists_from_mlm(mlm1, p1.masked), dists_from_msg(msg1, p1.masked)};
    SampledSequences ss = sample_replacements(po, p1.masked, rng, opts.argmax);
    if (capture_sampled) *capture_sampled = ss;

    // Exchanged second pass: S_D feeds the cross-modal encoder, S_E the decoder.
    std::vector<Tensor> h_sd = encode_sentences(model, ss.s_d);
    std::vector<Tensor> cross2 = cross_encode_each(model, h_sd, p1.visual);
    HeadResult mlm2 = mlm_from_cross(model, cross2, p1.masked);
    Tensor moc2 = moc_from_cross(model, cross2, p1.masked);
    std::vector<Tensor> h_se = encode_sentences(model, ss.s_e);
    HeadResult msg2 = msg_from_states(model, h_se, p1.visual, p1.originals);

    return finalize({{"mlm", mlm1.loss},
                     {"moc", moc1},
                     {"ism", ism1},
                     {"msg", msg1.loss},
                     {"msg2", msg2.loss},
                     {"mlm2", mlm2.loss},
                     {"moc2", moc2}});
}

LossTerms step_two_pass_c(const PairBatch& batch, const TdenModel& model, Rng& rng,
                          const SamplingOptions& opts, std::optional<int> alpha_override,
                          SampledSequences* capture_sampled) {
    require_all_losses(opts, "two_pass_c");
    const int alpha = alpha_override ? *alpha_override : draw_alpha(rng);
    if (alpha != 0 && alpha != 1) throw std::invalid_argument("alpha must be 0 or 1");

    Pass1 p1 = run_pass1_encoders(batch, model, rng, opts);

    // Matching runs once per step, on the uncorrupted pair.
    std::vector<EncodedPair> clean_pairs;
    clean_pairs.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
        clean_pairs.push_back(model.encode_pair(batch.sentences[i], batch.images[i]));
    Tensor ism = ism_from_pairs(model, clean_pairs, opts.losses.ism_margin);

    if (alpha == 1) {
        // First pass through the cross-modal encoder only; the decoder sees
        // the sampled mask-free sequence in the second pass.
        std::vector<Tensor> cross1 = cross_encode_each(model, p1.word_states, p1.visual);
        HeadResult mlm1 = mlm_from_cross(model, cross1, p1.masked);
        Tensor moc1 = moc_from_cross(model, cross1, p1.masked);
        PassOutputs po;
        po.enc_word_dists = dists_from_mlm(mlm1, p1.masked);
        po.dec_word_dists = po.enc_word_dists;  // S_D unused this step
        SampledSequences ss = sample_replacements(po, p1.masked, rng, opts.argmax);
        if (capture_sampled) *capture_sampled = ss;
        std::vector<Tensor> h_se = encode_sentences(model, ss.s_e);
        HeadResult msg2 = msg_from_states(model, h_se, p1.visual, p1.originals);
        return finalize(
            {{"mlm", mlm1.loss}, {"moc", moc1}, {"msg2", msg2.loss}, {"ism", ism}}, alpha);
    }

    // alpha == 0: first pass through the decoder only.
    HeadResult msg1 = msg_from_states(model, p1.word_states, p1.visual, p1.originals);
    PassOutputs po;
    po.dec_word_dists = dists_from_msg(msg1, p1.masked);
    po.enc_word_dists = po.dec_word_dists;  // S_E unused this step
    SampledSequences ss = sample_replacements(po, p1.masked, rng, opts.argmax);
    if (capture_sampled) *capture_sampled = ss;
    std::vector<Tensor> h_sd = encode_sentences(model, ss.s_d);
    std::vector<Tensor> cross2 = cross_encode_each(model, h_sd, p1.visual);
    HeadResult mlm2 = mlm_from_cross(model, cross2, p1.masked);
    Tensor moc2 = moc_from_cross(model, cross2, p1.masked);
    return finalize(
        {{"msg", msg1.loss}, {"mlm2", mlm2.loss}, {"moc2", moc2}, {"ism", ism}}, alpha);
}

LossTerms run_scheme_step(Scheme scheme, const PairBatch& batch, const TdenModel& model,
                          Rng& rng, const SamplingOptions& opts) {
    switch (scheme) {
        case Scheme::none: return step_scheme_none(batch, model, rng, opts);
        case Scheme::two_pass_a: return step_two_pass_a(batch, model, rng, opts);
        case Scheme::two_pass_b: return step_two_pass_b(batch, model, rng, opts);
        case Scheme::two_pass_c: return step_two_pass_c(batch, model, rng, opts);
    }
    throw std::logic_error("unreachable");
}

}  // namespace tden
