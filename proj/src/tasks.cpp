#include "tden/tasks.hpp"

#include <cmath>
#include <stdexcept>

namespace tden {

std::size_t MaskedBatch::total_masked_words() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.word_positions.size();
    return n;
}

std::size_t MaskedBatch::total_masked_regions() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.region_positions.size();
    return n;
}

double LossTerms::value(const std::string& name) const {
    for (const auto& [n, t] : terms)
        if (n == name) return t.item();
    throw std::out_of_range("no loss term named " + name);
}

bool LossTerms::has(const std::string& name) const {
    for (const auto& [n, t] : terms)
        if (n == name) return true;
    return false;
}

std::tuple<TokenSeq, std::vector<std::size_t>, std::vector<int>> mask_words(
    const TokenSeq& tokens, Rng& rng, double p) {
    bool has_maskable = false;
    for (std::size_t i = 0; i < tokens.size(); ++i) has_maskable |= !tokens.is_special(i);

    std::vector<std::size_t> positions;
    while (true) {
        positions.clear();
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens.is_special(i)) continue;
            if (rng.uniform01() < p) positions.push_back(i);
        }
        if (!positions.empty() || p <= 0.0 || !has_maskable) break;
    }

    TokenSeq masked = tokens;
    std::vector<int> targets;
    targets.reserve(positions.size());
    for (std::size_t pos : positions) {
        targets.push_back(masked.ids[pos]);
        masked.ids[pos] = kMaskId;
    }
    return {masked, positions, targets};
}

std::tuple<RegionSet, std::vector<std::size_t>, std::vector<std::vector<double>>> mask_regions(
    const RegionSet& regions, Rng& rng, double p) {
    RegionSet masked = regions;
    masked.masked.assign(regions.n(), false);
    std::vector<std::size_t> positions;
    std::vector<std::vector<double>> targets;
    for (std::size_t i = 0; i < regions.n(); ++i) {
        if (rng.uniform01() < p) {
            positions.push_back(i);
            targets.push_back(regions.class_dists[i]);
            masked.masked[i] = true;
            std::fill(masked.features[i].begin(), masked.features[i].end(), 0.0);
        }
    }
    return {masked, positions, targets};
}

MaskedBatch make_masked_batch(const PairBatch& batch, Rng& rng, double p_words,
                              double p_regions) {
    if (batch.sentences.size() != batch.images.size())
        throw std::invalid_argument("pair batch has mismatched modality counts");
    MaskedBatch out;
    out.items.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        MaskedItem& item = out.items[i];
        item.original_words = batch.sentences[i];
        std::tie(item.words, item.word_positions, item.word_targets) =
            mask_words(batch.sentences[i], rng, p_words);
    }
    while (true) {
        std::size_t total = 0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            MaskedItem& item = out.items[i];
            std::tie(item.regions, item.region_positions, item.region_targets) =
                mask_regions(batch.images[i], rng, p_regions);
            total += item.region_positions.size();
        }
        if (total > 0 || p_regions <= 0.0) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Objective building blocks
// ---------------------------------------------------------------------------

namespace {

// Concatenates per-item row selections into one matrix, tracking offsets.
Tensor concat_selected(const std::vector<Tensor>& sources,
                       const std::vector<std::vector<std::size_t>>& row_sets,
                       std::vector<std::size_t>* offsets) {
    Tensor acc;
    bool first = true;
    std::size_t off = 0;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        if (offsets) offsets->push_back(off);
        if (row_sets[i].empty()) continue;
        Tensor rows = gather_rows(sources[i], row_sets[i]);
        acc = first ? rows : concat_rows(acc, rows);
        first = false;
        off += row_sets[i].size();
    }
    return acc;
}

}  // namespace

HeadResult mlm_from_cross(const TdenModel& model, const std::vector<Tensor>& cross_outs,
                          const MaskedBatch& batch) {
    if (cross_outs.size() != batch.size())
        throw std::invalid_argument("one cross-encoder output per batch item expected");
    std::vector<std::vector<std::size_t>> rows(batch.size());
    std::vector<int> targets;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        // Sentence rows come first in the cross-modal input, so wrapped word
        // positions index cross-encoder rows directly.
        rows[i] = batch.items[i].word_positions;
        targets.insert(targets.end(), batch.items[i].word_targets.begin(),
                       batch.items[i].word_targets.end());
    }
    HeadResult r;
    if (targets.empty()) {
        r.loss = Tensor::scalar(0.0);
        return r;
    }
    Tensor states = concat_selected(cross_outs, rows, &r.item_offsets);
    r.logits = model.logits_words(states);
    r.loss = cross_entropy(r.logits, targets);
    return r;
}

Tensor moc_from_cross(const TdenModel& model, const std::vector<Tensor>& cross_outs,
                      const MaskedBatch& batch) {
    if (cross_outs.size() != batch.size())
        throw std::invalid_argument("one cross-encoder output per batch item expected");
    std::vector<std::vector<std::size_t>> rows(batch.size());
    std::vector<double> target_flat;
    std::size_t n_masked = 0;
    const std::size_t c = model.config().n_object_classes;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const MaskedItem& item = batch.items[i];
        const std::size_t visual_base = item.words.size();  // rows after the sentence block
        for (std::size_t r : item.region_positions)
            rows[i].push_back(visual_base + 1 + r);  // +1 skips the [IMG] row
        for (const auto& dist : item.region_targets)
            target_flat.insert(target_flat.end(), dist.begin(), dist.end());
        n_masked += item.region_positions.size();
    }
    if (n_masked == 0) return Tensor::scalar(0.0);
    Tensor states = concat_selected(cross_outs, rows, nullptr);
    Tensor logits = model.logits_objects(states);
    return kl_divergence(logits, Tensor::from({n_masked, c}, std::move(target_flat)));
}

HeadResult msg_from_states(const TdenModel& model, const std::vector<Tensor>& word_states,
                           const std::vector<Tensor>& visual_states,
                           const std::vector<TokenSeq>& originals) {
    if (word_states.size() != visual_states.size() || word_states.size() != originals.size())
        throw std::invalid_argument("msg_from_states argument lengths disagree");
    if (originals.empty()) throw std::invalid_argument("empty batch");
    HeadResult r;
    std::vector<int> targets;
    std::size_t off = 0;
    Tensor acc;
    bool first = true;
    for (std::size_t i = 0; i < originals.size(); ++i) {
        const TokenSeq& orig = originals[i];
        const std::size_t n_in = detail::msg_target_count(orig);  // [CLS] plus each word
        std::vector<std::size_t> input_rows(n_in);
        for (std::size_t j = 0; j < n_in; ++j) input_rows[j] = j;
        Tensor dec_in = gather_rows(word_states[i], input_rows);
        Tensor dec_out = model.cross_decode(dec_in, visual_states[i]);
        r.item_offsets.push_back(off);
        off += n_in;
        for (std::size_t j = 1; j <= n_in; ++j) targets.push_back(orig.ids[j]);
        acc = first ? dec_out : concat_rows(acc, dec_out);
        first = false;
    }
    r.logits = model.logits_words_dec(acc);
    r.loss = cross_entropy(r.logits, targets);
    return r;
}

Tensor ism_from_pairs(const TdenModel& model, const std::vector<EncodedPair>& pairs,
                      double margin) {
    if (pairs.size() < 2)
        throw std::invalid_argument("image-sentence matching needs a batch of at least 2 pairs");
    Tensor sents, imgs;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        Tensor ps = model.pool_sentence(pairs[i].h_sent);
        Tensor pi = model.pool_image(pairs[i].h_img);
        sents = i == 0 ? ps : concat_rows(sents, ps);
        imgs = i == 0 ? pi : concat_rows(imgs, pi);
    }
    Tensor sim = matmul(row_l2_normalize(sents), transpose(row_l2_normalize(imgs)));
    return triplet_hinge_loss(sim, margin);
}

Tensor ism_from_cross(const TdenModel& model, const std::vector<Tensor>& cross_outs,
                      const std::vector<std::size_t>& n_sent_rows, double margin) {
    if (cross_outs.size() < 2)
        throw std::invalid_argument("image-sentence matching needs a batch of at least 2 pairs");
    Tensor sents, imgs;
    for (std::size_t i = 0; i < cross_outs.size(); ++i) {
        const std::size_t ns = n_sent_rows[i];
        const std::size_t total = cross_outs[i].rows();
        std::vector<std::size_t> sent_rows(ns), img_rows(total - ns);
        for (std::size_t j = 0; j < ns; ++j) sent_rows[j] = j;
        for (std::size_t j = ns; j < total; ++j) img_rows[j - ns] = j;
        Tensor ps = model.pool_sentence(gather_rows(cross_outs[i], sent_rows));
        Tensor pi = model.pool_image(gather_rows(cross_outs[i], img_rows));
        sents = i == 0 ? ps : concat_rows(sents, ps);
        imgs = i == 0 ? pi : concat_rows(imgs, pi);
    }
    Tensor sim = matmul(row_l2_normalize(sents), transpose(row_l2_normalize(imgs)));
    return triplet_hinge_loss(sim, margin);
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

namespace {

std::vector<Tensor> encode_cross_all(const TdenModel& model,
                                     const std::vector<EncodedPair>& pairs) {
    std::vector<Tensor> outs;
    outs.reserve(pairs.size());
    for (const auto& p : pairs) outs.push_back(model.cross_encode(p));
    return outs;
}

std::vector<EncodedPair> encode_masked(const TdenModel& model, const MaskedBatch& batch) {
    std::vector<EncodedPair> pairs;
    pairs.reserve(batch.size());
    for (const auto& item : batch.items)
        pairs.push_back(model.encode_pair(item.words, item.regions));
    return pairs;
}

}  // namespace

Tensor loss_mlm(const MaskedBatch& batch, const TdenModel& model) {
    if (batch.total_masked_words() == 0)
        throw std::invalid_argument("masked language modeling requires at least one masked word");
    auto pairs = encode_masked(model, batch);
    return mlm_from_cross(model, encode_cross_all(model, pairs), batch).loss;
}

Tensor loss_moc(const MaskedBatch& batch, const TdenModel& model) {
    if (batch.total_masked_regions() == 0)
        throw std::invalid_argument(
            "masked object classification requires at least one masked region");
    auto pairs = encode_masked(model, batch);
    return moc_from_cross(model, encode_cross_all(model, pairs), batch);
}

Tensor loss_ism(const std::vector<EncodedPair>& pairs, const TdenModel& model, double margin) {
    return ism_from_pairs(model, pairs, margin);
}

Tensor loss_msg(const TokenSeq& tokens, const RegionSet& regions, const TdenModel& model) {
    EncodedPair pair = model.encode_pair(tokens, regions);
    return msg_from_states(model, {pair.h_sent}, {pair.h_img}, {tokens}).loss;
}

LossTerms loss_tden(const MaskedBatch& batch, const TdenModel& model, const LossOptions& opts) {
    if (batch.size() == 0) throw std::invalid_argument("empty batch");
    auto pairs = encode_masked(model, batch);

    std::vector<Tensor> cross_outs;
    if (opts.use_mlm || opts.use_moc ||
        (opts.use_ism && opts.ism_placement == IsmPlacement::cross))
        cross_outs = encode_cross_all(model, pairs);

    LossTerms out;
    if (opts.use_mlm)
        out.terms.emplace_back("mlm", mlm_from_cross(model, cross_outs, batch).loss);
    if (opts.use_moc) out.terms.emplace_back("moc", moc_from_cross(model, cross_outs, batch));
    if (opts.use_ism) {
        if (opts.ism_placement == IsmPlacement::encoder) {
            out.terms.emplace_back("ism", ism_from_pairs(model, pairs, opts.ism_margin));
        } else {
            std::vector<std::size_t> ns;
            for (const auto& item : batch.items) ns.push_back(item.words.size());
            out.terms.emplace_back("ism", ism_from_cross(model, cross_outs, ns, opts.ism_margin));
        }
    }
    if (opts.use_msg) {
        std::vector<Tensor> hs, hi;
        std::vector<TokenSeq> targets;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            hs.push_back(pairs[i].h_sent);
            hi.push_back(pairs[i].h_img);
            // Inputs are the masked states; supervision stays the originals.
            targets.push_back(batch.items[i].original_words);
        }
        out.terms.emplace_back("msg", msg_from_states(model, hs, hi, targets).loss);
    }
    if (out.terms.empty()) throw std::invalid_argument("no proxy task enabled");
    std::vector<Tensor> ts;
    for (auto& [n, t] : out.terms) ts.push_back(t);
    out.total = sum_terms(ts);
    return out;
}

IsmPair ism_pair(const TdenModel& model, const EncodedPair& pair) {
    IsmPair out;
    out.pooled_sentence = model.pool_sentence(pair.h_sent);
    out.pooled_image = model.pool_image(pair.h_img);
    Tensor un = row_l2_normalize(out.pooled_sentence);
    Tensor vn = row_l2_normalize(out.pooled_image);
    double dot = 0.0;
    for (std::size_t j = 0; j < un.size(); ++j) dot += un.data()[j] * vn.data()[j];
    out.similarity = dot;
    return out;
}

namespace detail {
std::size_t msg_target_count(const TokenSeq& wrapped) {
    if (wrapped.size() < 2 || wrapped.ids.front() != kClsId)
        throw std::invalid_argument("expected a wrapped sequence for sentence generation");
    return wrapped.size() - 1;  // rows for [CLS] and each word; [SEP] is target-only
}
}  // namespace detail

}  // namespace tden
