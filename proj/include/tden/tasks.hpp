#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tden/model.hpp"

namespace tden {

enum class IsmPlacement { encoder, cross };

// One pair after masking. The original sequence is kept alongside because
// generation-style targets and second-pass replacements both need it.
struct MaskedItem {
    TokenSeq words;              // wrapped, with [MASK] substitutions
    TokenSeq original_words;     // wrapped, untouched
    std::vector<std::size_t> word_positions;  // wrapped indices of masked words
    std::vector<int> word_targets;            // original ids at those positions
    RegionSet regions;                        // masked features zeroed, flags set
    std::vector<std::size_t> region_positions;
    std::vector<std::vector<double>> region_targets;  // detector distributions
};

struct MaskedBatch {
    std::vector<MaskedItem> items;
    std::size_t size() const { return items.size(); }
    std::size_t total_masked_words() const;
    std::size_t total_masked_regions() const;
};

// Independently replaces each non-special token with [MASK] at probability p;
// when p > 0 the pattern is redrawn until at least one word is masked.
// Returns the masked sequence, the masked positions, and the original ids.
std::tuple<TokenSeq, std::vector<std::size_t>, std::vector<int>> mask_words(
    const TokenSeq& tokens, Rng& rng, double p = 0.15);

// Zeroes each region feature at probability p and marks the row so the
// embedding adds the learned mask vector; geometry is kept. Targets are the
// detector class distributions of the masked rows.
std::tuple<RegionSet, std::vector<std::size_t>, std::vector<std::vector<double>>> mask_regions(
    const RegionSet& regions, Rng& rng, double p = 0.15);

// Masks every pair in the batch. Word masking forces >= 1 masked word per
// sentence; region masking forces >= 1 masked region per batch (both only
// when the respective p > 0).
MaskedBatch make_masked_batch(const PairBatch& batch, Rng& rng, double p_words = 0.15,
                              double p_regions = 0.15);

struct LossOptions {
    bool use_mlm = true;
    bool use_moc = true;
    bool use_ism = true;
    bool use_msg = true;
    double ism_margin = 0.2;
    IsmPlacement ism_placement = IsmPlacement::encoder;
};

// Named scalar terms plus their left-fold sum. `alpha` is set by Two-Pass-C.
struct LossTerms {
    std::vector<std::pair<std::string, Tensor>> terms;
    Tensor total;
    int alpha = -1;

    double value(const std::string& name) const;
    bool has(const std::string& name) const;
};

// ---------------------------------------------------------------------------
// Batch-level objectives. The public entry points enforce the "at least one
// masked position" contract; the *_from_* building blocks accept empty
// position sets (contributing an exact zero) so the two-pass schemes stay
// well defined when the masking probability is forced to zero.
// ---------------------------------------------------------------------------

struct HeadResult {
    Tensor loss;    // scalar; exact 0 constant when no positions exist
    Tensor logits;  // concatenated rows across the batch (empty tensor if none)
    std::vector<std::size_t> item_offsets;  // row offset of each item within logits
};

// Cross-entropy at the masked word rows of per-item cross-encoder outputs.
HeadResult mlm_from_cross(const TdenModel& model, const std::vector<Tensor>& cross_outs,
                          const MaskedBatch& batch);
// KL divergence at the masked visual rows of per-item cross-encoder outputs.
Tensor moc_from_cross(const TdenModel& model, const std::vector<Tensor>& cross_outs,
                      const MaskedBatch& batch);
// Mean next-token NLL over decoder positions 0..n_words; inputs are the
// (possibly corrupted) encoded word states, targets come from the original
// sequences. Runs the cross-modal decoder once per item.
HeadResult msg_from_states(const TdenModel& model, const std::vector<Tensor>& word_states,
                           const std::vector<Tensor>& visual_states,
                           const std::vector<TokenSeq>& originals);

// Multibatch triplet ranking loss from encoder-stream outputs.
Tensor ism_from_pairs(const TdenModel& model, const std::vector<EncodedPair>& pairs,
                      double margin);
// The inferior ablation variant: pools matched-pair cross-encoder outputs.
Tensor ism_from_cross(const TdenModel& model, const std::vector<Tensor>& cross_outs,
                      const std::vector<std::size_t>& n_sent_rows, double margin);

// ---------------------------------------------------------------------------
// Public per-objective entry points
// ---------------------------------------------------------------------------

Tensor loss_mlm(const MaskedBatch& batch, const TdenModel& model);
Tensor loss_moc(const MaskedBatch& batch, const TdenModel& model);
Tensor loss_ism(const std::vector<EncodedPair>& pairs, const TdenModel& model,
                double margin = 0.2);
Tensor loss_msg(const TokenSeq& tokens, const RegionSet& regions, const TdenModel& model);

// Single-pass objective: unweighted sum of the enabled proxy tasks, one
// encode per modality per item.
LossTerms loss_tden(const MaskedBatch& batch, const TdenModel& model,
                    const LossOptions& opts = {});

// Similarity diagnostics for retrieval-style evaluation.
struct IsmPair {
    double similarity;  // cosine of the pooled vectors, in [-1, 1]
    Tensor pooled_sentence;
    Tensor pooled_image;
};
IsmPair ism_pair(const TdenModel& model, const EncodedPair& pair);

namespace detail {
// Number of MSG target positions for a wrapped sequence (n_words + 1).
std::size_t msg_target_count(const TokenSeq& wrapped);
}  // namespace detail

}  // namespace tden
