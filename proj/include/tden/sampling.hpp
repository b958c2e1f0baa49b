#pragma once

#include <optional>
#include <string>

#include "tden/tasks.hpp"

namespace tden {

enum class Scheme { none, two_pass_a, two_pass_b, two_pass_c };

Scheme scheme_from_string(const std::string& s);
std::string to_string(Scheme s);

// First-pass word distributions at the masked positions, aligned with
// MaskedItem::word_positions. Stored as plain probabilities, detached from
// the tape: sampled ids are constants and no gradient flows from the second
// pass into the first-pass classifiers through them.
struct PassOutputs {
    std::vector<std::vector<std::vector<double>>> enc_word_dists;  // [item][k][vocab]
    std::vector<std::vector<std::vector<double>>> dec_word_dists;  // [item][k][vocab]
};

// The two mask-free sequences for the second pass: replacements sampled from
// the cross-modal encoder (S_E) and decoder (S_D) distributions.
struct SampledSequences {
    std::vector<TokenSeq> s_e;
    std::vector<TokenSeq> s_d;
};

struct SamplingOptions {
    double p_words = 0.15;
    double p_regions = 0.15;
    bool argmax = false;  // argmax replacement instead of multinomial draws
    LossOptions losses;
};

// Draws one id from `dist`, never returning [MASK] (its mass is
// renormalized away so second-pass inputs are mask-free by construction).
int sample_token(const std::vector<double>& dist, Rng& rng, bool argmax = false);

// The Two-Pass-C switch: Bernoulli(0.5) over {0, 1}.
int draw_alpha(Rng& rng);

// Builds S_E / S_D from the first-pass outputs; unmasked positions keep the
// original ids. Distributions containing NaN raise std::domain_error.
SampledSequences sample_replacements(const PassOutputs& pass1, const MaskedBatch& batch,
                                     Rng& rng, bool argmax = false);

// One optimization-step objective per scheme. All masking, sampling, and the
// Two-Pass-C switch draw from `rng`, so a step is a pure function of
// (parameters, batch, rng state). Term names carry a "2" suffix for
// second-pass contributions; total is always the left-fold sum of the terms.
LossTerms step_scheme_none(const PairBatch& batch, const TdenModel& model, Rng& rng,
                           const SamplingOptions& opts);
// `capture_sampled`, when given, receives the second-pass sequences.
LossTerms step_two_pass_a(const PairBatch& batch, const TdenModel& model, Rng& rng,
                          const SamplingOptions& opts,
                          SampledSequences* capture_sampled = nullptr);
LossTerms step_two_pass_b(const PairBatch& batch, const TdenModel& model, Rng& rng,
                          const SamplingOptions& opts,
                          SampledSequences* capture_sampled = nullptr);
LossTerms step_two_pass_c(const PairBatch& batch, const TdenModel& model, Rng& rng,
                          const SamplingOptions& opts,
                          std::optional<int> alpha_override = std::nullopt,
                          SampledSequences* capture_sampled = nullptr);

LossTerms run_scheme_step(Scheme scheme, const PairBatch& batch, const TdenModel& model,
                          Rng& rng, const SamplingOptions& opts);

}  // namespace tden
