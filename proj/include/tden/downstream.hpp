#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tden/data.hpp"
#include "tden/tasks.hpp"

namespace tden {

struct FinetuneConfig {
    std::size_t steps = 150;
    std::size_t batch_size = 8;
    double lr = 1e-4;
    std::uint64_t seed = 7;
    double clip_norm = 5.0;
    double ism_margin = 0.2;
};

// Joint understanding/generation feature: attention-pool the cross-encoder
// and cross-decoder outputs separately and sum the two pooled vectors.
Tensor pool_joint(const TdenModel& model, const EncodedPair& pair,
                  const AttnPoolParams& enc_pool, const AttnPoolParams& dec_pool);

// Task head over the joint pooled feature: two pooling stacks plus an affine
// output layer of the requested width.
class JointPoolHead {
public:
    JointPoolHead(const ModelConfig& cfg, std::size_t n_outputs, std::uint64_t seed);

    Tensor pooled(const TdenModel& model, const TokenSeq& tokens,
                  const RegionSet& regions) const;
    // [1 x n_outputs] scores.
    Tensor scores(const TdenModel& model, const TokenSeq& tokens,
                  const RegionSet& regions) const;

    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }

private:
    ParamRegistry reg_;
    AttnPoolParams enc_pool_;
    AttnPoolParams dec_pool_;
    LinearParams out_;
};

// Aligned corpus + annotations (item i of tasks describes record i of data).
struct TaskBundle {
    const Dataset* data = nullptr;
    const TaskData* tasks = nullptr;
};

struct ClassificationResult {
    double accuracy = 0.0;
};
// Sigmoid multi-label head over the attribute answer set, trained with
// soft-label cross entropy; reports exact-match accuracy.
ClassificationResult finetune_classification(TdenModel& model, const TaskBundle& train,
                                             const TaskBundle& eval,
                                             const FinetuneConfig& cfg);

struct RetrievalResult {
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;
};
// Trains the matching similarity with the in-batch ranking loss, then ranks
// the held-out pool per caption. Pools below 10 pairs are rejected.
RetrievalResult finetune_retrieval(TdenModel& model, const Dataset& train,
                                   const Dataset& eval_pool, const FinetuneConfig& cfg);
// Evaluation only (no training); also used by the recall oracle tests.
RetrievalResult retrieval_recall(const TdenModel& model, const Dataset& pool);
// Recall at 1/5/10 from a caption-by-image similarity matrix; the true image
// of caption i is column i, and ties rank in favor of the true image.
RetrievalResult recall_from_similarity(const std::vector<std::vector<double>>& sim);

struct MultichoiceResult {
    double accuracy = 0.0;
};
// Scores each candidate caption with a linear layer over the joint pooled
// feature; softmax cross entropy over the four scores.
MultichoiceResult finetune_multichoice(TdenModel& model, const TaskBundle& train,
                                       const TaskBundle& eval, const FinetuneConfig& cfg);

// Teacher-forced generation finetuning on clean captions.
void finetune_captioning(TdenModel& model, const Dataset& train, const FinetuneConfig& cfg);

struct GenOptions {
    std::size_t beam_width = 1;  // 1 is greedy
    double length_norm = 0.7;    // exponent applied at finalization
};
// Autoregressive decoding from [CLS]; emits until [SEP] or the length limit.
// Output is the unwrapped word sequence (no specials).
std::vector<int> generate_caption(const TdenModel& model, const RegionSet& regions,
                                  const GenOptions& opts = {});

// Conditional log p(next token | prefix words, image) over the vocabulary;
// `visual_states` is the object-encoder output, reusable across steps.
std::vector<double> next_token_log_probs(const TdenModel& model, const Tensor& visual_states,
                                         const std::vector<int>& prefix_words);

// Sum over positions of log p(token | prefix, image), ending with [SEP] when
// include_sep is set; the model-side score of a fixed word sequence.
double sequence_log_prob(const TdenModel& model, const RegionSet& regions,
                         const std::vector<int>& words, bool include_sep = true);
// length_norm-adjusted score used to rank finished beam hypotheses.
double normalized_sequence_score(const TdenModel& model, const RegionSet& regions,
                                 const std::vector<int>& words, double length_norm,
                                 bool include_sep = true);

struct CaptionEvalResult {
    double exact_match = 0.0;
    double token_f1 = 0.0;
};
CaptionEvalResult eval_caption(const std::vector<std::vector<int>>& predictions,
                               const std::vector<std::vector<int>>& references);

// Generates captions for every record and scores them against references.
CaptionEvalResult caption_metrics(const TdenModel& model, const Dataset& eval,
                                  const GenOptions& opts = {});

}  // namespace tden
