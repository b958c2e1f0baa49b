#pragma once

#include <string>
#include <vector>

#include "tden/downstream.hpp"
#include "tden/train.hpp"

namespace tden {

// One row of the proxy-task / scheduled-sampling ablation matrix.
struct AblationPreset {
    int id;
    std::string name;
    bool mlm, moc, msg, ism;
    IsmPlacement placement;
    Scheme scheme;
};

// Presets 1-8: separate understanding/generation pretraining, no matching,
// cross-encoder matching, the full joint objective, and the three two-pass
// schemes on top of it.
const std::vector<AblationPreset>& ablation_presets();
const AblationPreset& preset_by_id(int id);

struct DownstreamMetrics {
    double cls_acc = 0.0;
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;
    double mc_acc = 0.0;
    double cap_em = 0.0, cap_f1 = 0.0;
};

// Shared corpora and annotations for one ablation table.
struct AblationData {
    Dataset train, val, test;
    TaskData train_tasks, test_tasks;
    Dataset retrieval_pool;   // held-out ranking pool (up to 100 pairs)
    Dataset caption_eval;     // held-out captioning subset
};

AblationData make_ablation_data(const RunConfig& base);

// Pretrains under the preset's objectives, then finetunes each downstream
// task from that checkpoint (a fresh parameter copy per task, identical
// budgets) and evaluates on the held-out splits.
DownstreamMetrics run_preset(const RunConfig& base, const AblationPreset& preset,
                             std::uint64_t seed, const AblationData& data,
                             std::ostream* progress = nullptr);

// The no-pretraining baseline: identical finetuning from random init.
DownstreamMetrics run_scratch(const RunConfig& base, std::uint64_t seed,
                              const AblationData& data);

struct AblationRow {
    int preset;  // 0 marks the from-scratch baseline
    std::uint64_t seed;
    DownstreamMetrics metrics;
};

DownstreamMetrics average_metrics(const std::vector<AblationRow>& rows, int preset);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace tden
