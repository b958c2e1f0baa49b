#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tden/config.hpp"
#include "tden/model.hpp"

namespace tden {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Gradients are consumed
// (and cleared) by step(); a NaN gradient aborts naming the parameter.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Tensor> params, std::vector<std::string> names,
                  AdamConfig cfg = {});

    void step() { step(cfg_.lr); }
    void step(double lr);

    std::size_t t() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    // Checkpoint access.
    std::vector<std::vector<double>>& moment1() { return m_; }
    std::vector<std::vector<double>>& moment2() { return v_; }
    void set_t(std::size_t t) { t_ = t; }

private:
    std::vector<Tensor> params_;
    std::vector<std::string> names_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm;
// returns the pre-clip norm.
double clip_global_norm(const std::vector<Tensor>& params, double max_norm);

// ---------------------------------------------------------------------------
// Checkpoints: binary, versioned, bitwise round trip of parameters and
// optimizer state plus the serialized config and the step counter.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const TdenModel& model,
                     const AdamOptimizer& opt, std::size_t step, const RunConfig& cfg);

struct CheckpointInfo {
    std::size_t step = 0;
    std::string config_text;
};

// Restores parameters and optimizer state in place; a tensor whose shape
// disagrees with the current model raises an error naming it.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, TdenModel& model,
                               AdamOptimizer& opt);
// Reads only the embedded config (to build a model before loading weights).
std::string peek_checkpoint_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pretraining loop
// ---------------------------------------------------------------------------

struct EvalMetrics {
    double mlm_loss = 0.0;
    double masked_acc = 0.0;
    double moc_loss = 0.0;
    double ism_loss = 0.0;
    double msg_loss = 0.0;
    double msg_ppl = 0.0;
};

struct PretrainResult {
    EvalMetrics first_eval;
    EvalMetrics final_eval;
    std::filesystem::path checkpoint_path;  // empty when no run_dir was given
};

// Runs cfg.steps optimization steps of the selected scheme over shuffled
// minibatches. Every stochastic choice is derived from (cfg.seed, step), so
// the run is a pure function of (seed, config, data) and a resumed run
// continues the exact trajectory. When run_dir is non-empty the effective
// config, a JSONL metrics log, and checkpoints are written there.
PretrainResult pretrain(const RunConfig& cfg, const Dataset& train_data,
                        const Dataset& val_data, TdenModel& model,
                        const std::filesystem::path& run_dir = {},
                        const std::filesystem::path& resume_from = {},
                        std::ostream* progress = nullptr);

// Deterministic eval-set metrics (fixed masking stream per step marker).
EvalMetrics evaluate(const RunConfig& cfg, const Dataset& val_data, const TdenModel& model,
                     std::size_t step_marker);

// The minibatch index set for a given step: an epoch-wise seeded shuffle.
std::vector<std::size_t> batch_indices(std::size_t step, std::size_t n_records,
                                       std::size_t batch_size, std::uint64_t seed);

}  // namespace tden
