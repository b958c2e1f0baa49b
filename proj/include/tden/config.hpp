#pragma once

#include <filesystem>
#include <string>

#include "tden/data.hpp"
#include "tden/sampling.hpp"

namespace tden {

// Full experiment configuration, loadable from line-oriented "key = value"
// text with '#' comments. Unknown keys are rejected; the effective config is
// echoed into every run directory.
struct RunConfig {
    ModelConfig model;

    // pretraining
    Scheme scheme = Scheme::none;
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    std::uint64_t seed = 1;
    double clip_norm = 5.0;
    std::size_t warmup_steps = 0;
    std::size_t eval_every = 200;
    std::size_t eval_items = 128;
    std::size_t checkpoint_every = 500;
    double mask_prob_words = 0.15;
    double mask_prob_regions = 0.15;
    double ism_margin = 0.2;
    IsmPlacement ism_placement = IsmPlacement::encoder;
    bool sample_argmax = false;
    std::size_t mask_anneal_steps = 0;  // 0 disables the linear decay
    bool use_mlm = true;
    bool use_moc = true;
    bool use_ism = true;
    bool use_msg = true;

    // synthetic corpus
    std::uint64_t data_seed = 1234;
    std::size_t n_train = 2048;
    std::size_t n_val = 256;
    std::size_t n_test = 256;
    std::size_t n_attributes = 24;
    double noise_sigma = 0.1;
    double attr_sigma = 0.35;
    double relation_prob = 0.5;

    // finetuning defaults
    std::size_t ft_steps = 150;
    std::size_t ft_batch_size = 8;
    double ft_lr = 1e-4;

    void validate() const;
    DataConfig data_config() const;
    SamplingOptions sampling_options(std::size_t step) const;

    std::string serialize() const;
    static RunConfig parse(const std::string& text);
    static RunConfig from_file(const std::filesystem::path& path);
    // Accepts a preset name ("desk", "tiny") or a file path.
    static RunConfig resolve(const std::string& name_or_path);
    static RunConfig desk();
    static RunConfig tiny();
};

}  // namespace tden
