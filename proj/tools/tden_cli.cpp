// Command-line front end: corpus generation, pretraining, finetuning,
// evaluation, gradient checking, and the ablation matrix.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "tden/ablation.hpp"
#include "tden/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace tden;

namespace {

RunConfig load_config(const std::string& config_arg, const std::vector<std::string>& sets) {
    RunConfig cfg = RunConfig::resolve(config_arg);
    if (!sets.empty()) {
        std::string text = cfg.serialize();
        for (const std::string& s : sets) text += s + "\n";
        cfg = RunConfig::parse(text);
    }
    return cfg;
}

struct LoadedRun {
    RunConfig cfg;
    std::unique_ptr<TdenModel> model;
};

LoadedRun load_model_from_checkpoint(const fs::path& ckpt) {
    LoadedRun run;
    run.cfg = RunConfig::parse(peek_checkpoint_config(ckpt));
    run.model = std::make_unique<TdenModel>(run.cfg.model, run.cfg.seed);
    AdamOptimizer opt(run.model->params().tensors(), run.model->params().names());
    load_checkpoint(ckpt, *run.model, opt);
    return run;
}

struct SplitPaths {
    fs::path train, val, test, train_tasks, test_tasks;
};

SplitPaths split_paths(const fs::path& dir) {
    return SplitPaths{dir / "train.tden", dir / "val.tden", dir / "test.tden",
                      dir / "train.tasks", dir / "test.tasks"};
}

int cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    DataConfig dc = cfg.data_config();
    SynthWorld world = SynthWorld::build(dc);
    SplitPaths p = split_paths(out_dir);

    Dataset train = gen_dataset(world, dc, cfg.n_train, 0);
    Dataset val = gen_dataset(world, dc, cfg.n_val, 1);
    Dataset test = gen_dataset(world, dc, cfg.n_test, 2);
    write_dataset(p.train, train, dc);
    write_dataset(p.val, val, dc);
    write_dataset(p.test, test, dc);
    write_task_data(p.train_tasks, make_task_data(train, dc, 3));
    write_task_data(p.test_tasks, make_task_data(test, dc, 4));
    {
        std::ofstream cfg_out(out_dir / "config.txt");
        cfg_out << cfg.serialize();
    }
    std::cout << "wrote " << train.size() << "/" << val.size() << "/" << test.size()
              << " train/val/test pairs to " << out_dir.string() << "\n";
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                 const fs::path& resume) {
    SplitPaths p = split_paths(data_dir);
    Dataset train = read_dataset(p.train);
    Dataset val = read_dataset(p.val);
    TdenModel model(cfg.model, cfg.seed);
    PretrainResult r = pretrain(cfg, train, val, model, out_dir, resume, &std::cout);
    std::cout << "final masked-word acc " << r.final_eval.masked_acc << ", generation ppl "
              << r.final_eval.msg_ppl << "\n"
              << "checkpoint: " << r.checkpoint_path.string() << "\n";
    return 0;
}

int cmd_finetune(const std::string& task, const fs::path& ckpt, const fs::path& data_dir,
                 const RunConfig* cfg_override, std::uint64_t seed) {
    SplitPaths p = split_paths(data_dir);
    LoadedRun run;
    if (!ckpt.empty()) {
        run = load_model_from_checkpoint(ckpt);
    } else {
        if (!cfg_override)
            throw std::runtime_error("finetune from scratch needs --config");
        run.cfg = *cfg_override;
        run.model = std::make_unique<TdenModel>(run.cfg.model, seed);
    }
    if (cfg_override) {
        // Finetuning knobs may be overridden even when loading a checkpoint.
        run.cfg.ft_steps = cfg_override->ft_steps;
        run.cfg.ft_batch_size = cfg_override->ft_batch_size;
        run.cfg.ft_lr = cfg_override->ft_lr;
    }
    FinetuneConfig fc;
    fc.steps = run.cfg.ft_steps;
    fc.batch_size = run.cfg.ft_batch_size;
    fc.lr = run.cfg.ft_lr;
    fc.seed = seed;
    fc.ism_margin = run.cfg.ism_margin;

    Dataset train = read_dataset(p.train);
    Dataset test = read_dataset(p.test);
    if (task == "classification") {
        TaskData train_tasks = read_task_data(p.train_tasks);
        TaskData test_tasks = read_task_data(p.test_tasks);
        auto r = finetune_classification(*run.model, {&train, &train_tasks},
                                         {&test, &test_tasks}, fc);
        std::cout << "classification accuracy " << r.accuracy << "\n";
    } else if (task == "retrieval") {
        Dataset pool;
        const std::size_t n = std::min<std::size_t>(100, test.size());
        pool.records.assign(test.records.begin(), test.records.begin() + n);
        auto r = finetune_retrieval(*run.model, train, pool, fc);
        std::cout << "retrieval R@1 " << r.r1 << " R@5 " << r.r5 << " R@10 " << r.r10 << "\n";
    } else if (task == "multichoice") {
        TaskData train_tasks = read_task_data(p.train_tasks);
        TaskData test_tasks = read_task_data(p.test_tasks);
        auto r = finetune_multichoice(*run.model, {&train, &train_tasks},
                                      {&test, &test_tasks}, fc);
        std::cout << "multichoice accuracy " << r.accuracy << "\n";
    } else if (task == "captioning") {
        finetune_captioning(*run.model, train, fc);
        Dataset eval;
        const std::size_t n = std::min<std::size_t>(64, test.size());
        eval.records.assign(test.records.begin(), test.records.begin() + n);
        auto r = caption_metrics(*run.model, eval);
        std::cout << "captioning exact-match " << r.exact_match << " token-F1 " << r.token_f1
                  << "\n";
    } else {
        throw CLI::ValidationError("unknown task '" + task + "'");
    }
    return 0;
}

int cmd_eval(const std::string& task, const fs::path& ckpt, const fs::path& data_dir,
             std::size_t beam) {
    SplitPaths p = split_paths(data_dir);
    LoadedRun run = load_model_from_checkpoint(ckpt);
    Dataset test = read_dataset(p.test);
    if (task == "retrieval") {
        Dataset pool;
        const std::size_t n = std::min<std::size_t>(100, test.size());
        pool.records.assign(test.records.begin(), test.records.begin() + n);
        auto r = retrieval_recall(*run.model, pool);
        std::cout << "retrieval R@1 " << r.r1 << " R@5 " << r.r5 << " R@10 " << r.r10 << "\n";
    } else if (task == "captioning") {
        Dataset eval;
        const std::size_t n = std::min<std::size_t>(64, test.size());
        eval.records.assign(test.records.begin(), test.records.begin() + n);
        GenOptions g;
        g.beam_width = beam;
        auto r = caption_metrics(*run.model, eval, g);
        std::cout << "captioning exact-match " << r.exact_match << " token-F1 " << r.token_f1
                  << "\n";
    } else {
        throw CLI::ValidationError("eval supports retrieval or captioning, got '" + task + "'");
    }
    return 0;
}

int cmd_gradcheck(const RunConfig& cfg) {
    GradCheckReport report = run_gradcheck_suite(cfg.model);
    for (const auto& [name, err] : report.checks)
        std::cout << name << " " << err << "\n";
    std::cout << "max relative error " << report.max_error << " (" << report.checks.size()
              << " checks, " << report.seconds << " s)\n";
    return report.max_error < 1e-4 ? 0 : 2;
}

int cmd_ablate(const RunConfig& cfg, const std::vector<int>& preset_ids,
               const std::vector<std::uint64_t>& seeds, bool with_scratch,
               const fs::path& out_json) {
    AblationData data = make_ablation_data(cfg);
    std::vector<AblationRow> rows;
    for (std::uint64_t seed : seeds) {
        for (int id : preset_ids) {
            DownstreamMetrics m =
                run_preset(cfg, preset_by_id(id), seed, data, &std::cout);
            rows.push_back(AblationRow{id, seed, m});
        }
        if (with_scratch)
            rows.push_back(AblationRow{0, seed, run_scratch(cfg, seed, data)});
    }
    std::cout << format_ablation_table(rows);
    if (!out_json.empty()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& row : rows)
            j.push_back({{"preset", row.preset},
                         {"seed", row.seed},
                         {"cls_acc", row.metrics.cls_acc},
                         {"r1", row.metrics.r1},
                         {"r5", row.metrics.r5},
                         {"r10", row.metrics.r10},
                         {"mc_acc", row.metrics.mc_acc},
                         {"cap_em", row.metrics.cap_em},
                         {"cap_f1", row.metrics.cap_f1}});
        std::ofstream out(out_json);
        out << j.dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-stream decoupled encoder-decoder: pretraining and evaluation"};
    app.require_subcommand(1);

    std::string config_arg = "desk";
    std::vector<std::string> sets;

    auto add_config_opts = [&](CLI::App* sub) {
        sub->add_option("--config", config_arg,
                        "config file path or preset name (desk, tiny)");
        sub->add_option("--set", sets, "override a config key, e.g. --set 'steps = 100'");
    };

    std::string out_dir, data_dir = "data", resume, task, ckpt;
    std::uint64_t seed_flag = 0;
    bool seed_given = false;
    std::size_t beam = 1;
    std::vector<int> preset_ids;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    bool with_scratch = false;
    std::string ablate_json;

    CLI::App* gen = app.add_subcommand("gen-data", "generate train/val/test splits");
    add_config_opts(gen);
    gen->add_option("--out", out_dir, "output directory")->required();

    CLI::App* pre = app.add_subcommand("pretrain", "run proxy-task pretraining");
    add_config_opts(pre);
    pre->add_option("--data", data_dir, "directory holding the dataset splits")->required();
    pre->add_option("--out", out_dir, "run directory")->required();
    pre->add_option("--resume", resume, "checkpoint to resume from");
    pre->add_option("--scheme", sets,
                    "shorthand for --set 'scheme = ...'")
        ->transform([](std::string s) { return "scheme = " + s; });
    pre->add_flag_callback("--argmax-sampling",
                           [&sets]() { sets.push_back("sample_argmax = true"); },
                           "replace masked tokens with argmax instead of sampling");
    pre->add_option("--seed", sets, "shorthand for --set 'seed = ...'")
        ->transform([](std::string s) { return "seed = " + s; });
    pre->add_option("--steps", sets, "shorthand for --set 'steps = ...'")
        ->transform([](std::string s) { return "steps = " + s; });

    CLI::App* ft = app.add_subcommand("finetune", "finetune a downstream task");
    add_config_opts(ft);
    ft->add_option("--task", task, "classification|retrieval|multichoice|captioning")
        ->required();
    ft->add_option("--ckpt", ckpt, "pretraining checkpoint (omit to train from scratch)");
    ft->add_option("--data", data_dir, "dataset directory")->required();
    ft->add_option("--seed", seed_flag, "finetuning seed")->each([&](const std::string&) {
        seed_given = true;
    });

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint without finetuning");
    ev->add_option("--task", task, "retrieval|captioning")->required();
    ev->add_option("--ckpt", ckpt, "checkpoint to evaluate")->required();
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--beam", beam, "beam width for captioning");

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_config_opts(gc);

    CLI::App* ab = app.add_subcommand("ablate", "run the proxy-task ablation matrix");
    add_config_opts(ab);
    ab->add_option("--presets", preset_ids, "preset ids (default all eight)");
    ab->add_option("--seeds", seeds, "seeds to average over");
    ab->add_flag("--scratch", with_scratch, "include the no-pretraining baseline");
    ab->add_option("--out", ablate_json, "write per-run metrics as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(load_config(config_arg, sets), out_dir);
        if (pre->parsed())
            return cmd_pretrain(load_config(config_arg, sets), data_dir, out_dir, resume);
        if (ft->parsed()) {
            RunConfig cfg = load_config(config_arg, sets);
            return cmd_finetune(task, ckpt, data_dir, &cfg, seed_given ? seed_flag : cfg.seed);
        }
        if (ev->parsed()) return cmd_eval(task, ckpt, data_dir, beam);
        if (gc->parsed()) return cmd_gradcheck(load_config(config_arg, sets));
        if (ab->parsed()) {
            if (preset_ids.empty())
                for (const auto& p : ablation_presets()) preset_ids.push_back(p.id);
            return cmd_ablate(load_config(config_arg, sets), preset_ids, seeds, with_scratch,
                              ablate_json);
        }
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
