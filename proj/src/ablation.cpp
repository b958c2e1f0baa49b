#include "tden/ablation.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace tden {

const std::vector<AblationPreset>& ablation_presets() {
    static const std::vector<AblationPreset> presets = {
        {1, "understanding-only", true, true, false, true, IsmPlacement::encoder, Scheme::none},
        {2, "generation-only", false, false, true, true, IsmPlacement::encoder, Scheme::none},
        {3, "no-matching", true, true, true, false, IsmPlacement::encoder, Scheme::none},
        {4, "cross-matching", true, true, true, true, IsmPlacement::cross, Scheme::none},
        {5, "joint", true, true, true, true, IsmPlacement::encoder, Scheme::none},
        {6, "two-pass-a", true, true, true, true, IsmPlacement::encoder, Scheme::two_pass_a},
        {7, "two-pass-b", true, true, true, true, IsmPlacement::encoder, Scheme::two_pass_b},
        {8, "two-pass-c", true, true, true, true, IsmPlacement::encoder, Scheme::two_pass_c},
    };
    return presets;
}

const AblationPreset& preset_by_id(int id) {
    for (const auto& p : ablation_presets())
        if (p.id == id) return p;
    throw std::out_of_range("no ablation preset " + std::to_string(id));
}

AblationData make_ablation_data(const RunConfig& base) {
    DataConfig dc = base.data_config();
    SynthWorld world = SynthWorld::build(dc);
    AblationData d;
    d.train = gen_dataset(world, dc, base.n_train, 0);
    d.val = gen_dataset(world, dc, base.n_val, 1);
    d.test = gen_dataset(world, dc, base.n_test, 2);
    d.train_tasks = make_task_data(d.train, dc, 3);
    d.test_tasks = make_task_data(d.test, dc, 4);

    const std::size_t pool_n = std::min<std::size_t>(100, d.test.size());
    d.retrieval_pool.records.assign(d.test.records.begin(),
                                    d.test.records.begin() + pool_n);
    const std::size_t cap_n = std::min<std::size_t>(64, d.test.size());
    d.caption_eval.records.assign(d.test.records.begin(), d.test.records.begin() + cap_n);
    return d;
}

namespace {

DownstreamMetrics finetune_all(const RunConfig& base, const TdenModel& pretrained,
                               std::uint64_t seed, const AblationData& data,
                               std::ostream* progress) {
    DownstreamMetrics m;
    FinetuneConfig fc;
    fc.steps = base.ft_steps;
    fc.batch_size = base.ft_batch_size;
    fc.lr = base.ft_lr;
    fc.ism_margin = base.ism_margin;

    TaskBundle train_bundle{&data.train, &data.train_tasks};
    TaskBundle test_bundle{&data.test, &data.test_tasks};

    {
        TdenModel model(base.model, seed);
        model.copy_parameters_from(pretrained);
        FinetuneConfig c = fc;
        c.seed = Rng::derive(seed, 101);
        m.cls_acc = finetune_classification(model, train_bundle, test_bundle, c).accuracy;
        if (progress) (*progress) << "  cls_acc " << m.cls_acc << "\n";
    }
    {
        TdenModel model(base.model, seed);
        model.copy_parameters_from(pretrained);
        FinetuneConfig c = fc;
        c.seed = Rng::derive(seed, 102);
        RetrievalResult r = finetune_retrieval(model, data.train, data.retrieval_pool, c);
        m.r1 = r.r1;
        m.r5 = r.r5;
        m.r10 = r.r10;
        if (progress) (*progress) << "  retrieval r1 " << m.r1 << "\n";
    }
    {
        TdenModel model(base.model, seed);
        model.copy_parameters_from(pretrained);
        FinetuneConfig c = fc;
        c.seed = Rng::derive(seed, 103);
        m.mc_acc = finetune_multichoice(model, train_bundle, test_bundle, c).accuracy;
        if (progress) (*progress) << "  mc_acc " << m.mc_acc << "\n";
    }
    {
        TdenModel model(base.model, seed);
        model.copy_parameters_from(pretrained);
        FinetuneConfig c = fc;
        c.seed = Rng::derive(seed, 104);
        finetune_captioning(model, data.train, c);
        CaptionEvalResult r = caption_metrics(model, data.caption_eval);
        m.cap_em = r.exact_match;
        m.cap_f1 = r.token_f1;
        if (progress) (*progress) << "  cap_f1 " << m.cap_f1 << "\n";
    }
    return m;
}

}  // namespace

DownstreamMetrics run_preset(const RunConfig& base, const AblationPreset& preset,
                             std::uint64_t seed, const AblationData& data,
                             std::ostream* progress) {
    RunConfig cfg = base;
    cfg.seed = seed;
    cfg.use_mlm = preset.mlm;
    cfg.use_moc = preset.moc;
    cfg.use_msg = preset.msg;
    cfg.use_ism = preset.ism;
    cfg.ism_placement = preset.placement;
    cfg.scheme = preset.scheme;
    cfg.validate();

    TdenModel model(cfg.model, seed);
    pretrain(cfg, data.train, data.val, model);
    if (progress) (*progress) << "preset " << preset.id << " seed " << seed << " pretrained\n";
    return finetune_all(base, model, seed, data, progress);
}

DownstreamMetrics run_scratch(const RunConfig& base, std::uint64_t seed,
                              const AblationData& data) {
    TdenModel model(base.model, seed);
    return finetune_all(base, model, seed, data, nullptr);
}

DownstreamMetrics average_metrics(const std::vector<AblationRow>& rows, int preset) {
    DownstreamMetrics avg;
    std::size_t n = 0;
    for (const auto& row : rows) {
        if (row.preset != preset) continue;
        avg.cls_acc += row.metrics.cls_acc;
        avg.r1 += row.metrics.r1;
        avg.r5 += row.metrics.r5;
        avg.r10 += row.metrics.r10;
        avg.mc_acc += row.metrics.mc_acc;
        avg.cap_em += row.metrics.cap_em;
        avg.cap_f1 += row.metrics.cap_f1;
        ++n;
    }
    if (n == 0) throw std::out_of_range("no rows for preset " + std::to_string(preset));
    const double inv = 1.0 / static_cast<double>(n);
    avg.cls_acc *= inv;
    avg.r1 *= inv;
    avg.r5 *= inv;
    avg.r10 *= inv;
    avg.mc_acc *= inv;
    avg.cap_em *= inv;
    avg.cap_f1 *= inv;
    return avg;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "preset              seed  cls_acc     r1     r5    r10  mc_acc  cap_em  cap_f1\n";
    auto line = [&os](const std::string& name, const std::string& seed,
                      const DownstreamMetrics& m) {
        os << std::left << std::setw(18) << name << std::right << std::setw(6) << seed << "  "
           << std::setw(7) << m.cls_acc << std::setw(7) << m.r1 << std::setw(7) << m.r5
           << std::setw(7) << m.r10 << std::setw(8) << m.mc_acc << std::setw(8) << m.cap_em
           << std::setw(8) << m.cap_f1 << "\n";
    };
    for (const auto& row : rows) {
        const std::string name =
            row.preset == 0 ? "scratch" : preset_by_id(row.preset).name;
        line(name, std::to_string(row.seed), row.metrics);
    }
    // Per-preset means over seeds.
    std::vector<int> seen;
    for (const auto& row : rows)
        if (std::find(seen.begin(), seen.end(), row.preset) == seen.end())
            seen.push_back(row.preset);
    os << "---\n";
    for (int p : seen) {
        const std::string name = p == 0 ? "scratch" : preset_by_id(p).name;
        line(name, "mean", average_metrics(rows, p));
    }
    return os.str();
}

}  // namespace tden
