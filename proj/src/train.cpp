#include "tden/train.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

namespace tden {

namespace {
// Stream salts for deriving per-purpose rng states from the run seed.
constexpr std::uint64_t kStreamStep = 2;
constexpr std::uint64_t kStreamShuffle = 3;
constexpr std::uint64_t kStreamEval = 4;
}  // namespace

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, std::vector<std::string> names,
                             AdamConfig cfg)
    : params_(std::move(params)), names_(std::move(names)), cfg_(cfg) {
    if (params_.size() != names_.size())
        throw std::invalid_argument("optimizer needs one name per parameter");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void AdamOptimizer::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        const bool has = p.has_grad();
        const std::vector<double>* g = has ? &p.grad() : nullptr;
        double* m = m_[i].data();
        double* v = v_[i].data();
        double* x = p.data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = has ? (*g)[j] : 0.0;
            if (std::isnan(gj))
                throw std::runtime_error("NaN gradient in parameter " + names_[i]);
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            x[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        p.zero_grad();
    }
}

double clip_global_norm(const std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor& p : params)
        if (p.has_grad())
            for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (const Tensor& p : params)
            if (p.has_grad())
                for (double& g : const_cast<Tensor&>(p).grad_mut()) g *= scale;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'T', 'D', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, std::size_t n, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw std::runtime_error(std::string("truncated checkpoint while reading ") + what);
}

void write_string(std::ofstream& out, const std::string& s) {
    const std::uint64_t n = s.size();
    write_bytes(out, &n, 8);
    write_bytes(out, s.data(), s.size());
}

std::string read_string(std::ifstream& in, const char* what) {
    std::uint64_t n = 0;
    read_bytes(in, &n, 8, what);
    if (n > (1ull << 32)) throw std::runtime_error("implausible string length in checkpoint");
    std::string s(n, '\0');
    read_bytes(in, s.data(), n, what);
    return s;
}

void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    write_bytes(out, v.data(), v.size() * 8);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TdenModel& model,
                     const AdamOptimizer& opt, std::size_t step, const RunConfig& cfg) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        write_bytes(out, kCkptMagic, 4);
        const std::uint32_t version = kCkptVersion;
        write_bytes(out, &version, 4);
        write_string(out, cfg.serialize());
        const std::uint64_t step64 = step;
        write_bytes(out, &step64, 8);
        const std::uint64_t opt_t = opt.t();
        write_bytes(out, &opt_t, 8);

        const auto& names = model.params().names();
        const auto& tensors = model.params().tensors();
        auto& m = const_cast<AdamOptimizer&>(opt).moment1();
        auto& v = const_cast<AdamOptimizer&>(opt).moment2();
        const std::uint64_t count = names.size();
        write_bytes(out, &count, 8);
        for (std::size_t i = 0; i < names.size(); ++i) {
            write_string(out, names[i]);
            const std::uint64_t ndim = tensors[i].shape().size();
            write_bytes(out, &ndim, 8);
            for (std::size_t d : tensors[i].shape()) {
                const std::uint64_t d64 = d;
                write_bytes(out, &d64, 8);
            }
            write_doubles(out, tensors[i].values());
            write_doubles(out, m[i]);
            write_doubles(out, v[i]);
        }
        if (!out) throw std::runtime_error("write failure on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

namespace {

std::ifstream open_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[4];
    read_bytes(in, magic, 4, "magic");
    if (std::memcmp(magic, kCkptMagic, 4) != 0)
        throw std::runtime_error(path.string() + " is not a checkpoint file");
    std::uint32_t version = 0;
    read_bytes(in, &version, 4, "version");
    if (version != kCkptVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    return in;
}

}  // namespace

std::string peek_checkpoint_config(const std::filesystem::path& path) {
    std::ifstream in = open_checkpoint(path);
    return read_string(in, "config");
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, TdenModel& model,
                               AdamOptimizer& opt) {
    std::ifstream in = open_checkpoint(path);
    CheckpointInfo info;
    info.config_text = read_string(in, "config");
    std::uint64_t step64 = 0, opt_t = 0, count = 0;
    read_bytes(in, &step64, 8, "step");
    read_bytes(in, &opt_t, 8, "optimizer step");
    read_bytes(in, &count, 8, "tensor count");
    info.step = static_cast<std::size_t>(step64);
    opt.set_t(static_cast<std::size_t>(opt_t));

    const auto& names = model.params().names();
    const auto& tensors = model.params().tensors();
    if (count != names.size())
        throw std::runtime_error("checkpoint holds " + std::to_string(count) +
                                 " tensors but the model has " + std::to_string(names.size()));
    for (std::size_t i = 0; i < count; ++i) {
        const std::string name = read_string(in, "tensor name");
        if (name != names[i])
            throw std::runtime_error("checkpoint tensor '" + name + "' does not match model '" +
                                     names[i] + "'");
        std::uint64_t ndim = 0;
        read_bytes(in, &ndim, 8, "tensor rank");
        std::vector<std::size_t> shape(ndim);
        for (auto& d : shape) {
            std::uint64_t d64 = 0;
            read_bytes(in, &d64, 8, "tensor dim");
            d = static_cast<std::size_t>(d64);
        }
        Tensor t = tensors[i];
        if (shape != t.shape())
            throw std::runtime_error("checkpoint tensor '" + name +
                                     "' has mismatched shape for the current config");
        read_bytes(in, t.data(), t.size() * 8, name.c_str());
        read_bytes(in, opt.moment1()[i].data(), t.size() * 8, "moment1");
        read_bytes(in, opt.moment2()[i].data(), t.size() * 8, "moment2");
        t.zero_grad();
    }
    return info;
}

// ---------------------------------------------------------------------------
// Pretraining loop
// ---------------------------------------------------------------------------

std::vector<std::size_t> batch_indices(std::size_t step, std::size_t n_records,
                                       std::size_t batch_size, std::uint64_t seed) {
    if (n_records == 0) throw std::invalid_argument("dataset is empty");
    const std::size_t bs = std::min(batch_size, n_records);
    const std::size_t per_epoch = n_records / bs;
    const std::size_t epoch = step / per_epoch;
    const std::size_t slot = step % per_epoch;
    std::vector<std::size_t> perm(n_records);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng rng(Rng::derive(Rng::derive(seed, kStreamShuffle), epoch));
    rng.shuffle(perm);
    return {perm.begin() + slot * bs, perm.begin() + (slot + 1) * bs};
}

EvalMetrics evaluate(const RunConfig& cfg, const Dataset& val_data, const TdenModel& model,
                     std::size_t step_marker) {
    EvalMetrics m;
    const std::size_t n = std::min(cfg.eval_items, val_data.size());
    if (n == 0) return m;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    PairBatch batch = val_data.batch(idx);
    Rng rng(Rng::derive(Rng::derive(cfg.seed, kStreamEval), step_marker));
    MaskedBatch mb = make_masked_batch(batch, rng, cfg.mask_prob_words, cfg.mask_prob_regions);

    // Understanding metrics on masked inputs.
    std::vector<Tensor> cross_outs;
    std::vector<EncodedPair> masked_pairs;
    for (const auto& item : mb.items)
        masked_pairs.push_back(model.encode_pair(item.words, item.regions));
    for (const auto& p : masked_pairs) cross_outs.push_back(model.cross_encode(p));
    HeadResult mlm = mlm_from_cross(model, cross_outs, mb);
    m.mlm_loss = mlm.loss.item();
    m.moc_loss = moc_from_cross(model, cross_outs, mb).item();

    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < mb.size(); ++i) {
        const auto& item = mb.items[i];
        for (std::size_t k = 0; k < item.word_positions.size(); ++k) {
            const std::size_t row = mlm.item_offsets[i] + k;
            const double* lr = mlm.logits.data() + row * mlm.logits.cols();
            std::size_t best = 0;
            for (std::size_t j = 1; j < mlm.logits.cols(); ++j)
                if (lr[j] > lr[best]) best = j;
            hits += static_cast<int>(best) == item.word_targets[k];
            ++total;
        }
    }
    m.masked_acc = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;

    // Matching and generation metrics on clean inputs.
    std::vector<EncodedPair> clean_pairs;
    std::vector<Tensor> hs, hi;
    std::vector<TokenSeq> originals;
    for (std::size_t i = 0; i < n; ++i) {
        clean_pairs.push_back(model.encode_pair(batch.sentences[i], batch.images[i]));
        hs.push_back(clean_pairs.back().h_sent);
        hi.push_back(clean_pairs.back().h_img);
        originals.push_back(batch.sentences[i]);
    }
    if (n >= 2) m.ism_loss = ism_from_pairs(model, clean_pairs, cfg.ism_margin).item();
    m.msg_loss = msg_from_states(model, hs, hi, originals).loss.item();
    m.msg_ppl = std::exp(m.msg_loss);
    return m;
}

namespace {

nlohmann::json eval_json(std::size_t step, const EvalMetrics& m) {
    return nlohmann::json{{"type", "eval"},       {"step", step},
                          {"mlm_loss", m.mlm_loss}, {"masked_acc", m.masked_acc},
                          {"moc_loss", m.moc_loss}, {"ism_loss", m.ism_loss},
                          {"msg_loss", m.msg_loss}, {"msg_ppl", m.msg_ppl}};
}

}  // namespace

PretrainResult pretrain(const RunConfig& cfg, const Dataset& train_data,
                        const Dataset& val_data, TdenModel& model,
                        const std::filesystem::path& run_dir,
                        const std::filesystem::path& resume_from, std::ostream* progress) {
    cfg.validate();
    if (train_data.size() == 0) throw std::invalid_argument("training dataset is empty");

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamOptimizer opt(model.params().tensors(), model.params().names(), acfg);

    std::size_t start_step = 0;
    if (!resume_from.empty()) start_step = load_checkpoint(resume_from, model, opt).step;

    std::ofstream metrics;
    const bool has_dir = !run_dir.empty();
    if (has_dir) {
        std::filesystem::create_directories(run_dir);
        std::ofstream cfg_out(run_dir / "config.txt");
        cfg_out << cfg.serialize();
        metrics.open(run_dir / "metrics.jsonl",
                     start_step == 0 ? std::ios::trunc : std::ios::app);
    }
    auto emit = [&](const nlohmann::json& j) {
        if (has_dir) metrics << j.dump() << "\n";
    };

    PretrainResult result;
    result.first_eval = evaluate(cfg, val_data, model, 0);
    if (start_step == 0) emit(eval_json(0, result.first_eval));

    for (std::size_t step = start_step; step < cfg.steps; ++step) {
        PairBatch batch =
            train_data.batch(batch_indices(step, train_data.size(), cfg.batch_size, cfg.seed));
        Rng step_rng(Rng::derive(Rng::derive(cfg.seed, kStreamStep), step));

        Tape tape;
        LossTerms lt;
        {
            TapeScope scope(tape);
            lt = run_scheme_step(cfg.scheme, batch, model, step_rng,
                                 cfg.sampling_options(step));
            tape.backward(lt.total);
        }
        const double gnorm = clip_global_norm(model.params().tensors(), cfg.clip_norm);
        double lr = cfg.lr;
        if (cfg.warmup_steps > 0)
            lr *= std::min(1.0, static_cast<double>(step + 1) /
                                    static_cast<double>(cfg.warmup_steps));
        opt.step(lr);

        nlohmann::json terms = nlohmann::json::object();
        for (const auto& [name, t] : lt.terms) terms[name] = t.item();
        nlohmann::json rec{{"type", "step"},
                           {"step", step},
                           {"terms", terms},
                           {"total", lt.total.item()},
                           {"grad_norm", gnorm}};
        if (lt.alpha >= 0) rec["alpha"] = lt.alpha;
        emit(rec);

        const std::size_t done = step + 1;
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps) {
            EvalMetrics em = evaluate(cfg, val_data, model, done);
            emit(eval_json(done, em));
            if (progress)
                (*progress) << "step " << done << " total " << lt.total.item() << " mlm_acc "
                            << em.masked_acc << "\n";
        }
        if (has_dir && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0)
            save_checkpoint(run_dir / "checkpoint.tden", model, opt, done, cfg);
    }

    result.final_eval = evaluate(cfg, val_data, model, cfg.steps);
    emit(eval_json(cfg.steps, result.final_eval));
    if (has_dir) {
        save_checkpoint(run_dir / "checkpoint.tden", model, opt, cfg.steps, cfg);
        result.checkpoint_path = run_dir / "checkpoint.tden";
    }
    return result;
}

}  // namespace tden
