#include "tden/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "tden/train.hpp"

namespace tden {

Tensor pool_joint(const TdenModel& model, const EncodedPair& pair,
                  const AttnPoolParams& enc_pool, const AttnPoolParams& dec_pool) {
    Tensor cross = model.cross_encode(pair);
    Tensor dec = model.cross_decode(pair.h_sent, pair.h_img);
    return add(attention_pool(cross, enc_pool), attention_pool(dec, dec_pool));
}

JointPoolHead::JointPoolHead(const ModelConfig& cfg, std::size_t n_outputs,
                             std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0xface));
    enc_pool_ = AttnPoolParams::create(reg_, "head.enc_pool", cfg, rng, 0.02);
    dec_pool_ = AttnPoolParams::create(reg_, "head.dec_pool", cfg, rng, 0.02);
    out_ = LinearParams::create(reg_, "head.out", cfg.d_model, n_outputs, rng, 0.02);
}

Tensor JointPoolHead::pooled(const TdenModel& model, const TokenSeq& tokens,
                             const RegionSet& regions) const {
    return pool_joint(model, model.encode_pair(tokens, regions), enc_pool_, dec_pool_);
}

Tensor JointPoolHead::scores(const TdenModel& model, const TokenSeq& tokens,
                             const RegionSet& regions) const {
    return linear(pooled(model, tokens, regions), out_);
}

namespace {

std::vector<Tensor> joined_params(TdenModel& model, ParamRegistry& head) {
    std::vector<Tensor> all = model.params().tensors();
    for (const Tensor& t : head.tensors()) all.push_back(t);
    return all;
}

std::vector<std::string> joined_names(TdenModel& model, ParamRegistry& head) {
    std::vector<std::string> all = model.params().names();
    for (const auto& n : head.names()) all.push_back(n);
    return all;
}

void validate_bundle(const TaskBundle& b, const char* what) {
    if (!b.data || !b.tasks) throw std::invalid_argument(std::string(what) + ": empty bundle");
    if (b.data->size() != b.tasks->size())
        throw std::invalid_argument(std::string(what) +
                                    ": dataset and annotations are misaligned");
}

}  // namespace

ClassificationResult finetune_classification(TdenModel& model, const TaskBundle& train,
                                             const TaskBundle& eval,
                                             const FinetuneConfig& cfg) {
    validate_bundle(train, "classification train");
    validate_bundle(eval, "classification eval");
    std::size_t n_answers = 0;
    for (const auto& item : train.tasks->items)
        n_answers = std::max(n_answers, static_cast<std::size_t>(item.answer) + 1);
    for (const auto& item : eval.tasks->items)
        n_answers = std::max(n_answers, static_cast<std::size_t>(item.answer) + 1);

    JointPoolHead head(model.config(), n_answers, cfg.seed);
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamOptimizer opt(joined_params(model, head.params()), joined_names(model, head.params()),
                      acfg);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto idx = batch_indices(step, train.data->size(), cfg.batch_size, cfg.seed);
        Tape tape;
        TapeScope scope(tape);
        std::vector<Tensor> losses;
        for (std::size_t i : idx) {
            const TaskItem& item = train.tasks->items[i];
            Tensor s = head.scores(model, TokenSeq::wrap(item.question),
                                   train.data->records[i].regions);
            std::vector<double> soft(n_answers, 0.0);
            soft[item.answer] = 1.0;
            losses.push_back(sigmoid_bce(s, soft));
        }
        Tensor loss = axpb(sum_terms(losses), 1.0 / static_cast<double>(losses.size()), 0.0);
        tape.backward(loss);
        clip_global_norm(model.params().tensors(), cfg.clip_norm);
        clip_global_norm(head.params().tensors(), cfg.clip_norm);
        opt.step();
    }

    std::size_t hits = 0;
    for (std::size_t i = 0; i < eval.data->size(); ++i) {
        const TaskItem& item = eval.tasks->items[i];
        Tensor s = head.scores(model, TokenSeq::wrap(item.question),
                               eval.data->records[i].regions);
        std::size_t best = 0;
        for (std::size_t j = 1; j < s.size(); ++j)
            if (s.data()[j] > s.data()[best]) best = j;
        hits += static_cast<int>(best) == item.answer;
    }
    return ClassificationResult{static_cast<double>(hits) /
                                static_cast<double>(eval.data->size())};
}

RetrievalResult recall_from_similarity(const std::vector<std::vector<double>>& sim) {
    const std::size_t n = sim.size();
    if (n < 10)
        throw std::invalid_argument("retrieval pool needs at least 10 pairs, got " +
                                    std::to_string(n));
    RetrievalResult r;
    for (std::size_t i = 0; i < n; ++i) {
        if (sim[i].size() != n) throw std::invalid_argument("similarity matrix is not square");
        const double pos = sim[i][i];
        std::size_t rank = 1;  // images strictly better than the true one
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && sim[i][j] > pos) ++rank;
        r.r1 += rank <= 1;
        r.r5 += rank <= 5;
        r.r10 += rank <= 10;
    }
    r.r1 /= static_cast<double>(n);
    r.r5 /= static_cast<double>(n);
    r.r10 /= static_cast<double>(n);
    return r;
}

RetrievalResult retrieval_recall(const TdenModel& model, const Dataset& pool) {
    if (pool.size() < 10)
        throw std::invalid_argument("retrieval pool needs at least 10 pairs, got " +
                                    std::to_string(pool.size()));
    const std::size_t n = pool.size();
    std::vector<std::vector<double>> sent(n), img(n);
    for (std::size_t i = 0; i < n; ++i) {
        EncodedPair pair =
            model.encode_pair(TokenSeq::wrap(pool.records[i].caption), pool.records[i].regions);
        IsmPair ip = ism_pair(model, pair);
        Tensor un = row_l2_normalize(ip.pooled_sentence);
        Tensor vn = row_l2_normalize(ip.pooled_image);
        sent[i].assign(un.data(), un.data() + un.size());
        img[i].assign(vn.data(), vn.data() + vn.size());
    }
    std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            sim[i][j] =
                std::inner_product(sent[i].begin(), sent[i].end(), img[j].begin(), 0.0);
    return recall_from_similarity(sim);
}

RetrievalResult finetune_retrieval(TdenModel& model, const Dataset& train,
                                   const Dataset& eval_pool, const FinetuneConfig& cfg) {
    if (eval_pool.size() < 10)
        throw std::invalid_argument("retrieval pool needs at least 10 pairs, got " +
                                    std::to_string(eval_pool.size()));
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamOptimizer opt(model.params().tensors(), model.params().names(), acfg);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto idx = batch_indices(step, train.size(), cfg.batch_size, cfg.seed);
        PairBatch batch = train.batch(idx);
        Tape tape;
        TapeScope scope(tape);
        std::vector<EncodedPair> pairs;
        for (std::size_t i = 0; i < batch.size(); ++i)
            pairs.push_back(model.encode_pair(batch.sentences[i], batch.images[i]));
        Tensor loss = ism_from_pairs(model, pairs, cfg.ism_margin);
        tape.backward(loss);
        clip_global_norm(model.params().tensors(), cfg.clip_norm);
        opt.step();
    }
    return retrieval_recall(model, eval_pool);
}

MultichoiceResult finetune_multichoice(TdenModel& model, const TaskBundle& train,
                                       const TaskBundle& eval, const FinetuneConfig& cfg) {
    validate_bundle(train, "multichoice train");
    validate_bundle(eval, "multichoice eval");
    JointPoolHead head(model.config(), 1, cfg.seed);
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamOptimizer opt(joined_params(model, head.params()), joined_names(model, head.params()),
                      acfg);

    auto choice_scores = [&](const TaskItem& item, const RegionSet& regions) {
        Tensor col;
        for (std::size_t k = 0; k < item.choices.size(); ++k) {
            Tensor s = head.scores(model, TokenSeq::wrap(item.choices[k]), regions);
            col = k == 0 ? s : concat_rows(col, s);
        }
        return transpose(col);  // [1 x n_choices]
    };

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto idx = batch_indices(step, train.data->size(), cfg.batch_size, cfg.seed);
        Tape tape;
        TapeScope scope(tape);
        std::vector<Tensor> losses;
        for (std::size_t i : idx) {
            const TaskItem& item = train.tasks->items[i];
            Tensor scores = choice_scores(item, train.data->records[i].regions);
            losses.push_back(cross_entropy(scores, {item.correct}));
        }
        Tensor loss = axpb(sum_terms(losses), 1.0 / static_cast<double>(losses.size()), 0.0);
        tape.backward(loss);
        clip_global_norm(model.params().tensors(), cfg.clip_norm);
        clip_global_norm(head.params().tensors(), cfg.clip_norm);
        opt.step();
    }

    std::size_t hits = 0;
    for (std::size_t i = 0; i < eval.data->size(); ++i) {
        const TaskItem& item = eval.tasks->items[i];
        Tensor scores = choice_scores(item, eval.data->records[i].regions);
        std::size_t best = 0;
        for (std::size_t j = 1; j < scores.size(); ++j)
            if (scores.data()[j] > scores.data()[best]) best = j;
        hits += static_cast<int>(best) == item.correct;
    }
    return MultichoiceResult{static_cast<double>(hits) /
                             static_cast<double>(eval.data->size())};
}

void finetune_captioning(TdenModel& model, const Dataset& train, const FinetuneConfig& cfg) {
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamOptimizer opt(model.params().tensors(), model.params().names(), acfg);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto idx = batch_indices(step, train.size(), cfg.batch_size, cfg.seed);
        PairBatch batch = train.batch(idx);
        Tape tape;
        TapeScope scope(tape);
        std::vector<Tensor> hs, hi;
        std::vector<TokenSeq> orig;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            EncodedPair p = model.encode_pair(batch.sentences[i], batch.images[i]);
            hs.push_back(p.h_sent);
            hi.push_back(p.h_img);
            orig.push_back(batch.sentences[i]);
        }
        Tensor loss = msg_from_states(model, hs, hi, orig).loss;
        tape.backward(loss);
        clip_global_norm(model.params().tensors(), cfg.clip_norm);
        opt.step();
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

std::vector<double> next_token_log_probs(const TdenModel& model, const Tensor& visual_states,
                                         const std::vector<int>& prefix_words) {
    TokenSeq prefix;
    prefix.ids.push_back(kClsId);
    prefix.ids.insert(prefix.ids.end(), prefix_words.begin(), prefix_words.end());
    Tensor h = model.encode_sentence(prefix);
    Tensor dec = model.cross_decode(h, visual_states);
    Tensor logits = model.logits_words_dec(gather_rows(dec, {dec.rows() - 1}));
    const std::size_t v = logits.cols();
    std::vector<double> lp(v);
    double mx = logits.data()[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, logits.data()[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(logits.data()[j] - mx);
    const double lse = std::log(sum) + mx;
    for (std::size_t j = 0; j < v; ++j) lp[j] = logits.data()[j] - lse;
    return lp;
}

namespace {

bool generatable(int id) { return id != kClsId && id != kMaskId && id != kImgId; }

struct Hypothesis {
    std::vector<int> words;
    double log_prob = 0.0;
    bool finished = false;
    std::size_t emitted = 0;  // tokens emitted, [SEP] included
};

double final_score(const Hypothesis& h, double length_norm) {
    const double len = static_cast<double>(std::max<std::size_t>(h.emitted, 1));
    return h.log_prob / std::pow(len, length_norm);
}

}  // namespace

std::vector<int> generate_caption(const TdenModel& model, const RegionSet& regions,
                                  const GenOptions& opts) {
    if (opts.beam_width == 0) throw std::invalid_argument("beam width must be positive");
    const std::size_t max_words = model.config().max_seq_len - 2;
    Tensor visual = model.encode_objects(regions);

    std::vector<Hypothesis> beams{Hypothesis{}};
    std::vector<Hypothesis> done;
    for (std::size_t t = 0; t < max_words && !beams.empty(); ++t) {
        std::vector<Hypothesis> candidates;
        for (const Hypothesis& h : beams) {
            std::vector<double> lp = next_token_log_probs(model, visual, h.words);
            for (std::size_t id = 0; id < lp.size(); ++id) {
                if (!generatable(static_cast<int>(id))) continue;
                Hypothesis next = h;
                next.log_prob += lp[id];
                next.emitted += 1;
                if (static_cast<int>(id) == kSepId) {
                    next.finished = true;
                } else {
                    next.words.push_back(static_cast<int>(id));
                }
                candidates.push_back(std::move(next));
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Hypothesis& a, const Hypothesis& b) {
                             return a.log_prob > b.log_prob;
                         });
        // Keep the top beam_width candidates; finished ones retire to the
        // completed set, the rest are pruned.
        beams.clear();
        std::size_t kept = 0;
        for (Hypothesis& c : candidates) {
            if (kept == opts.beam_width) break;
            ++kept;
            if (c.finished)
                done.push_back(std::move(c));
            else
                beams.push_back(std::move(c));
        }
    }
    // Length-limited leftovers compete without a closing [SEP].
    for (Hypothesis& h : beams) done.push_back(std::move(h));
    if (done.empty()) return {};
    const Hypothesis* best = &done[0];
    for (const Hypothesis& h : done)
        if (final_score(h, opts.length_norm) > final_score(*best, opts.length_norm)) best = &h;
    return best->words;
}

double sequence_log_prob(const TdenModel& model, const RegionSet& regions,
                         const std::vector<int>& words, bool include_sep) {
    Tensor visual = model.encode_objects(regions);
    double total = 0.0;
    std::vector<int> prefix;
    for (int w : words) {
        total += next_token_log_probs(model, visual, prefix)[w];
        prefix.push_back(w);
    }
    if (include_sep) total += next_token_log_probs(model, visual, prefix)[kSepId];
    return total;
}

double normalized_sequence_score(const TdenModel& model, const RegionSet& regions,
                                 const std::vector<int>& words, double length_norm,
                                 bool include_sep) {
    const double lp = sequence_log_prob(model, regions, words, include_sep);
    const double len =
        static_cast<double>(std::max<std::size_t>(words.size() + (include_sep ? 1 : 0), 1));
    return lp / std::pow(len, length_norm);
}

// ---------------------------------------------------------------------------
// Caption metrics
// ---------------------------------------------------------------------------

CaptionEvalResult eval_caption(const std::vector<std::vector<int>>& predictions,
                               const std::vector<std::vector<int>>& references) {
    if (predictions.size() != references.size())
        throw std::invalid_argument("predictions and references are misaligned");
    if (predictions.empty()) return {};
    CaptionEvalResult r;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& p = predictions[i];
        const auto& ref = references[i];
        r.exact_match += p == ref;
        if (p.empty() && ref.empty()) {
            r.token_f1 += 1.0;
            continue;
        }
        std::map<int, std::size_t> want;
        for (int w : ref) want[w]++;
        std::size_t overlap = 0;
        for (int w : p) {
            auto it = want.find(w);
            if (it != want.end() && it->second > 0) {
                --it->second;
                ++overlap;
            }
        }
        const double denom = static_cast<double>(p.size() + ref.size());
        r.token_f1 += denom > 0 ? 2.0 * static_cast<double>(overlap) / denom : 0.0;
    }
    r.exact_match /= static_cast<double>(predictions.size());
    r.token_f1 /= static_cast<double>(predictions.size());
    return r;
}

CaptionEvalResult caption_metrics(const TdenModel& model, const Dataset& eval,
                                  const GenOptions& opts) {
    std::vector<std::vector<int>> preds, refs;
    for (const DatasetRecord& rec : eval.records) {
        preds.push_back(generate_caption(model, rec.regions, opts));
        refs.push_back(rec.caption);
    }
    return eval_caption(preds, refs);
}

}  // namespace tden
