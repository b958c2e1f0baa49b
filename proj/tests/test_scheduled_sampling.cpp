#include <doctest.h>

#include <cmath>

#include "tden/data.hpp"
#include "tden/train.hpp"
#include "test_helpers.hpp"

using namespace tden;
using namespace tden::testing;

namespace {

SamplingOptions default_opts(double pw = 0.3, double pr = 0.3) {
    SamplingOptions o;
    o.p_words = pw;
    o.p_regions = pr;
    return o;
}

// Mirrors the rng consumption of a two-pass step to rebuild the same masked
// batch and sampled sequences outside of it.
struct Mirror {
    MaskedBatch mb;
    SampledSequences ss;
};

Mirror mirror_two_pass(const PairBatch& batch, const TdenModel& model, std::uint64_t seed,
                       const SamplingOptions& opts, bool exchange_for_b) {
    Rng rng(seed);
    Mirror m;
    m.mb = make_masked_batch(batch, rng, opts.p_words, opts.p_regions);
    std::vector<Tensor> hs, hi, cross;
    std::vector<TokenSeq> orig;
    for (const auto& item : m.mb.items) {
        EncodedPair p = model.encode_pair(item.words, item.regions);
        hs.push_back(p.h_sent);
        hi.push_back(p.h_img);
        cross.push_back(model.cross_encode(p));
        orig.push_back(item.original_words);
    }
    HeadResult mlm = mlm_from_cross(model, cross, m.mb);
    HeadResult msg = msg_from_states(model, hs, hi, orig);
    PassOutputs po;
    for (std::size_t i = 0; i < m.mb.size(); ++i) {
        std::vector<std::vector<double>> enc, dec;
        for (std::size_t k = 0; k < m.mb.items[i].word_positions.size(); ++k) {
            const std::size_t row = mlm.item_offsets[i] + k;
            std::vector<double> pe(mlm.logits.cols());
            const double* lr = mlm.logits.data() + row * mlm.logits.cols();
            double mx = lr[0];
            for (std::size_t j = 1; j < pe.size(); ++j) mx = std::max(mx, lr[j]);
            double sum = 0;
            for (std::size_t j = 0; j < pe.size(); ++j) {
                pe[j] = std::exp(lr[j] - mx);
                sum += pe[j];
            }
            for (auto& v : pe) v /= sum;
            enc.push_back(pe);

            const std::size_t pos = m.mb.items[i].word_positions[k];
            const std::size_t drow = msg.item_offsets[i] + pos - 1;
            std::vector<double> pd(msg.logits.cols());
            const double* dr = msg.logits.data() + drow * msg.logits.cols();
            mx = dr[0];
            for (std::size_t j = 1; j < pd.size(); ++j) mx = std::max(mx, dr[j]);
            sum = 0;
            for (std::size_t j = 0; j < pd.size(); ++j) {
                pd[j] = std::exp(dr[j] - mx);
                sum += pd[j];
            }
            for (auto& v : pd) v /= sum;
            dec.push_back(pd);
        }
        po.enc_word_dists.push_back(enc);
        po.dec_word_dists.push_back(dec);
    }
    m.ss = sample_replacements(po, m.mb, rng, opts.argmax);
    (void)exchange_for_b;
    return m;
}

}  // namespace

TEST_CASE("one-hot distributions sample deterministically; no masks means identity") {
    ModelConfig cfg = ModelConfig::tiny();
    Rng gen(1);
    PairBatch batch = make_pair_batch(gen, cfg, 1);
    Rng mask_rng(2);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.5, 0.0);
    REQUIRE(mb.items[0].word_positions.size() >= 1);

    PassOutputs po;
    std::vector<std::vector<double>> dists;
    for (std::size_t k = 0; k < mb.items[0].word_positions.size(); ++k) {
        std::vector<double> onehot(cfg.vocab_size, 0.0);
        onehot[50 + k] = 1.0;
        dists.push_back(onehot);
    }
    po.enc_word_dists.push_back(dists);
    po.dec_word_dists.push_back(dists);

    Rng s1(111), s2(999);
    SampledSequences a = sample_replacements(po, mb, s1);
    SampledSequences b = sample_replacements(po, mb, s2);
    CHECK(a.s_e[0].ids == b.s_e[0].ids);
    CHECK(a.s_d[0].ids == b.s_d[0].ids);
    CHECK(a.s_e[0].ids == a.s_d[0].ids);
    for (std::size_t k = 0; k < mb.items[0].word_positions.size(); ++k)
        CHECK(a.s_e[0].ids[mb.items[0].word_positions[k]] == 50 + static_cast<int>(k));

    // No masked positions: both sequences are the original.
    MaskedBatch none = make_masked_batch(batch, mask_rng, 0.0, 0.0);
    PassOutputs empty;
    empty.enc_word_dists.resize(1);
    empty.dec_word_dists.resize(1);
    Rng s3(5);
    SampledSequences c = sample_replacements(empty, none, s3);
    CHECK(c.s_e[0].ids == batch.sentences[0].ids);
    CHECK(c.s_d[0].ids == batch.sentences[0].ids);
}

TEST_CASE("uniform sampling hits every non-mask id at the uniform rate") {
    const std::size_t vocab = 128;
    std::vector<double> uniform(vocab, 1.0 / vocab);
    Rng rng(11);
    std::vector<std::size_t> counts(vocab, 0);
    const std::size_t draws = 100000;
    for (std::size_t i = 0; i < draws; ++i) counts[sample_token(uniform, rng)]++;

    CHECK(counts[kMaskId] == 0);
    // Each non-mask id should appear at 1/128 of the draws within 3 sigma
    // (renormalization over 127 ids shifts the mean well inside that band).
    const double expect = static_cast<double>(draws) / vocab;
    const double sigma = std::sqrt(static_cast<double>(draws) * (1.0 / vocab) *
                                   (1.0 - 1.0 / vocab));
    for (std::size_t id = 0; id < vocab; ++id) {
        if (static_cast<int>(id) == kMaskId) continue;
        CHECK(std::abs(static_cast<double>(counts[id]) - expect) < 3.0 * sigma);
    }
}

TEST_CASE("NaN distributions are rejected") {
    std::vector<double> bad(16, 1.0 / 16);
    bad[3] = std::nan("");
    Rng rng(8);
    CHECK_THROWS_AS(sample_token(bad, rng), std::domain_error);
}

TEST_CASE("second-pass sequences never contain the mask id") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 300);
    Rng gen(9);
    for (int step = 0; step < 30; ++step) {
        PairBatch batch = make_pair_batch(gen, cfg, 2);
        Rng rng(1000 + step);
        SampledSequences ss;
        if (step % 3 == 0)
            step_two_pass_a(batch, model, rng, default_opts(), &ss);
        else if (step % 3 == 1)
            step_two_pass_b(batch, model, rng, default_opts(), &ss);
        else
            step_two_pass_c(batch, model, rng, default_opts(), std::nullopt, &ss);
        for (const auto& seq : ss.s_e)
            for (int id : seq.ids) CHECK(id != kMaskId);
        for (const auto& seq : ss.s_d)
            for (int id : seq.ids) CHECK(id != kMaskId);
    }
}

TEST_CASE("two-pass A decomposes into its named terms") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 301);
    Rng gen(10);
    PairBatch batch = make_pair_batch(gen, cfg, 2);
    const std::uint64_t seed = 12345;
    Rng rng(seed);
    SamplingOptions opts = default_opts();
    LossTerms lt = step_two_pass_a(batch, model, rng, opts);

    Mirror m = mirror_two_pass(batch, model, seed, opts, false);
    LossTerms pass1 = loss_tden(m.mb, model, opts.losses);
    CHECK(lt.value("mlm") == doctest::Approx(pass1.value("mlm")).epsilon(1e-14));
    CHECK(lt.value("moc") == doctest::Approx(pass1.value("moc")).epsilon(1e-14));
    CHECK(lt.value("ism") == doctest::Approx(pass1.value("ism")).epsilon(1e-14));
    CHECK(lt.value("msg") == doctest::Approx(pass1.value("msg")).epsilon(1e-14));

    // Independently composed second-pass terms.
    std::vector<Tensor> h_se, h_sd, visual, cross2;
    std::vector<TokenSeq> orig;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& item = m.mb.items[i];
        visual.push_back(model.encode_objects(item.regions));
        h_se.push_back(model.encode_sentence(m.ss.s_e[i]));
        h_sd.push_back(model.encode_sentence(m.ss.s_d[i]));
        orig.push_back(item.original_words);
    }
    for (std::size_t i = 0; i < batch.size(); ++i)
        cross2.push_back(model.cross_encode(EncodedPair{h_se[i], visual[i]}));
    const double mlm2 = mlm_from_cross(model, cross2, m.mb).loss.item();
    const double moc2 = moc_from_cross(model, cross2, m.mb).item();
    const double msg2 = msg_from_states(model, h_sd, visual, orig).loss.item();
    CHECK(lt.value("mlm2") == doctest::Approx(mlm2).epsilon(1e-12));
    CHECK(lt.value("moc2") == doctest::Approx(moc2).epsilon(1e-12));
    CHECK(lt.value("msg2") == doctest::Approx(msg2).epsilon(1e-12));

    double composed = 0.0;
    for (const char* name : {"mlm", "moc", "ism", "msg", "mlm2", "moc2", "msg2"})
        composed += lt.value(name);
    CHECK(std::abs(lt.total.item() - composed) < 1e-12);
}

TEST_CASE("two-pass B exchanges the second-pass inputs") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 302);
    Rng gen(11);
    PairBatch batch = make_pair_batch(gen, cfg, 2);
    const std::uint64_t seed = 777;
    Rng rng(seed);
    SamplingOptions opts = default_opts();
    LossTerms lt = step_two_pass_b(batch, model, rng, opts);

    Mirror m = mirror_two_pass(batch, model, seed, opts, true);
    std::vector<Tensor> h_se, h_sd, visual, cross2;
    std::vector<TokenSeq> orig;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& item = m.mb.items[i];
        visual.push_back(model.encode_objects(item.regions));
        h_se.push_back(model.encode_sentence(m.ss.s_e[i]));
        h_sd.push_back(model.encode_sentence(m.ss.s_d[i]));
        orig.push_back(item.original_words);
    }
    for (std::size_t i = 0; i < batch.size(); ++i)
        cross2.push_back(model.cross_encode(EncodedPair{h_sd[i], visual[i]}));
    CHECK(lt.value("mlm2") ==
          doctest::Approx(mlm_from_cross(model, cross2, m.mb).loss.item()).epsilon(1e-12));
    CHECK(lt.value("moc2") ==
          doctest::Approx(moc_from_cross(model, cross2, m.mb).item()).epsilon(1e-12));
    CHECK(lt.value("msg2") ==
          doctest::Approx(msg_from_states(model, h_se, visual, orig).loss.item())
              .epsilon(1e-12));
}

TEST_CASE("cross-modal stack invocations: four for A/B, two for C") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 303);
    Rng gen(12);
    const std::size_t b = 3;
    PairBatch batch = make_pair_batch(gen, cfg, b);

    model.counters().reset();
    Rng r1(1);
    step_two_pass_a(batch, model, r1, default_opts());
    CHECK(model.counters().cross_encoder == 2 * b);
    CHECK(model.counters().cross_decoder == 2 * b);
    CHECK(model.counters().cross_modal_total() == 4 * b);

    model.counters().reset();
    Rng r2(2);
    step_two_pass_b(batch, model, r2, default_opts());
    CHECK(model.counters().cross_modal_total() == 4 * b);

    for (int alpha : {0, 1}) {
        model.counters().reset();
        Rng r3(3);
        step_two_pass_c(batch, model, r3, default_opts(), alpha);
        CHECK(model.counters().cross_modal_total() == 2 * b);
        CHECK(model.counters().cross_encoder == b);
        CHECK(model.counters().cross_decoder == b);
    }
}

TEST_CASE("two-pass C switches the first-pass path with alpha") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 304);
    Rng gen(13);
    PairBatch batch = make_pair_batch(gen, cfg, 2);

    Rng r1(21);
    LossTerms a1 = step_two_pass_c(batch, model, r1, default_opts(), 1);
    CHECK(a1.alpha == 1);
    CHECK(a1.has("mlm"));
    CHECK(a1.has("moc"));
    CHECK(a1.has("msg2"));
    CHECK(a1.has("ism"));
    CHECK(!a1.has("msg"));

    Rng r0(22);
    LossTerms a0 = step_two_pass_c(batch, model, r0, default_opts(), 0);
    CHECK(a0.alpha == 0);
    CHECK(a0.has("msg"));
    CHECK(a0.has("mlm2"));
    CHECK(a0.has("moc2"));
    CHECK(!a0.has("mlm"));
}

TEST_CASE("alpha draws average one half") {
    Rng rng(14);
    std::size_t ones = 0;
    const std::size_t n = 10000;
    for (std::size_t i = 0; i < n; ++i) ones += draw_alpha(rng);
    const double mean = static_cast<double>(ones) / static_cast<double>(n);
    CHECK(std::abs(mean - 0.5) < 0.02);
}

TEST_CASE("with zero masking probability the schemes degenerate consistently") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 305);
    Rng gen(15);
    PairBatch batch = make_pair_batch(gen, cfg, 2);
    SamplingOptions opts = default_opts(0.0, 0.0);

    // Clean single-pass terms.
    Rng rn(31);
    MaskedBatch clean = make_masked_batch(batch, rn, 0.0, 0.0);
    std::vector<Tensor> hs, hi;
    std::vector<EncodedPair> pairs;
    std::vector<TokenSeq> orig;
    for (const auto& item : clean.items) {
        EncodedPair p = model.encode_pair(item.words, item.regions);
        hs.push_back(p.h_sent);
        hi.push_back(p.h_img);
        pairs.push_back(p);
        orig.push_back(item.original_words);
    }
    const double ism = ism_from_pairs(model, pairs, opts.losses.ism_margin).item();
    const double msg = msg_from_states(model, hs, hi, orig).loss.item();

    Rng ra(32), rb(33), rc1(34), rc0(35);
    SampledSequences ssa;
    LossTerms la = step_two_pass_a(batch, model, ra, opts, &ssa);
    LossTerms lb = step_two_pass_b(batch, model, rb, opts);
    LossTerms lc1 = step_two_pass_c(batch, model, rc1, opts, 1);
    LossTerms lc0 = step_two_pass_c(batch, model, rc0, opts, 0);

    for (std::size_t i = 0; i < batch.size(); ++i) {
        CHECK(ssa.s_e[i].ids == batch.sentences[i].ids);
        CHECK(ssa.s_d[i].ids == batch.sentences[i].ids);
    }
    // Masked terms vanish; the generation term appears once per pass.
    CHECK(la.value("mlm") == 0.0);
    CHECK(la.value("moc") == 0.0);
    CHECK(std::abs(la.total.item() - (ism + 2.0 * msg)) < 1e-12);
    CHECK(std::abs(lb.total.item() - (ism + 2.0 * msg)) < 1e-12);
    CHECK(la.total.item() == lb.total.item());
    // Two-Pass-C activates one stream per step, so each term appears once.
    CHECK(std::abs(lc1.total.item() - (ism + msg)) < 1e-12);
    CHECK(std::abs(lc0.total.item() - (ism + msg)) < 1e-12);
}

TEST_CASE("no gradient reaches the first pass through sampled ids") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 306);
    Rng gen(16);
    PairBatch batch = make_pair_batch(gen, cfg, 2);
    const std::uint64_t seed = 4242;
    SamplingOptions opts = default_opts();

    // Backward only the second-pass terms of a full two-pass step.
    Rng rng(seed);
    Tape tape;
    std::vector<std::vector<double>> grads_in_step;
    {
        TapeScope scope(tape);
        LossTerms lt = step_two_pass_a(batch, model, rng, opts);
        Tensor pass2 = sum_terms({lt.terms[4].second, lt.terms[5].second, lt.terms[6].second});
        tape.backward(pass2);
    }
    for (Tensor p : model.params().tensors()) {
        grads_in_step.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));
        p.zero_grad();
    }

    // Standalone recomposition of the same second-pass losses from the
    // captured sequences; identical gradients prove the sampled ids cut the
    // graph.
    Mirror m = mirror_two_pass(batch, model, seed, opts, false);
    Tape tape2;
    {
        TapeScope scope(tape2);
        std::vector<Tensor> h_se, h_sd, visual, cross2;
        std::vector<TokenSeq> orig;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto& item = m.mb.items[i];
            visual.push_back(model.encode_objects(item.regions));
            h_se.push_back(model.encode_sentence(m.ss.s_e[i]));
        }
        for (std::size_t i = 0; i < batch.size(); ++i)
            cross2.push_back(model.cross_encode(EncodedPair{h_se[i], visual[i]}));
        Tensor mlm2 = mlm_from_cross(model, cross2, m.mb).loss;
        Tensor moc2 = moc_from_cross(model, cross2, m.mb);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            h_sd.push_back(model.encode_sentence(m.ss.s_d[i]));
            orig.push_back(m.mb.items[i].original_words);
        }
        Tensor msg2 = msg_from_states(model, h_sd, visual, orig).loss;
        tape2.backward(sum_terms({mlm2, moc2, msg2}));
    }
    const auto& tensors = model.params().tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        std::vector<double> standalone =
            tensors[i].has_grad() ? tensors[i].grad() : std::vector<double>(tensors[i].size(), 0.0);
        REQUIRE(standalone.size() == grads_in_step[i].size());
        for (std::size_t j = 0; j < standalone.size(); ++j)
            CHECK(std::abs(standalone[j] - grads_in_step[i][j]) < 1e-12);
        const_cast<Tensor&>(tensors[i]).zero_grad();
    }
}

TEST_CASE("two-pass training decreases the loss on a small corpus") {
    ModelConfig cfg = ModelConfig::tiny();
    RunConfig rc = RunConfig::tiny();
    DataConfig dc = rc.data_config();
    SynthWorld world = SynthWorld::build(dc);
    Dataset corpus = gen_dataset(world, dc, 64, 0);

    TdenModel model(cfg, 307);
    AdamConfig acfg;
    acfg.lr = 3e-3;
    AdamOptimizer opt(model.params().tensors(), model.params().names(), acfg);
    SamplingOptions opts;  // default 0.15 masking
    std::vector<double> totals;
    for (std::size_t step = 0; step < 300; ++step) {
        PairBatch batch = corpus.batch(batch_indices(step, corpus.size(), 8, 99));
        Rng rng(Rng::derive(9001, step));
        Tape tape;
        TapeScope scope(tape);
        LossTerms lt = step_two_pass_a(batch, model, rng, opts);
        totals.push_back(lt.total.item());
        CHECK(std::isfinite(totals.back()));
        tape.backward(lt.total);
        opt.step();
    }
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        head += totals[i];
        tail += totals[totals.size() - 1 - i];
    }
    CHECK(tail < head);
}
