#include <doctest.h>

#include <cmath>

#include "tden/train.hpp"
#include "test_helpers.hpp"

using namespace tden;
using namespace tden::testing;

namespace {

// Minimal optimization loop for the overfit tests.
template <typename LossFn>
double overfit(TdenModel& model, LossFn make_loss, std::size_t steps, double lr) {
    AdamConfig acfg;
    acfg.lr = lr;
    AdamOptimizer opt(model.params().tensors(), model.params().names(), acfg);
    double last = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = make_loss();
        last = loss.item();
        tape.backward(loss);
        opt.step();
    }
    return last;
}

}  // namespace

TEST_CASE("mask_words honors probability overrides") {
    Rng rng(1);
    TokenSeq t = TokenSeq::wrap({10, 11, 12, 13});

    auto [m0, pos0, tgt0] = mask_words(t, rng, 0.0);
    CHECK(m0.ids == t.ids);
    CHECK(pos0.empty());
    CHECK(tgt0.empty());

    auto [m1, pos1, tgt1] = mask_words(t, rng, 1.0);
    CHECK(pos1.size() == 4);
    for (std::size_t i = 1; i <= 4; ++i) CHECK(m1.ids[i] == kMaskId);
    CHECK(m1.ids.front() == kClsId);
    CHECK(m1.ids.back() == kSepId);
    CHECK(tgt1 == std::vector<int>{10, 11, 12, 13});
}

TEST_CASE("masking rate matches the nominal probability") {
    // Words: 18-token sentences keep the force-one-mask bias negligible.
    Rng rng(2);
    std::size_t masked = 0, total = 0;
    std::vector<int> words(18, 20);
    while (total < 100000) {
        auto [m, pos, tgt] = mask_words(TokenSeq::wrap(words), rng, 0.15);
        masked += pos.size();
        total += words.size();
    }
    const double word_rate = static_cast<double>(masked) / static_cast<double>(total);
    CHECK(std::abs(word_rate - 0.15) < 0.01);

    // Regions: plain Bernoulli, no forcing.
    ModelConfig cfg = ModelConfig::tiny();
    Rng gen_rng(3);
    RegionSet rs = make_regions(gen_rng, cfg, 4);
    masked = total = 0;
    while (total < 100000) {
        auto [m, pos, tgt] = mask_regions(rs, rng, 0.15);
        masked += pos.size();
        total += rs.n();
    }
    const double region_rate = static_cast<double>(masked) / static_cast<double>(total);
    CHECK(std::abs(region_rate - 0.15) < 0.01);
}

TEST_CASE("special tokens are never masked and every sentence keeps one mask") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<int> words(1 + rng.uniform_int(8), 30);
        auto [m, pos, tgt] = mask_words(TokenSeq::wrap(words), rng, 0.15);
        CHECK(m.ids.front() == kClsId);
        CHECK(m.ids.back() == kSepId);
        CHECK(!pos.empty());
        for (std::size_t p : pos) CHECK(p >= 1);
        for (std::size_t p : pos) CHECK(p <= words.size());
    }
}

TEST_CASE("mask_regions zeroes features, keeps geometry, stores detector targets") {
    ModelConfig cfg = ModelConfig::tiny();
    Rng gen_rng(5);
    RegionSet rs = make_regions(gen_rng, cfg, 4);
    Rng rng(6);
    auto [masked, pos, targets] = mask_regions(rs, rng, 1.0);
    REQUIRE(pos.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        for (double v : masked.features[i]) CHECK(v == 0.0);
        CHECK(masked.boxes[i].x1 == rs.boxes[i].x1);
        CHECK(masked.boxes[i].area == rs.boxes[i].area);
        CHECK(targets[i] == rs.class_dists[i]);
        CHECK(masked.is_masked(i));
    }
}

TEST_CASE("masking is reproducible from the seed") {
    ModelConfig cfg = ModelConfig::tiny();
    Rng gen_rng(7);
    PairBatch batch = make_pair_batch(gen_rng, cfg, 3);
    Rng a(99), b(99);
    MaskedBatch ma = make_masked_batch(batch, a, 0.15, 0.15);
    MaskedBatch mb = make_masked_batch(batch, b, 0.15, 0.15);
    REQUIRE(ma.size() == mb.size());
    for (std::size_t i = 0; i < ma.size(); ++i) {
        CHECK(ma.items[i].words.ids == mb.items[i].words.ids);
        CHECK(ma.items[i].word_positions == mb.items[i].word_positions);
        CHECK(ma.items[i].region_positions == mb.items[i].region_positions);
        CHECK(ma.items[i].regions.features == mb.items[i].regions.features);
    }
}

TEST_CASE("untrained masked-word loss sits at ln(vocab)") {
    ModelConfig cfg = ModelConfig::tiny();  // vocab 128
    TdenModel model(cfg, 200);
    Rng rng(8);
    PairBatch batch = make_pair_batch(rng, cfg, 2);
    Rng mask_rng(9);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.3, 0.3);
    CHECK(std::abs(loss_mlm(mb, model).item() - std::log(128.0)) < 0.05);
}

TEST_CASE("masked-word loss ignores unmasked targets and decoder parameters") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 201);
    Rng rng(10);
    PairBatch batch = make_pair_batch(rng, cfg, 2);
    Rng mask_rng(11);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.3, 0.3);
    const double base = loss_mlm(mb, model).item();

    // Changing an original id at an unmasked position leaves the loss alone.
    MaskedBatch altered = mb;
    for (auto& item : altered.items) {
        for (std::size_t p = 1; p + 1 < item.original_words.size(); ++p) {
            bool is_masked = false;
            for (std::size_t q : item.word_positions) is_masked |= q == p;
            if (!is_masked) {
                item.original_words.ids[p] = 99;
                break;
            }
        }
    }
    CHECK(loss_mlm(altered, model).item() == base);

    testing::zero_group(model, "cross_dec");
    CHECK(loss_mlm(mb, model).item() == base);
}

TEST_CASE("masked-word loss requires a masked position") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 202);
    Rng rng(12);
    PairBatch batch = make_pair_batch(rng, cfg, 2);
    Rng mask_rng(13);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.0, 0.5);
    CHECK_THROWS_AS(loss_mlm(mb, model), std::invalid_argument);
}

TEST_CASE("masked-word loss overfits a single pair") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 203);
    Rng rng(14);
    PairBatch batch = make_pair_batch(rng, cfg, 1);
    Rng mask_rng(15);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.4, 0.4);
    double final_loss =
        overfit(model, [&]() { return loss_mlm(mb, model); }, 200, 0.01);
    CHECK(final_loss < 0.1);
}

TEST_CASE("masked-object loss analytic values") {
    ModelConfig cfg = ModelConfig::tiny();  // 6 object classes
    TdenModel model(cfg, 204);
    Rng rng(16);
    PairBatch batch = make_pair_batch(rng, cfg, 2);
    Rng mask_rng(17);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.3, 0.5);

    // One-hot targets against a zeroed (uniform) classifier: exactly ln C.
    TdenModel uniform(cfg, 204);
    testing::zero_group(uniform, "obj_cls");
    CHECK(loss_moc(mb, uniform).item() ==
          doctest::Approx(std::log(static_cast<double>(cfg.n_object_classes))).epsilon(1e-9));

    CHECK(loss_moc(mb, model).item() >= 0.0);
}

TEST_CASE("masked-object loss is zero when predictions equal targets") {
    // Route the check through the op with model-produced logits: targets set
    // to the model's own softmax give zero divergence.
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 205);
    Rng rng(18);
    Tensor states = Tensor::randn({3, cfg.d_model}, rng, 1.0);
    Tensor logits = model.logits_objects(states);
    Tensor target = softmax(logits);
    CHECK(std::abs(kl_divergence(logits, target).item()) < 1e-9);
}

TEST_CASE("masked-object loss overfits a single pair") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 206);
    Rng rng(19);
    PairBatch batch = make_pair_batch(rng, cfg, 1, 4, 4);
    Rng mask_rng(20);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.4, 0.6);
    double final_loss =
        overfit(model, [&]() { return loss_moc(mb, model); }, 200, 0.01);
    CHECK(final_loss < 0.05);
}

TEST_CASE("image-sentence matching follows the double-loop oracle") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 207);
    Rng rng(21);
    PairBatch batch = make_pair_batch(rng, cfg, 5);
    std::vector<EncodedPair> pairs;
    for (std::size_t i = 0; i < batch.size(); ++i)
        pairs.push_back(model.encode_pair(batch.sentences[i], batch.images[i]));

    const double margin = 0.2;
    Tensor loss = loss_ism(pairs, model, margin);

    // Oracle: pooled vectors -> unit vectors -> all-pairs hinge, long double.
    const std::size_t b = pairs.size();
    std::vector<std::vector<long double>> us(b), vs(b);
    for (std::size_t i = 0; i < b; ++i) {
        Tensor ps = model.pool_sentence(pairs[i].h_sent);
        Tensor pi = model.pool_image(pairs[i].h_img);
        long double ns = 1e-12L, ni = 1e-12L;
        for (std::size_t j = 0; j < ps.size(); ++j) ns += (long double)ps.data()[j] * ps.data()[j];
        for (std::size_t j = 0; j < pi.size(); ++j) ni += (long double)pi.data()[j] * pi.data()[j];
        for (std::size_t j = 0; j < ps.size(); ++j)
            us[i].push_back(ps.data()[j] / sqrtl(ns));
        for (std::size_t j = 0; j < pi.size(); ++j)
            vs[i].push_back(pi.data()[j] / sqrtl(ni));
    }
    auto sim = [&](std::size_t i, std::size_t j) {
        long double s = 0.0L;
        for (std::size_t k = 0; k < us[i].size(); ++k) s += us[i][k] * vs[j][k];
        return s;
    };
    long double expect = 0.0L;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            if (i == j) continue;
            const long double t = margin - sim(i, i) + sim(i, j);
            if (t > 0.0L) expect += t;
        }
    expect /= static_cast<long double>(b * (b - 1));
    CHECK(std::abs(loss.item() - static_cast<double>(expect)) < 1e-10);
}

TEST_CASE("identical images collapse the ranking loss to the margin") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 208);
    Rng rng(22);
    RegionSet shared = make_regions(rng, cfg, 3);
    std::vector<EncodedPair> pairs;
    for (int i = 0; i < 3; ++i)
        pairs.push_back(model.encode_pair(make_tokens(rng, cfg, 4), shared));
    CHECK(loss_ism(pairs, model, 0.2).item() == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("image-sentence matching needs two pairs") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 209);
    Rng rng(23);
    std::vector<EncodedPair> one;
    one.push_back(model.encode_pair(make_tokens(rng, cfg, 3), make_regions(rng, cfg, 2)));
    CHECK_THROWS_AS(loss_ism(one, model, 0.2), std::invalid_argument);
}

TEST_CASE("sentence generation loss: chance level, target count, overfit") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 210);
    Rng rng(24);
    TokenSeq t = make_tokens(rng, cfg, 4);
    RegionSet r = make_regions(rng, cfg, 3);
    CHECK(std::abs(loss_msg(t, r, model).item() - std::log(128.0)) < 0.05);

    CHECK(detail::msg_target_count(TokenSeq::wrap({42})) == 2);

    TdenModel m2(cfg, 211);
    double final_loss =
        overfit(m2, [&]() { return loss_msg(t, r, m2); }, 200, 0.01);
    CHECK(final_loss < 0.1);
}

TEST_CASE("generation loss is invariant to cross-encoder parameters") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 212);
    Rng rng(25);
    TokenSeq t = make_tokens(rng, cfg, 4);
    RegionSet r = make_regions(rng, cfg, 3);
    const double base = loss_msg(t, r, model).item();
    testing::zero_group(model, "cross_enc");
    CHECK(loss_msg(t, r, model).item() == base);
}

TEST_CASE("joint objective equals the sum of its parts bitwise") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 213);
    Rng rng(26);
    PairBatch batch = make_pair_batch(rng, cfg, 3);
    Rng mask_rng(27);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.3, 0.3);

    LossTerms lt = loss_tden(mb, model);
    const double mlm = loss_mlm(mb, model).item();
    const double moc = loss_moc(mb, model).item();
    std::vector<EncodedPair> pairs;
    for (const auto& item : mb.items)
        pairs.push_back(model.encode_pair(item.words, item.regions));
    const double ism = loss_ism(pairs, model).item();
    std::vector<Tensor> hs, hi;
    std::vector<TokenSeq> orig;
    for (std::size_t i = 0; i < mb.size(); ++i) {
        hs.push_back(pairs[i].h_sent);
        hi.push_back(pairs[i].h_img);
        orig.push_back(mb.items[i].original_words);
    }
    const double msg = msg_from_states(model, hs, hi, orig).loss.item();

    CHECK(lt.value("mlm") == mlm);
    CHECK(lt.value("moc") == moc);
    CHECK(lt.value("ism") == ism);
    CHECK(lt.value("msg") == msg);
    CHECK(lt.total.item() == ((mlm + moc) + ism) + msg);
}

TEST_CASE("joint objective reaches all four parameter groups") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 214);
    Rng rng(28);
    PairBatch batch = make_pair_batch(rng, cfg, 2);
    Rng mask_rng(29);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.3, 0.3);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(loss_tden(mb, model).total);
    }
    for (const std::string& prefix : {"obj_enc", "sent_enc", "cross_enc", "cross_dec",
                                      "word_cls", "obj_cls", "ism_pool"}) {
        double n = 0.0;
        for (Tensor p : model.group(prefix))
            if (p.has_grad())
                for (double g : p.grad()) n += g * g;
        INFO(prefix);
        CHECK(n > 0.0);
    }
}

TEST_CASE("joint objective passes the sampled gradient check") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 215);
    Rng rng(30);
    PairBatch batch = make_pair_batch(rng, cfg, 2);
    Rng mask_rng(31);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.3, 0.3);
    auto f = [&]() { return loss_tden(mb, model).total; };
    GradCheckOptions opts;
    opts.max_coords_per_tensor = 4;
    opts.seed = 77;
    CHECK(grad_check(f, model.params().tensors(), opts) < 1e-4);
}

TEST_CASE("ism placement flag moves the loss onto the cross encoder") {
    ModelConfig cfg = ModelConfig::tiny();
    TdenModel model(cfg, 216);
    Rng rng(32);
    PairBatch batch = make_pair_batch(rng, cfg, 3);
    Rng mask_rng(33);
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.3, 0.3);

    LossOptions opts;
    opts.ism_placement = IsmPlacement::cross;
    const double cross_val = loss_tden(mb, model, opts).value("ism");

    // Cross-placed matching now depends on cross-encoder parameters...
    TdenModel zeroed(cfg, 216);
    testing::zero_group(zeroed, "cross_enc");
    const double cross_val_zeroed = loss_tden(mb, zeroed, opts).value("ism");
    CHECK(cross_val != cross_val_zeroed);

    // ...while encoder-placed matching never does.
    const double enc_val = loss_tden(mb, model).value("ism");
    const double enc_val_zeroed = loss_tden(mb, zeroed).value("ism");
    CHECK(enc_val == enc_val_zeroed);
}
