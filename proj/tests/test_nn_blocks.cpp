#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "tden/nn.hpp"

using namespace tden;

namespace {

ModelConfig small_cfg() {
    ModelConfig c = ModelConfig::tiny();
    c.validate();
    return c;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    return Tensor::randn(std::move(shape), rng, scale);
}

// Scalar-loop attention reference computed directly from the head parameters.
std::vector<double> attention_oracle(const Tensor& q_in, const Tensor& kv_in,
                                     const AttnMask& mask, const AttentionParams& p,
                                     const ModelConfig& cfg) {
    const std::size_t lq = q_in.rows(), lk = kv_in.rows(), d = cfg.d_model,
                      dh = cfg.head_dim();
    std::vector<double> out(lq * d, 0.0);
    for (const auto& h : p.heads) {
        std::vector<double> q(lq * dh, 0.0), k(lk * dh, 0.0), v(lk * dh, 0.0);
        for (std::size_t i = 0; i < lq; ++i)
            for (std::size_t j = 0; j < dh; ++j) {
                double s = h.bq.data()[j];
                for (std::size_t t = 0; t < d; ++t) s += q_in.at(i, t) * h.wq.at(t, j);
                q[i * dh + j] = s;
            }
        for (std::size_t i = 0; i < lk; ++i)
            for (std::size_t j = 0; j < dh; ++j) {
                double sk = h.bk.data()[j], sv = h.bv.data()[j];
                for (std::size_t t = 0; t < d; ++t) {
                    sk += kv_in.at(i, t) * h.wk.at(t, j);
                    sv += kv_in.at(i, t) * h.wv.at(t, j);
                }
                k[i * dh + j] = sk;
                v[i * dh + j] = sv;
            }
        for (std::size_t i = 0; i < lq; ++i) {
            std::vector<double> logits(lk);
            for (std::size_t m = 0; m < lk; ++m) {
                double s = 0.0;
                for (std::size_t j = 0; j < dh; ++j) s += q[i * dh + j] * k[m * dh + j];
                logits[m] = s / std::sqrt(static_cast<double>(dh));
                if (!mask.at(i, m)) logits[m] += -1e9;
            }
            double mx = logits[0];
            for (double x : logits) mx = std::max(mx, x);
            double sum = 0.0;
            for (auto& x : logits) {
                x = std::exp(x - mx);
                sum += x;
            }
            for (auto& x : logits) x /= sum;
            std::vector<double> ctx(dh, 0.0);
            for (std::size_t m = 0; m < lk; ++m)
                for (std::size_t j = 0; j < dh; ++j) ctx[j] += logits[m] * v[m * dh + j];
            for (std::size_t t = 0; t < d; ++t) {
                double s = 0.0;
                for (std::size_t j = 0; j < dh; ++j) s += ctx[j] * h.wo.at(j, t);
                out[i * d + t] += s;
            }
        }
    }
    for (std::size_t i = 0; i < lq; ++i)
        for (std::size_t t = 0; t < d; ++t) out[i * d + t] += p.bo.data()[t];
    return out;
}

}  // namespace

TEST_CASE("attention with a single key returns its value projection") {
    ModelConfig cfg = small_cfg();
    Rng rng(2);
    ParamRegistry reg;
    AttentionParams p = AttentionParams::create(reg, "attn", cfg, rng, 0.3);
    Tensor q = random_tensor({3, cfg.d_model}, rng);
    Tensor kv = random_tensor({1, cfg.d_model}, rng);
    Tensor out = multi_head_attention(q, kv, AttnMask::full(3, 1), p, cfg);
    auto expect = attention_oracle(q, kv, AttnMask::full(3, 1), p, cfg);
    // One key: softmax weight is exactly 1, so every query row carries the
    // same value projection.
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    for (std::size_t t = 0; t < cfg.d_model; ++t)
        CHECK(out.at(0, t) == doctest::Approx(out.at(2, t)).epsilon(1e-12));
}

TEST_CASE("identical keys spread attention uniformly") {
    ModelConfig cfg = small_cfg();
    Rng rng(3);
    ParamRegistry reg;
    AttentionParams p = AttentionParams::create(reg, "attn", cfg, rng, 0.3);
    Tensor q = random_tensor({2, cfg.d_model}, rng);
    Tensor one = random_tensor({1, cfg.d_model}, rng);
    std::vector<double> rep;
    for (int i = 0; i < 4; ++i)
        rep.insert(rep.end(), one.values().begin(), one.values().end());
    Tensor kv = Tensor::from({4, cfg.d_model}, rep);
    Tensor out4 = multi_head_attention(q, kv, AttnMask::full(2, 4), p, cfg);
    Tensor out1 = multi_head_attention(q, one, AttnMask::full(2, 1), p, cfg);
    for (std::size_t i = 0; i < out4.size(); ++i)
        CHECK(out4.data()[i] == doctest::Approx(out1.data()[i]).epsilon(1e-12));
}

TEST_CASE("attention matches the per-head scalar-loop oracle") {
    ModelConfig cfg = small_cfg();
    Rng rng(4);
    ParamRegistry reg;
    AttentionParams p = AttentionParams::create(reg, "attn", cfg, rng, 0.4);
    Tensor x = random_tensor({4, cfg.d_model}, rng);
    AttnMask mask = AttnMask::causal(4);
    Tensor out = multi_head_attention(x, x, mask, p, cfg);
    auto expect = attention_oracle(x, x, mask, p, cfg);
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(std::abs(out.data()[i] - expect[i]) < 1e-10);
}

TEST_CASE("fully masked query rows are rejected") {
    ModelConfig cfg = small_cfg();
    Rng rng(5);
    ParamRegistry reg;
    AttentionParams p = AttentionParams::create(reg, "attn", cfg, rng, 0.3);
    Tensor x = random_tensor({2, cfg.d_model}, rng);
    AttnMask mask = AttnMask::full(2, 2);
    mask.allowed[2] = mask.allowed[3] = 0;  // row 1 sees nothing
    CHECK_THROWS_AS(multi_head_attention(x, x, mask, p, cfg), std::invalid_argument);
}

TEST_CASE("encoder block reduces to the identity with zeroed output projections") {
    ModelConfig cfg = small_cfg();
    Rng rng(6);
    ParamRegistry reg;
    EncoderBlockParams p = EncoderBlockParams::create(reg, "b", cfg, rng, 0.2);
    for (auto& h : p.attn.heads)
        std::fill(h.wo.values().begin(), h.wo.values().end(), 0.0);
    std::fill(p.ffn.out.w.values().begin(), p.ffn.out.w.values().end(), 0.0);
    Tensor x = random_tensor({5, cfg.d_model}, rng);
    Tensor y = encoder_block(x, AttnMask::full(5, 5), p, cfg);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("encoder block preserves shape across lengths") {
    ModelConfig cfg = small_cfg();
    Rng rng(7);
    ParamRegistry reg;
    EncoderBlockParams p = EncoderBlockParams::create(reg, "b", cfg, rng, 0.2);
    for (std::size_t len : {1ul, 5ul, 40ul}) {
        Tensor x = random_tensor({len, cfg.d_model}, rng);
        Tensor y = encoder_block(x, AttnMask::full(len, len), p, cfg);
        CHECK(y.rows() == len);
        CHECK(y.cols() == cfg.d_model);
    }
}

TEST_CASE("encoder block passes the gradient check") {
    ModelConfig cfg = small_cfg();
    Rng rng(8);
    ParamRegistry reg;
    EncoderBlockParams p = EncoderBlockParams::create(reg, "b", cfg, rng, 0.2);
    Tensor x = random_tensor({3, cfg.d_model}, rng);
    x.set_requires_grad(true);
    auto f = [&]() {
        Tensor y = encoder_block(x, AttnMask::full(3, 3), p, cfg);
        return cross_entropy(y, {1, 0, 2});
    };
    std::vector<Tensor> params = reg.tensors();
    params.push_back(x);
    GradCheckOptions opts;
    opts.max_coords_per_tensor = 40;
    opts.seed = 17;
    CHECK(grad_check(f, params, opts) < 1e-5);
}

TEST_CASE("decoder block is causal bitwise and sensitive to visual tokens") {
    ModelConfig cfg = small_cfg();
    Rng rng(9);
    ParamRegistry reg;
    DecoderBlockParams p = DecoderBlockParams::create(reg, "d", cfg, rng, 0.2);
    Tensor words = random_tensor({5, cfg.d_model}, rng);
    Tensor visual = random_tensor({3, cfg.d_model}, rng);
    std::vector<double> visual_before = visual.values();
    AttnMask causal = AttnMask::causal(5);
    Tensor base = decoder_block(words, visual, causal, p, cfg);

    // Perturbing position j > i must not change any output at positions <= i.
    Tensor perturbed = Tensor::from(words.shape(), words.values());
    for (std::size_t t = 0; t < cfg.d_model; ++t) perturbed.at(4, t) += 0.7;
    perturbed.at(3, 0) -= 1.3;
    Tensor out2 = decoder_block(perturbed, visual, causal, p, cfg);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t t = 0; t < cfg.d_model; ++t)
            CHECK(out2.at(i, t) == base.at(i, t));

    // Visual input is read-only.
    CHECK(visual.values() == visual_before);

    // And it matters: some output moves when a visual token moves.
    Tensor v2 = Tensor::from(visual.shape(), visual.values());
    v2.at(1, 2) += 0.5;
    Tensor out3 = decoder_block(words, v2, causal, p, cfg);
    double max_delta = 0.0;
    for (std::size_t i = 0; i < out3.size(); ++i)
        max_delta = std::max(max_delta, std::abs(out3.data()[i] - base.data()[i]));
    CHECK(max_delta > 0.0);
}

TEST_CASE("decoder block passes the gradient check") {
    ModelConfig cfg = small_cfg();
    Rng rng(10);
    ParamRegistry reg;
    DecoderBlockParams p = DecoderBlockParams::create(reg, "d", cfg, rng, 0.2);
    Tensor words = random_tensor({3, cfg.d_model}, rng);
    Tensor visual = random_tensor({2, cfg.d_model}, rng);
    words.set_requires_grad(true);
    visual.set_requires_grad(true);
    auto f = [&]() {
        Tensor y = decoder_block(words, visual, AttnMask::causal(3), p, cfg);
        return cross_entropy(y, {0, 1, 2});
    };
    std::vector<Tensor> params = reg.tensors();
    params.push_back(words);
    params.push_back(visual);
    GradCheckOptions opts;
    opts.max_coords_per_tensor = 30;
    opts.seed = 23;
    CHECK(grad_check(f, params, opts) < 1e-5);
}

TEST_CASE("embed_words injects positions and validates ids") {
    ModelConfig cfg = small_cfg();
    Rng rng(11);
    ParamRegistry reg;
    WordEmbeddingParams p = WordEmbeddingParams::create(reg, "emb", cfg, rng, 0.5);

    TokenSeq t = TokenSeq::wrap({9, 8, 7, 9});
    Tensor e = embed_words(t, p, cfg);
    CHECK(e.rows() == t.n_words() + 2);
    // Same word id at wrapped positions 1 and 4 embeds differently.
    bool differs = false;
    for (std::size_t c = 0; c < cfg.d_model; ++c) differs |= e.at(1, c) != e.at(4, c);
    CHECK(differs);

    TokenSeq bad = TokenSeq::wrap({static_cast<int>(cfg.vocab_size)});
    CHECK_THROWS_AS(embed_words(bad, p, cfg), std::out_of_range);
}

TEST_CASE("embed_words gradient accumulates over repeated ids") {
    ModelConfig cfg = small_cfg();
    Rng rng(12);
    ParamRegistry reg;
    WordEmbeddingParams p = WordEmbeddingParams::create(reg, "emb", cfg, rng, 0.5);
    TokenSeq t = TokenSeq::wrap({6, 6, 6});
    auto f = [&]() {
        Tensor e = embed_words(t, p, cfg);
        return cross_entropy(e, {1, 2, 3, 0, 1});
    };
    GradCheckOptions opts;
    opts.max_coords_per_tensor = 60;
    opts.seed = 31;
    CHECK(grad_check(f, {p.word, p.pos}, opts) < 1e-5);
}

TEST_CASE("embed_regions: [IMG] is the mean projection, rows follow regions") {
    ModelConfig cfg = small_cfg();
    Rng rng(13);
    ParamRegistry reg;
    RegionEmbeddingParams p = RegionEmbeddingParams::create(reg, "emb", cfg, rng, 0.5);

    RegionSet rs;
    std::vector<double> feat(cfg.d_region_feat);
    for (auto& v : feat) v = rng.normal(0.0, 1.0);
    // Zero-size boxes make the geometry term vanish exactly.
    rs.features = {feat, feat};
    rs.boxes = {BoxGeometry{}, BoxGeometry{}};
    rs.class_dists = {{1.0, 0, 0, 0, 0, 0}, {1.0, 0, 0, 0, 0, 0}};
    Tensor e = embed_regions(rs, p, cfg);
    CHECK(e.rows() == 3);
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
        CHECK(e.at(0, c) == doctest::Approx(e.at(1, c)).epsilon(1e-12));
        CHECK(e.at(1, c) == e.at(2, c));
    }
}

TEST_CASE("embed_regions permutation moves rows with their regions") {
    ModelConfig cfg = small_cfg();
    Rng rng(14);
    ParamRegistry reg;
    RegionEmbeddingParams p = RegionEmbeddingParams::create(reg, "emb", cfg, rng, 0.5);

    RegionSet rs;
    for (int i = 0; i < 3; ++i) {
        std::vector<double> feat(cfg.d_region_feat);
        for (auto& v : feat) v = rng.normal(0.0, 1.0);
        rs.features.push_back(feat);
        BoxGeometry b{0.1 * (i + 1), 0.1, 0.5, 0.6, 0.0};
        b.area = (b.x2 - b.x1) * (b.y2 - b.y1);
        rs.boxes.push_back(b);
        rs.class_dists.push_back({1.0, 0, 0, 0, 0, 0});
    }
    Tensor base = embed_regions(rs, p, cfg);

    RegionSet perm;
    const std::size_t order[3] = {2, 0, 1};
    for (std::size_t i : order) {
        perm.features.push_back(rs.features[i]);
        perm.boxes.push_back(rs.boxes[i]);
        perm.class_dists.push_back(rs.class_dists[i]);
    }
    Tensor out = embed_regions(perm, p, cfg);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t c = 0; c < cfg.d_model; ++c)
            CHECK(out.at(k + 1, c) == base.at(order[k] + 1, c));
    for (std::size_t c = 0; c < cfg.d_model; ++c)
        CHECK(std::abs(out.at(0, c) - base.at(0, c)) < 1e-12);
}

TEST_CASE("embed_regions rejects an empty region set") {
    ModelConfig cfg = small_cfg();
    Rng rng(15);
    ParamRegistry reg;
    RegionEmbeddingParams p = RegionEmbeddingParams::create(reg, "emb", cfg, rng, 0.5);
    CHECK_THROWS_AS(embed_regions(RegionSet{}, p, cfg), std::invalid_argument);
}

TEST_CASE("attention pooling produces a single row and checks gradients") {
    ModelConfig cfg = small_cfg();
    Rng rng(16);
    ParamRegistry reg;
    AttnPoolParams p = AttnPoolParams::create(reg, "pool", cfg, rng, 0.3);
    Tensor h = random_tensor({6, cfg.d_model}, rng);
    Tensor pooled = attention_pool(h, p);
    CHECK(pooled.rows() == 1);
    CHECK(pooled.cols() == cfg.d_model);

    h.set_requires_grad(true);
    auto f = [&]() { return sum_all(row_l2_normalize(attention_pool(h, p))); };
    std::vector<Tensor> params = reg.tensors();
    params.push_back(h);
    GradCheckOptions opts;
    opts.seed = 41;
    CHECK(grad_check(f, params, opts) < 1e-5);
}
