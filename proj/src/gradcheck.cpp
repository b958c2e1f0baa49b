#include "tden/gradcheck.hpp"

#include <chrono>

#include "tden/tasks.hpp"

namespace tden {

namespace {

Tensor uniform_tensor(std::vector<std::size_t> shape, Rng& rng, double lo, double hi,
                      bool rg = false) {
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = lo + (hi - lo) * rng.uniform01();
    return t;
}

TokenSeq random_tokens(Rng& rng, const ModelConfig& cfg, std::size_t n_words) {
    std::vector<int> words(n_words);
    for (auto& w : words)
        w = kNumSpecialIds +
            static_cast<int>(rng.uniform_int(cfg.vocab_size - kNumSpecialIds));
    return TokenSeq::wrap(words);
}

RegionSet random_regions(Rng& rng, const ModelConfig& cfg, std::size_t n) {
    RegionSet rs;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> feat(cfg.d_region_feat);
        for (auto& v : feat) v = rng.normal(0.0, 1.0);
        rs.features.push_back(std::move(feat));
        BoxGeometry b;
        b.x1 = 0.4 * rng.uniform01();
        b.y1 = 0.4 * rng.uniform01();
        b.x2 = b.x1 + 0.1 + 0.4 * rng.uniform01();
        b.y2 = b.y1 + 0.1 + 0.4 * rng.uniform01();
        b.area = (b.x2 - b.x1) * (b.y2 - b.y1);
        rs.boxes.push_back(b);
        std::vector<double> dist(cfg.n_object_classes, 0.0);
        dist[rng.uniform_int(cfg.n_object_classes)] = 1.0;
        rs.class_dists.push_back(std::move(dist));
    }
    return rs;
}

}  // namespace

GradCheckReport run_gradcheck_suite(const ModelConfig& cfg, std::uint64_t seed) {
    const auto start = std::chrono::steady_clock::now();
    GradCheckReport report;
    Rng rng(seed);
    GradCheckOptions op_opts;
    op_opts.seed = Rng::derive(seed, 1);
    op_opts.max_coords_per_tensor = 200;

    auto record = [&report](const std::string& name, double err) {
        report.checks.emplace_back(name, err);
        report.max_error = std::max(report.max_error, err);
    };

    // --- primitive ops ---
    {
        Tensor a = uniform_tensor({3, 4}, rng, -2, 2, true);
        Tensor b = uniform_tensor({4, 5}, rng, -2, 2, true);
        record("op.matmul", grad_check([&]() { return sum_all(matmul(a, b)); }, {a, b}, op_opts));
        record("op.transpose",
               grad_check([&]() { return sum_all(transpose(matmul(a, b))); }, {a, b}, op_opts));
    }
    {
        Tensor x = uniform_tensor({3, 6}, rng, -2, 2, true);
        Tensor y = uniform_tensor({3, 6}, rng, -2, 2, true);
        record("op.add", grad_check([&]() { return sum_all(add(x, y)); }, {x, y}, op_opts));
        record("op.axpb",
               grad_check([&]() { return sum_all(axpb(x, 1.7, -0.3)); }, {x}, op_opts));
        record("op.relu", grad_check([&]() { return sum_all(relu(x)); }, {x}, op_opts));
        record("op.gelu", grad_check([&]() { return sum_all(gelu(x)); }, {x}, op_opts));
        Tensor v = uniform_tensor({6}, rng, -1, 1, true);
        record("op.add_rowvec",
               grad_check([&]() { return sum_all(gelu(add_rowvec(x, v))); }, {x, v}, op_opts));
        record("op.softmax", grad_check(
                                 [&]() {
                                     return cross_entropy(softmax(x), {1, 4, 0});
                                 },
                                 {x}, op_opts));
        record("op.row_l2_normalize",
               grad_check([&]() { return sum_all(row_l2_normalize(x)); }, {x}, op_opts));
        record("op.gather_rows",
               grad_check([&]() { return sum_all(gather_rows(x, {0, 2, 2, 1})); }, {x}, op_opts));
        record("op.concat_rows",
               grad_check([&]() { return sum_all(gelu(concat_rows(x, y))); }, {x, y}, op_opts));
    }
    {
        Tensor x = uniform_tensor({2, 8}, rng, -2, 2, true);
        Tensor g = uniform_tensor({8}, rng, 0.5, 1.5, true);
        Tensor b = uniform_tensor({8}, rng, -0.5, 0.5, true);
        record("op.layer_norm",
               grad_check([&]() { return sum_all(layer_norm(x, g, b)); }, {x, g, b}, op_opts));
    }
    {
        Tensor logits = uniform_tensor({4, 7}, rng, -2, 2, true);
        record("op.cross_entropy",
               grad_check([&]() { return cross_entropy(logits, {0, 3, 6, 2}); }, {logits},
                          op_opts));
        std::vector<double> t(4 * 7);
        for (std::size_t i = 0; i < 4; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < 7; ++j) {
                t[i * 7 + j] = rng.uniform01() + 0.05;
                sum += t[i * 7 + j];
            }
            for (std::size_t j = 0; j < 7; ++j) t[i * 7 + j] /= sum;
        }
        Tensor target = Tensor::from({4, 7}, t);
        record("op.kl_divergence",
               grad_check([&]() { return kl_divergence(logits, target); }, {logits}, op_opts));
        Tensor sim = uniform_tensor({4, 4}, rng, -1, 1, true);
        record("op.triplet_hinge",
               grad_check([&]() { return triplet_hinge_loss(sim, 0.2); }, {sim}, op_opts));
        std::vector<double> soft(28);
        for (auto& v : soft) v = rng.uniform01();
        record("op.sigmoid_bce",
               grad_check([&]() { return sigmoid_bce(logits, soft); }, {logits}, op_opts));
    }

    // --- blocks ---
    GradCheckOptions block_opts;
    block_opts.seed = Rng::derive(seed, 2);
    block_opts.max_coords_per_tensor = 24;
    {
        ParamRegistry reg;
        Rng prng(Rng::derive(seed, 3));
        AttentionParams attn = AttentionParams::create(reg, "attn", cfg, prng, 0.2);
        Tensor q = uniform_tensor({3, cfg.d_model}, rng, -1, 1, true);
        Tensor kv = uniform_tensor({4, cfg.d_model}, rng, -1, 1, true);
        AttnMask mask = AttnMask::full(3, 4);
        auto f = [&]() {
            return cross_entropy(multi_head_attention(q, kv, mask, attn, cfg), {0, 1, 2});
        };
        std::vector<Tensor> params = reg.tensors();
        params.push_back(q);
        params.push_back(kv);
        record("block.attention", grad_check(f, params, block_opts));
    }
    {
        ParamRegistry reg;
        Rng prng(Rng::derive(seed, 4));
        EncoderBlockParams block = EncoderBlockParams::create(reg, "enc", cfg, prng, 0.2);
        Tensor x = uniform_tensor({3, cfg.d_model}, rng, -1, 1, true);
        auto f = [&]() {
            return cross_entropy(encoder_block(x, AttnMask::full(3, 3), block, cfg), {1, 0, 2});
        };
        std::vector<Tensor> params = reg.tensors();
        params.push_back(x);
        record("block.encoder", grad_check(f, params, block_opts));
    }
    {
        ParamRegistry reg;
        Rng prng(Rng::derive(seed, 5));
        DecoderBlockParams block = DecoderBlockParams::create(reg, "dec", cfg, prng, 0.2);
        Tensor w = uniform_tensor({3, cfg.d_model}, rng, -1, 1, true);
        Tensor v = uniform_tensor({2, cfg.d_model}, rng, -1, 1, true);
        auto f = [&]() {
            return cross_entropy(decoder_block(w, v, AttnMask::causal(3), block, cfg),
                                 {2, 1, 0});
        };
        std::vector<Tensor> params = reg.tensors();
        params.push_back(w);
        params.push_back(v);
        record("block.decoder", grad_check(f, params, block_opts));
    }
    {
        ParamRegistry reg;
        Rng prng(Rng::derive(seed, 6));
        WordEmbeddingParams we = WordEmbeddingParams::create(reg, "we", cfg, prng, 0.2);
        TokenSeq tokens = random_tokens(rng, cfg, 4);
        tokens.ids[2] = tokens.ids[1];  // repeated id exercises accumulation
        auto f = [&]() {
            return cross_entropy(embed_words(tokens, we, cfg), {0, 1, 2, 3, 4, 5});
        };
        record("block.embed_words", grad_check(f, reg.tensors(), block_opts));
    }
    {
        ParamRegistry reg;
        Rng prng(Rng::derive(seed, 7));
        RegionEmbeddingParams re = RegionEmbeddingParams::create(reg, "re", cfg, prng, 0.2);
        RegionSet rs = random_regions(rng, cfg, 3);
        rs.masked.assign(3, false);
        rs.masked[1] = true;
        std::fill(rs.features[1].begin(), rs.features[1].end(), 0.0);
        auto f = [&]() {
            return cross_entropy(embed_regions(rs, re, cfg), {0, 1, 2, 3});
        };
        record("block.embed_regions", grad_check(f, reg.tensors(), block_opts));
    }
    {
        ParamRegistry reg;
        Rng prng(Rng::derive(seed, 8));
        AttnPoolParams pool = AttnPoolParams::create(reg, "pool", cfg, prng, 0.2);
        Tensor h = uniform_tensor({5, cfg.d_model}, rng, -1, 1, true);
        auto f = [&]() { return sum_all(row_l2_normalize(attention_pool(h, pool))); };
        std::vector<Tensor> params = reg.tensors();
        params.push_back(h);
        record("block.attention_pool", grad_check(f, params, block_opts));
    }

    // --- model paths and objectives ---
    GradCheckOptions model_opts;
    model_opts.seed = Rng::derive(seed, 9);
    model_opts.max_coords_per_tensor = 5;

    TdenModel model(cfg, Rng::derive(seed, 10));
    Rng data_rng(Rng::derive(seed, 11));
    PairBatch batch;
    for (int i = 0; i < 2; ++i) {
        batch.sentences.push_back(random_tokens(data_rng, cfg, 4));
        batch.images.push_back(random_regions(data_rng, cfg, 3));
    }
    Rng mask_rng(Rng::derive(seed, 12));
    MaskedBatch mb = make_masked_batch(batch, mask_rng, 0.3, 0.3);

    record("path.encoders", grad_check(
                                [&]() {
                                    EncodedPair p = model.encode_pair(batch.sentences[0],
                                                                      batch.images[0]);
                                    Tensor both = concat_rows(p.h_sent, p.h_img);
                                    std::vector<int> t(both.rows(), 2);
                                    return cross_entropy(model.logits_words(both), t);
                                },
                                model.params().tensors(), model_opts));
    record("loss.mlm",
           grad_check([&]() { return loss_mlm(mb, model); }, model.params().tensors(),
                      model_opts));
    record("loss.moc",
           grad_check([&]() { return loss_moc(mb, model); }, model.params().tensors(),
                      model_opts));
    record("loss.ism", grad_check(
                           [&]() {
                               std::vector<EncodedPair> pairs;
                               for (const auto& item : mb.items)
                                   pairs.push_back(model.encode_pair(item.words, item.regions));
                               return loss_ism(pairs, model);
                           },
                           model.params().tensors(), model_opts));
    record("loss.msg",
           grad_check(
               [&]() { return loss_msg(batch.sentences[0], batch.images[0], model); },
               model.params().tensors(), model_opts));
    record("loss.tden_total",
           grad_check([&]() { return loss_tden(mb, model).total; },
                      model.params().tensors(), model_opts));

    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace tden
