#include "tden/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace tden {

void DataConfig::validate() const {
    if (n_object_classes == 0 || n_attributes == 0 || d_region_feat == 0)
        throw std::invalid_argument("degenerate data config");
    if (kClassWordBase + static_cast<int>(n_object_classes) > 128 ||
        kAttributeBase + static_cast<int>(n_attributes) > kClassWordBase)
        throw std::invalid_argument("vocabulary layout cannot hold this many classes/attributes");
    if (max_regions < 2) throw std::invalid_argument("max_regions must be >= 2");
    if (max_seq_len < 9) throw std::invalid_argument("max_seq_len too small for captions");
}

SynthWorld SynthWorld::build(const DataConfig& cfg) {
    cfg.validate();
    // Prototypes must stay separated by well over the noise scale; redraw on
    // the (vanishingly unlikely) failure.
    for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
        SynthWorld w;
        Rng rng(Rng::derive(cfg.seed, 0xbeef + attempt));
        w.prototypes.resize(cfg.n_object_classes);
        for (auto& p : w.prototypes) {
            p.resize(cfg.d_region_feat);
            for (auto& v : p) v = rng.normal(0.0, 1.0);
        }
        w.attr_offsets.resize(cfg.n_attributes);
        for (auto& a : w.attr_offsets) {
            a.resize(cfg.d_region_feat);
            for (auto& v : a) v = rng.normal(0.0, cfg.attr_sigma);
        }
        if (w.min_prototype_distance() > 4.0 * cfg.noise_sigma) return w;
    }
    throw std::runtime_error("failed to build separated class prototypes");
}

double SynthWorld::min_prototype_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < prototypes.size(); ++i)
        for (std::size_t j = i + 1; j < prototypes.size(); ++j) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < prototypes[i].size(); ++k) {
                const double d = prototypes[i][k] - prototypes[j][k];
                d2 += d * d;
            }
            best = std::min(best, std::sqrt(d2));
        }
    return best;
}

int SynthWorld::nearest_prototype(const std::vector<double>& feature) const {
    int best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < prototypes.size(); ++c) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < feature.size(); ++k) {
            const double d = feature[k] - prototypes[c][k];
            d2 += d * d;
        }
        if (d2 < best_d2) {
            best_d2 = d2;
            best = static_cast<int>(c);
        }
    }
    return best;
}

namespace {

BoxGeometry random_box(Rng& rng) {
    BoxGeometry b;
    b.x1 = 0.8 * rng.uniform01();
    b.y1 = 0.8 * rng.uniform01();
    b.x2 = b.x1 + 0.05 + rng.uniform01() * (1.0 - b.x1 - 0.05);
    b.y2 = b.y1 + 0.05 + rng.uniform01() * (1.0 - b.y1 - 0.05);
    b.area = (b.x2 - b.x1) * (b.y2 - b.y1);
    return b;
}

}  // namespace

SceneSpec gen_scene(Rng& rng, const DataConfig& cfg) {
    SceneSpec scene;
    const std::size_t n = 2 + rng.uniform_int(cfg.max_regions - 1);
    // Classes drawn without replacement so "the <class>" questions are
    // unambiguous within a scene.
    std::vector<int> classes(cfg.n_object_classes);
    for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = static_cast<int>(i);
    rng.shuffle(classes);
    for (std::size_t i = 0; i < n; ++i) {
        SceneObject obj;
        obj.class_id = classes[i];
        obj.attr_id = static_cast<int>(rng.uniform_int(cfg.n_attributes));
        obj.box = random_box(rng);
        scene.objects.push_back(obj);
    }
    // Captions describe the most salient object (and relate it to the least
    // salient one), so the described object is identifiable from geometry
    // alone; regions themselves stay an unordered set. Objects are stored
    // by descending area with the smallest last.
    std::sort(scene.objects.begin(), scene.objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.box.area > b.box.area; });
    if (rng.uniform01() < cfg.relation_prob)
        scene.relation = SceneRelation{0, static_cast<int>(rng.uniform_int(kNumPredicates)),
                                       scene.objects.size() - 1};
    return scene;
}

std::vector<int> gen_caption(const SceneSpec& scene) {
    if (scene.objects.empty()) throw std::invalid_argument("scene has no objects");
    std::vector<int> caption;
    auto describe = [&caption](const SceneObject& o) {
        caption.push_back(kWordThe);
        caption.push_back(word_for_attr(o.attr_id));
        caption.push_back(word_for_class(o.class_id));
    };
    if (scene.relation && scene.objects.size() >= 2) {
        const auto& rel = *scene.relation;
        describe(scene.objects[rel.subject]);
        caption.push_back(word_for_pred(rel.predicate));
        describe(scene.objects[rel.object]);
    } else {
        describe(scene.objects[0]);
    }
    return caption;
}

DatasetRecord gen_record(const SynthWorld& world, const DataConfig& cfg, Rng& rng) {
    SceneSpec scene = gen_scene(rng, cfg);
    DatasetRecord rec;
    rec.caption = gen_caption(scene);
    for (const SceneObject& obj : scene.objects) {
        std::vector<double> feat(cfg.d_region_feat);
        for (std::size_t k = 0; k < feat.size(); ++k)
            feat[k] = world.prototypes[obj.class_id][k] + world.attr_offsets[obj.attr_id][k] +
                      rng.normal(0.0, cfg.noise_sigma);
        // Detector soft labels: softmax of negative prototype distance at
        // temperature 0.5, dominated by the true class.
        std::vector<double> logits(cfg.n_object_classes);
        for (std::size_t c = 0; c < cfg.n_object_classes; ++c) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < feat.size(); ++k) {
                const double d = feat[k] - world.prototypes[c][k];
                d2 += d * d;
            }
            logits[c] = -std::sqrt(d2) / 0.5;
        }
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double sum = 0.0;
        std::vector<double> dist(cfg.n_object_classes);
        for (std::size_t c = 0; c < cfg.n_object_classes; ++c) {
            dist[c] = std::exp(logits[c] - mx);
            sum += dist[c];
        }
        for (auto& v : dist) v /= sum;

        rec.regions.features.push_back(std::move(feat));
        rec.regions.boxes.push_back(obj.box);
        rec.regions.class_dists.push_back(std::move(dist));
    }
    return rec;
}

Dataset gen_dataset(const SynthWorld& world, const DataConfig& cfg, std::size_t n,
                    std::uint64_t salt) {
    Dataset ds;
    ds.records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rec_rng(Rng::derive(cfg.seed, salt * 0x10000001ull + i));
        ds.records.push_back(gen_record(world, cfg, rec_rng));
    }
    return ds;
}

PairBatch Dataset::batch(const std::vector<std::size_t>& indices) const {
    PairBatch b;
    for (std::size_t i : indices) {
        b.sentences.push_back(TokenSeq::wrap(records[i].caption));
        b.images.push_back(records[i].regions);
    }
    return b;
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

FormatError::FormatError(const std::string& msg, std::uint64_t offset)
    : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
      offset_(offset) {}

namespace {

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), n); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void i32(std::int32_t v) { bytes(&v, 4); }
    void f64(double v) { bytes(&v, 8); }
    void f64s(const std::vector<double>& v) { bytes(v.data(), v.size() * 8); }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error("cannot open " + path.string() + " for reading");
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), n);
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError("truncated file", offset_ + static_cast<std::uint64_t>(in_.gcount()));
        offset_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    std::int32_t i32() {
        std::int32_t v;
        bytes(&v, 4);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    std::vector<double> f64s(std::size_t n) {
        std::vector<double> v(n);
        bytes(v.data(), n * 8);
        return v;
    }
    std::uint64_t offset() const { return offset_; }

private:
    std::ifstream in_;
    std::uint64_t offset_ = 0;
};

constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint32_t kTaskVersion = 1;

}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& ds, const DataConfig& cfg) {
    Writer w(path);
    w.bytes("TDEN", 4);
    w.u32(kDatasetVersion);
    w.u64(ds.size());
    w.u32(static_cast<std::uint32_t>(cfg.d_region_feat));
    w.u32(static_cast<std::uint32_t>(cfg.n_object_classes));
    for (const DatasetRecord& rec : ds.records) {
        w.u32(static_cast<std::uint32_t>(rec.regions.n()));
        w.u32(static_cast<std::uint32_t>(rec.caption.size()));
        for (int id : rec.caption) w.i32(id);
        for (std::size_t i = 0; i < rec.regions.n(); ++i) {
            w.f64s(rec.regions.features[i]);
            const auto g = rec.regions.boxes[i].as_array();
            w.bytes(g.data(), 5 * 8);
            w.f64s(rec.regions.class_dists[i]);
        }
    }
}

Dataset read_dataset(const std::filesystem::path& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "TDEN", 4) != 0)
        throw FormatError("bad magic, not a dataset file", 0);
    const std::uint32_t version = r.u32();
    if (version != kDatasetVersion)
        throw FormatError("unsupported dataset version " + std::to_string(version), 4);
    const std::uint64_t count = r.u64();
    const std::uint32_t df = r.u32();
    const std::uint32_t nc = r.u32();
    if (df == 0 || df > 1u << 20 || nc == 0 || nc > 1u << 20)
        throw FormatError("implausible header dimensions", 12);
    Dataset ds;
    ds.records.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        DatasetRecord rec;
        const std::uint32_t n_regions = r.u32();
        const std::uint32_t cap_len = r.u32();
        if (n_regions == 0 || n_regions > 1u << 16 || cap_len > 1u << 16)
            throw FormatError("implausible record header", r.offset() - 8);
        rec.caption.resize(cap_len);
        for (auto& id : rec.caption) id = r.i32();
        for (std::uint32_t k = 0; k < n_regions; ++k) {
            rec.regions.features.push_back(r.f64s(df));
            BoxGeometry b;
            b.x1 = r.f64();
            b.y1 = r.f64();
            b.x2 = r.f64();
            b.y2 = r.f64();
            b.area = r.f64();
            rec.regions.boxes.push_back(b);
            rec.regions.class_dists.push_back(r.f64s(nc));
        }
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Task annotations
// ---------------------------------------------------------------------------

TaskData make_task_data(const Dataset& ds, const DataConfig& cfg, std::uint64_t salt) {
    TaskData td;
    td.items.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Rng rng(Rng::derive(cfg.seed, salt * 0x2000003ull + i));
        const std::vector<int>& cap = ds.records[i].caption;
        TaskItem item;
        // Captions open with "the <attr> <class>"; the question names the
        // class and the answer is the attribute, which is only recoverable
        // from the image features.
        const int attr_word = cap.at(1);
        const int class_word = cap.at(2);
        item.question = {kWordWhat, kWordColor, kWordIs, kWordThe, class_word};
        item.answer = attr_for_word(attr_word);

        auto swap_class = [&](std::vector<int> c) {
            int other = class_for_word(class_word);
            other = (other + 1 + static_cast<int>(rng.uniform_int(cfg.n_object_classes - 1))) %
                    static_cast<int>(cfg.n_object_classes);
            c[2] = word_for_class(other);
            return c;
        };
        auto swap_attr = [&](std::vector<int> c) {
            int other = attr_for_word(attr_word);
            other = (other + 1 + static_cast<int>(rng.uniform_int(cfg.n_attributes - 1))) %
                    static_cast<int>(cfg.n_attributes);
            c[1] = word_for_attr(other);
            return c;
        };
        std::vector<std::vector<int>> choices;
        choices.push_back(cap);
        choices.push_back(swap_class(cap));
        choices.push_back(swap_attr(cap));
        choices.push_back(swap_attr(swap_class(cap)));
        std::vector<std::size_t> order{0, 1, 2, 3};
        rng.shuffle(order);
        for (std::size_t k = 0; k < 4; ++k) {
            item.choices.push_back(choices[order[k]]);
            if (order[k] == 0) item.correct = static_cast<int>(k);
        }
        td.items.push_back(std::move(item));
    }
    return td;
}

void write_task_data(const std::filesystem::path& path, const TaskData& td) {
    Writer w(path);
    w.bytes("TDTA", 4);
    w.u32(kTaskVersion);
    w.u64(td.size());
    for (const TaskItem& item : td.items) {
        w.u32(static_cast<std::uint32_t>(item.question.size()));
        for (int id : item.question) w.i32(id);
        w.i32(item.answer);
        w.u32(static_cast<std::uint32_t>(item.choices.size()));
        for (const auto& c : item.choices) {
            w.u32(static_cast<std::uint32_t>(c.size()));
            for (int id : c) w.i32(id);
        }
        w.i32(item.correct);
    }
}

TaskData read_task_data(const std::filesystem::path& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "TDTA", 4) != 0)
        throw FormatError("bad magic, not a task annotation file", 0);
    if (r.u32() != kTaskVersion) throw FormatError("unsupported task file version", 4);
    const std::uint64_t count = r.u64();
    TaskData td;
    td.items.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        TaskItem item;
        const std::uint32_t qlen = r.u32();
        if (qlen > 1u << 16) throw FormatError("implausible question length", r.offset() - 4);
        item.question.resize(qlen);
        for (auto& id : item.question) id = r.i32();
        item.answer = r.i32();
        const std::uint32_t n_choices = r.u32();
        if (n_choices > 64) throw FormatError("implausible choice count", r.offset() - 4);
        for (std::uint32_t k = 0; k < n_choices; ++k) {
            const std::uint32_t clen = r.u32();
            if (clen > 1u << 16) throw FormatError("implausible choice length", r.offset() - 4);
            std::vector<int> c(clen);
            for (auto& id : c) id = r.i32();
            item.choices.push_back(std::move(c));
        }
        item.correct = r.i32();
        td.items.push_back(std::move(item));
    }
    return td;
}

}  // namespace tden
