#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tden/data_types.hpp"
#include "tden/rng.hpp"

namespace tden {

// Word-id layout of the 128-word synthetic vocabulary. Class and attribute
// words map bijectively onto scene ids so captions are decodable.
inline constexpr int kWordThe = 4;
inline constexpr int kWordWhat = 5;
inline constexpr int kWordColor = 6;
inline constexpr int kWordIs = 7;
inline constexpr int kPredicateBase = 8;
inline constexpr int kNumPredicates = 6;
inline constexpr int kAttributeBase = 14;
inline constexpr int kClassWordBase = 38;

inline int word_for_class(int class_id) { return kClassWordBase + class_id; }
inline int class_for_word(int word_id) { return word_id - kClassWordBase; }
inline int word_for_attr(int attr_id) { return kAttributeBase + attr_id; }
inline int attr_for_word(int word_id) { return word_id - kAttributeBase; }
inline int word_for_pred(int pred_id) { return kPredicateBase + pred_id; }

struct DataConfig {
    std::size_t n_object_classes = 24;
    std::size_t n_attributes = 24;
    std::size_t d_region_feat = 32;
    std::size_t max_regions = 12;
    std::size_t max_seq_len = 20;
    double noise_sigma = 0.1;
    double attr_sigma = 0.35;
    double relation_prob = 0.5;
    std::uint64_t seed = 1234;

    void validate() const;
};

struct SceneObject {
    int class_id;
    int attr_id;
    BoxGeometry box;
};

struct SceneRelation {
    std::size_t subject;
    int predicate;
    std::size_t object;
};

struct SceneSpec {
    std::vector<SceneObject> objects;
    std::optional<SceneRelation> relation;
};

// Latent world shared by every record of a corpus: one prototype feature per
// class and one offset per attribute. Region features are
// prototype + attribute offset + Gaussian noise, which keeps the pairing
// between captions and images learnable by construction.
struct SynthWorld {
    std::vector<std::vector<double>> prototypes;    // C x F
    std::vector<std::vector<double>> attr_offsets;  // A x F

    static SynthWorld build(const DataConfig& cfg);
    double min_prototype_distance() const;
    int nearest_prototype(const std::vector<double>& feature) const;
};

struct DatasetRecord {
    RegionSet regions;          // unmasked features, boxes, detector dists
    std::vector<int> caption;   // unwrapped word ids
};

struct Dataset {
    std::vector<DatasetRecord> records;
    std::size_t size() const { return records.size(); }
    PairBatch batch(const std::vector<std::size_t>& indices) const;
};

SceneSpec gen_scene(Rng& rng, const DataConfig& cfg);
std::vector<int> gen_caption(const SceneSpec& scene);
DatasetRecord gen_record(const SynthWorld& world, const DataConfig& cfg, Rng& rng);

// Record i is generated from Rng(derive(cfg.seed, salt + i)), so generation
// is a pure function of (seed, config) and parallelizable per record.
Dataset gen_dataset(const SynthWorld& world, const DataConfig& cfg, std::size_t n,
                    std::uint64_t salt);

// ---------------------------------------------------------------------------
// Dataset file format: little-endian binary, self-describing header
// ("TDEN", version, counts, dims), fixed-stride doubles. Round trips are
// bitwise. Malformed input raises FormatError naming the byte offset.
// ---------------------------------------------------------------------------

class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& msg, std::uint64_t offset);
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

void write_dataset(const std::filesystem::path& path, const Dataset& ds,
                   const DataConfig& cfg);
Dataset read_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Downstream task annotations (sidecar to a dataset file)
// ---------------------------------------------------------------------------

struct TaskItem {
    std::vector<int> question;               // unwrapped word ids
    int answer = -1;                         // attribute id
    std::vector<std::vector<int>> choices;   // candidate captions, unwrapped
    int correct = -1;                        // index of the true caption
};

struct TaskData {
    std::vector<TaskItem> items;
    std::size_t size() const { return items.size(); }
};

// Derives question/answer and multiple-choice annotations from captions;
// distractors swap class and/or attribute words.
TaskData make_task_data(const Dataset& ds, const DataConfig& cfg, std::uint64_t salt);

void write_task_data(const std::filesystem::path& path, const TaskData& td);
TaskData read_task_data(const std::filesystem::path& path);

}  // namespace tden
