#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace tden {

// Special vocabulary ids, fixed across the project.
inline constexpr int kClsId = 0;   // sentence begin
inline constexpr int kSepId = 1;   // sentence end
inline constexpr int kMaskId = 2;  // masked-token placeholder
inline constexpr int kImgId = 3;   // reserved visual-stream placeholder
inline constexpr int kNumSpecialIds = 4;

inline bool is_special_id(int id) { return id >= 0 && id < kNumSpecialIds; }

// A sentence as word ids. 1-D positions are implicit (index order) and the
// special-token flag is derivable from the id. A "wrapped" sequence starts
// with [CLS] and normally ends with [SEP]; generation prefixes omit the
// final [SEP].
struct TokenSeq {
    std::vector<int> ids;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
    int operator[](std::size_t i) const { return ids[i]; }

    bool is_special(std::size_t pos) const { return is_special_id(ids[pos]); }

    static TokenSeq wrap(const std::vector<int>& words) {
        TokenSeq t;
        t.ids.reserve(words.size() + 2);
        t.ids.push_back(kClsId);
        t.ids.insert(t.ids.end(), words.begin(), words.end());
        t.ids.push_back(kSepId);
        return t;
    }

    // Inner word count of a wrapped sequence.
    std::size_t n_words() const { return ids.size() >= 2 ? ids.size() - 2 : 0; }

    std::vector<int> words() const {
        std::vector<int> w;
        for (int id : ids)
            if (!is_special_id(id)) w.push_back(id);
        return w;
    }
};

// Normalized region box; all coordinates in [0,1].
struct BoxGeometry {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0, area = 0.0;

    std::array<double, 5> as_array() const { return {x1, y1, x2, y2, area}; }

    void validate() const {
        if (x1 > x2 || y1 > y2)
            throw std::invalid_argument("box corners out of order");
        if (std::abs(area - (x2 - x1) * (y2 - y1)) > 1e-9)
            throw std::invalid_argument("box area inconsistent with corners");
    }
};

// An image as its detected regions: feature vectors, box geometry, and the
// detector's per-region class distribution. `masked[i]` marks regions whose
// feature has been zeroed for the masked-object task; the embedding layer
// substitutes a learned mask vector for those rows.
struct RegionSet {
    std::vector<std::vector<double>> features;     // n x d_region_feat
    std::vector<BoxGeometry> boxes;                // n
    std::vector<std::vector<double>> class_dists;  // n x n_object_classes
    std::vector<bool> masked;                      // n, defaults to all false

    std::size_t n() const { return features.size(); }

    void validate() const {
        if (features.empty()) throw std::invalid_argument("region set is empty");
        if (boxes.size() != features.size() || class_dists.size() != features.size())
            throw std::invalid_argument("region set field lengths disagree");
        if (!masked.empty() && masked.size() != features.size())
            throw std::invalid_argument("region mask flag length disagrees");
        for (const auto& b : boxes) b.validate();
    }

    bool is_masked(std::size_t i) const { return !masked.empty() && masked[i]; }
};

// A minibatch of aligned image-sentence pairs (wrapped token sequences).
struct PairBatch {
    std::vector<TokenSeq> sentences;
    std::vector<RegionSet> images;

    std::size_t size() const { return sentences.size(); }
};

}  // namespace tden
