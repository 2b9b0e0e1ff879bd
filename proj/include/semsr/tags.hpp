#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "semsr/core/errors.hpp"

namespace semsr {

class TagVocabulary {
public:
    TagVocabulary() = default;
    explicit TagVocabulary(std::vector<std::string> classes) : classes_(std::move(classes)) {
        if (classes_.size() < 2) throw ArgumentError("vocabulary needs at least two classes");
        for (std::size_t i = 0; i < classes_.size(); ++i) {
            if (classes_[i].empty()) throw ArgumentError("vocabulary contains an empty tag");
            if (!index_.emplace(classes_[i], static_cast<int>(i)).second)
                throw ArgumentError("duplicate tag '" + classes_[i] + "' in vocabulary");
        }
    }

    int size() const { return static_cast<int>(classes_.size()); }
    const std::string& name(int i) const { return classes_.at(i); }
    const std::vector<std::string>& classes() const { return classes_; }
    bool contains(const std::string& tag) const { return index_.count(tag) > 0; }

    int index(const std::string& tag) const {
        auto it = index_.find(tag);
        if (it == index_.end()) throw VocabularyError("tag '" + tag + "' is not in the vocabulary");
        return it->second;
    }

    bool operator==(const TagVocabulary& o) const { return classes_ == o.classes_; }

private:
    std::vector<std::string> classes_;
    std::map<std::string, int> index_;
};

// Tags sorted by vocabulary index, with the probability that selected each.
struct TagSet {
    std::vector<std::string> tags;
    std::vector<double> scores;

    bool empty() const { return tags.empty(); }
    std::size_t size() const { return tags.size(); }
    bool contains(const std::string& t) const { return std::find(tags.begin(), tags.end(), t) != tags.end(); }
    bool operator==(const TagSet&) const = default;
};

// Builds a TagSet from arbitrary tag strings (duplicates merged, vocabulary order).
inline TagSet make_tagset(const std::vector<std::string>& tags, const TagVocabulary& vocab) {
    std::set<int> idx;
    for (const auto& t : tags) idx.insert(vocab.index(t));
    TagSet s;
    for (int i : idx) {
        s.tags.push_back(vocab.name(i));
        s.scores.push_back(1.0);
    }
    return s;
}

inline std::vector<bool> tag_mask(const TagSet& s, const TagVocabulary& vocab) {
    std::vector<bool> m(vocab.size(), false);
    for (const auto& t : s.tags) m[vocab.index(t)] = true;
    return m;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline TagSet decode_tags(std::span<const double> logits, const TagVocabulary& vocab, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ArgumentError("decode_tags: threshold must lie in (0, 1)");
    if (static_cast<int>(logits.size()) != vocab.size())
        throw ArgumentError("decode_tags: got " + std::to_string(logits.size()) + " logits for " +
                            std::to_string(vocab.size()) + " classes");
    TagSet s;
    for (int i = 0; i < vocab.size(); ++i) {
        if (!std::isfinite(logits[i])) throw NumericError("decode_tags: non-finite logit");
        const double p = sigmoid(logits[i]);
        if (p >= threshold) {
            s.tags.push_back(vocab.name(i));
            s.scores.push_back(p);
        }
    }
    return s;
}

// Comma-joined hard-prompt text, e.g. "circle, red".
inline std::string prompt_text(const TagSet& s) {
    std::string out;
    for (std::size_t i = 0; i < s.tags.size(); ++i) out += (i ? ", " : "") + s.tags[i];
    return out;
}

inline std::vector<std::string> split_prompt(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        const auto b = cur.find_first_not_of(" \t");
        const auto e = cur.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
        cur.clear();
    };
    for (char c : text) {
        if (c == ',')
            flush();
        else
            cur += c;
    }
    flush();
    return out;
}

inline double jaccard(const TagSet& a, const TagSet& b) {
    std::set<std::string> sa(a.tags.begin(), a.tags.end()), sb(b.tags.begin(), b.tags.end());
    std::size_t inter = 0;
    for (const auto& t : sa) inter += sb.count(t);
    const std::size_t uni = sa.size() + sb.size() - inter;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

}  // namespace semsr
