#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace p2l {

// Word-level vocabulary with dense ids and the three special tokens the
// pipeline relies on (padding, sentence delimiter, end-of-text).
class Vocabulary {
public:
    Vocabulary() = default;

    Vocabulary(std::vector<std::string> tokens, const std::string& pad, const std::string& delimiter,
               const std::string& eot)
        : tokens_(std::move(tokens)) {
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (index_.count(tokens_[i]))
                throw std::invalid_argument("Vocabulary: duplicate token " + tokens_[i]);
            index_[tokens_[i]] = static_cast<int>(i);
        }
        pad_ = id(pad);
        delimiter_ = id(delimiter);
        eot_ = id(eot);
    }

    std::size_t size() const { return tokens_.size(); }

    int id(const std::string& tok) const {
        auto it = index_.find(tok);
        if (it == index_.end()) throw std::invalid_argument("Vocabulary: unknown token " + tok);
        return it->second;
    }

    bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw std::invalid_argument("Vocabulary: id out of range");
        return tokens_[static_cast<std::size_t>(id)];
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    int pad_id() const { return pad_; }
    int delimiter_id() const { return delimiter_; }
    int eot_id() const { return eot_; }

    std::vector<int> encode(const std::vector<std::string>& toks) const {
        std::vector<int> ids;
        ids.reserve(toks.size());
        for (const auto& t : toks) ids.push_back(id(t));
        return ids;
    }

    std::vector<std::string> decode(const std::vector<int>& ids) const {
        std::vector<std::string> toks;
        toks.reserve(ids.size());
        for (int i : ids) toks.push_back(token(i));
        return toks;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int pad_ = 0, delimiter_ = 0, eot_ = 0;
};

} // namespace p2l
