#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "genir/errors.hpp"

namespace genir {

using TokenId = std::uint32_t;

enum class TokenKind { special, word, docid };

/// Closed token inventory: [pad, sos] then word tokens then document identifiers.
class Vocabulary {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kSos = 1;
    static constexpr std::size_t kSpecialCount = 2;

    Vocabulary() : Vocabulary(0, 0) {}

    Vocabulary(std::size_t n_words, std::size_t n_docids) : n_words_(n_words), n_docids_(n_docids) {
        symbols_.reserve(size());
        symbols_.emplace_back("<pad>");
        symbols_.emplace_back("<s>");
        char buf[32];
        for (std::size_t i = 0; i < n_words; ++i) {
            std::snprintf(buf, sizeof buf, "w%03zu", i);
            symbols_.emplace_back(buf);
        }
        for (std::size_t i = 0; i < n_docids; ++i) {
            std::snprintf(buf, sizeof buf, "D%04zu", i);
            symbols_.emplace_back(buf);
        }
        for (std::size_t i = 0; i < symbols_.size(); ++i) {
            index_.emplace(symbols_[i], static_cast<TokenId>(i));
        }
    }

    /// d_V
    std::size_t size() const noexcept { return kSpecialCount + n_words_ + n_docids_; }
    std::size_t word_count() const noexcept { return n_words_; }
    std::size_t docid_count() const noexcept { return n_docids_; }

    TokenId word(std::size_t i) const { return checked(i, n_words_, kSpecialCount, "word"); }
    TokenId docid(std::size_t i) const {
        return checked(i, n_docids_, kSpecialCount + n_words_, "docid");
    }
    TokenId first_docid() const noexcept { return static_cast<TokenId>(kSpecialCount + n_words_); }

    bool is_special(TokenId t) const noexcept { return t < kSpecialCount; }
    bool is_word(TokenId t) const noexcept { return t >= kSpecialCount && t < kSpecialCount + n_words_; }
    bool is_docid(TokenId t) const noexcept { return t >= kSpecialCount + n_words_ && t < size(); }

    TokenKind kind(TokenId t) const {
        if (is_special(t)) return TokenKind::special;
        if (is_word(t)) return TokenKind::word;
        if (is_docid(t)) return TokenKind::docid;
        throw ValidationError("token id " + std::to_string(t) + " outside vocabulary");
    }

    std::size_t word_index(TokenId t) const {
        if (!is_word(t)) throw ValidationError("not a word token: " + std::to_string(t));
        return t - kSpecialCount;
    }
    std::size_t docid_index(TokenId t) const {
        if (!is_docid(t)) throw ValidationError("not a document identifier: " + std::to_string(t));
        return t - first_docid();
    }

    const std::string& symbol(TokenId t) const {
        if (t >= size()) throw ValidationError("token id " + std::to_string(t) + " outside vocabulary");
        return symbols_[t];
    }

    std::optional<TokenId> lookup(std::string_view s) const {
        auto it = index_.find(std::string(s));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    TokenId require(std::string_view s) const {
        auto t = lookup(s);
        if (!t) throw ValidationError("unknown token symbol '" + std::string(s) + "'");
        return *t;
    }

    bool operator==(const Vocabulary& o) const noexcept {
        return n_words_ == o.n_words_ && n_docids_ == o.n_docids_;
    }

private:
    static TokenId checked(std::size_t i, std::size_t n, std::size_t base, const char* what) {
        if (i >= n) throw ValidationError(std::string(what) + " index out of range: " + std::to_string(i));
        return static_cast<TokenId>(base + i);
    }

    std::size_t n_words_;
    std::size_t n_docids_;
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace genir
