#pragma once

// Prefix and selection-task value types shared by model access, optimisation
// and testing.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "rsp/micromodel.hpp"

namespace rsp {

using micro::PixelGrid;

/// L token ids of the character vocabulary.
struct TokenSeq {
    std::vector<int> tokens;
    bool operator==(const TokenSeq&) const = default;
};

/// L words from a word list, rendered joined by single spaces.
struct WordSeq {
    std::vector<std::string> words;
    bool operator==(const WordSeq&) const = default;
};

struct Prefix {
    std::variant<TokenSeq, WordSeq, PixelGrid> value;
    std::uint64_t seed = 0;

    bool is_tokens() const noexcept { return std::holds_alternative<TokenSeq>(value); }
    bool is_words() const noexcept { return std::holds_alternative<WordSeq>(value); }
    bool is_pixels() const noexcept { return std::holds_alternative<PixelGrid>(value); }
    bool is_text() const noexcept { return !is_pixels(); }

    const TokenSeq& tokens() const { return std::get<TokenSeq>(value); }
    const WordSeq& words() const { return std::get<WordSeq>(value); }
    const PixelGrid& pixels() const { return std::get<PixelGrid>(value); }

    /// "tokens", "words" or "pixels".
    const char* tag() const noexcept;

    /// Same payload; the seed is provenance and does not take part.
    bool same_payload(const Prefix& other) const { return value == other.value; }
    bool operator==(const Prefix&) const = default;
};

/// Text of a textual prefix; token ids are decoded with `vocab`.
std::string prefix_text(const Prefix& prefix, const micro::Vocab& vocab);

/// Random selection task: a prompt asking for a uniform pick among N
/// distinct candidate outputs.
struct SelectionTask {
    std::string prompt;
    std::vector<std::string> candidates;

    int size() const noexcept { return static_cast<int>(candidates.size()); }

    /// Throws PreconditionError unless N >= 2 and candidates are distinct and non-empty.
    void validate() const;
    bool operator==(const SelectionTask&) const = default;
};

}  // namespace rsp
