#include "rsp/prefix.hpp"

#include <set>

#include "rsp/error.hpp"

namespace rsp {

const char* Prefix::tag() const noexcept {
    if (is_tokens()) return "tokens";
    if (is_words()) return "words";
    return "pixels";
}

std::string prefix_text(const Prefix& prefix, const micro::Vocab& vocab) {
    if (prefix.is_tokens()) {
        for (const int id : prefix.tokens().tokens)
            if (id < 0 || id >= vocab.size()) throw PreconditionError("token id " + std::to_string(id) + " out of range");
        return vocab.decode(prefix.tokens().tokens);
    }
    if (prefix.is_words()) {
        std::string out;
        for (const auto& w : prefix.words().words) {
            if (!out.empty()) out += ' ';
            out += w;
        }
        return out;
    }
    throw CapabilityError("pixel prefixes have no text form");
}

void SelectionTask::validate() const {
    if (candidates.size() < 2) throw PreconditionError("a selection task needs at least two candidates");
    std::set<std::string> seen;
    for (const auto& c : candidates) {
        if (c.empty()) throw PreconditionError("empty candidate");
        if (!seen.insert(c).second) throw PreconditionError("duplicate candidate '" + c + "'");
    }
}

}  // namespace rsp
