#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsp/micromodel.hpp"

namespace rsp::micro {

/// Names of the built-in synthetic text styles.
std::vector<std::string> corpus_styles();

/// How selection answers are chosen.
///
/// With `rule_seed == 0` answers are uniform. Otherwise each character c and
/// candidate j get a weight W[c][j] ~ N(0, 1) seeded by `rule_seed`, and a
/// `rule_rate` fraction of answers is the candidate maximising the summed
/// weights over the characters of the line the prompt follows. Models trained
/// on such text become strongly steerable by their input, and models trained
/// with different rule seeds disagree.
struct SelectionRule {
    std::uint64_t rule_seed = 0;
    double rule_rate = 1.0;
};

/// Generates a deterministic synthetic corpus of roughly `bytes` characters.
///
/// Lines are filler sentences in the requested style. A `selection_rate`
/// fraction of lines is followed by `selection_prompt` and one candidate
/// chosen according to `rule`.
TrainCorpus synthetic_corpus(std::string_view style, std::string_view selection_prompt,
                             std::span<const std::string> candidates, std::uint64_t seed, std::size_t bytes,
                             double selection_rate = 0.35, SelectionRule rule = {});

/// Candidate index the rule assigns to `line` (rule_seed must be non-zero).
std::size_t rule_answer(const SelectionRule& rule, std::string_view line, std::size_t num_candidates);

}  // namespace rsp::micro
