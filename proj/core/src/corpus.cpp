#include "rsp/corpus.hpp"

#include <algorithm>
#include <array>

#include "rsp/error.hpp"
#include "rsp/rng.hpp"

namespace rsp::micro {

namespace {

template <std::size_t N>
std::string_view pick(CounterRng& rng, const std::array<std::string_view, N>& words) {
    return words[rng.below(N)];
}

constexpr std::array<std::string_view, 16> kNames = {"tom", "ana", "li", "sam", "maya", "omar", "eva", "raj",
                                                      "kim", "leo", "zoe", "ben", "ivy", "max", "noa", "ray"};
constexpr std::array<std::string_view, 12> kItems = {"apples", "books", "coins", "pens", "cards", "eggs",
                                                      "shells", "cups", "stamps", "rocks", "plums", "keys"};
constexpr std::array<std::string_view, 14> kTopics = {"the sea", "a city", "winter", "a dog", "the moon", "music",
                                                       "a garden", "rain", "old trees", "a train", "the sun",
                                                       "friends", "a river", "night"};
constexpr std::array<std::string_view, 10> kTasks = {"write a short poem about", "describe", "list three facts about",
                                                      "explain why people like", "give a tip about",
                                                      "summarize a story about", "tell me about",
                                                      "name two things about", "draw a picture of",
                                                      "ask a question about"};
constexpr std::array<std::string_view, 12> kGreetings = {"hello", "hi there", "good morning", "hey", "good evening",
                                                          "nice to meet you", "thanks", "welcome back", "see you",
                                                          "how are you", "what is new", "have a nice day"};
constexpr std::array<std::string_view, 12> kReplies = {"i am fine", "that sounds good", "let me think", "sure thing",
                                                        "i like that", "not today", "maybe later", "of course",
                                                        "i do not know", "that is fun", "tell me more", "yes please"};

std::string math_line(CounterRng& rng) {
    const auto name = pick(rng, kNames);
    const auto item = pick(rng, kItems);
    const auto a = 2 + rng.below(40);
    const auto b = 1 + rng.below(30);
    switch (rng.below(3)) {
    case 0:
        return std::string(name) + " has " + std::to_string(a) + " " + std::string(item) + " and gets " +
               std::to_string(b) + " more so " + std::string(name) + " has " + std::to_string(a + b);
    case 1:
        return std::string(name) + " had " + std::to_string(a + b) + " " + std::string(item) + " and gave away " +
               std::to_string(b) + " so " + std::to_string(a) + " are left";
    default:
        return std::to_string(a) + " times " + std::to_string(b % 10) + " is " + std::to_string(a * (b % 10));
    }
}

std::string instruct_line(CounterRng& rng) {
    std::string s(pick(rng, kTasks));
    s += " ";
    s += pick(rng, kTopics);
    s += "\n";
    s += pick(rng, kTopics);
    s += " is ";
    s += rng.below(2) ? "calm and bright" : "full of small things";
    return s;
}

std::string chat_line(CounterRng& rng) {
    std::string s(pick(rng, kGreetings));
    s += " ";
    s += pick(rng, kNames);
    s += "\n";
    s += pick(rng, kReplies);
    if (rng.below(2)) {
        s += " ";
        s += pick(rng, kReplies);
    }
    return s;
}

}  // namespace

std::vector<std::string> corpus_styles() { return {"chat", "math", "instruct"}; }

std::size_t rule_answer(const SelectionRule& rule, std::string_view line, std::size_t num_candidates) {
    if (rule.rule_seed == 0) throw PreconditionError("rule_answer needs a non-zero rule seed");
    if (num_candidates == 0) throw PreconditionError("rule_answer needs at least one candidate");
    // Weights are a pure function of (seed, character, candidate).
    std::vector<double> score(num_candidates, 0.0);
    for (const unsigned char c : line) {
        for (std::size_t j = 0; j < num_candidates; ++j) {
            CounterRng w(derive_seed(rule.rule_seed, "corpus.rule", c), j);
            score[j] += w.normal();
        }
    }
    std::size_t best = 0;
    for (std::size_t j = 1; j < num_candidates; ++j)
        if (score[j] > score[best]) best = j;
    return best;
}

TrainCorpus synthetic_corpus(std::string_view style, std::string_view selection_prompt,
                             std::span<const std::string> candidates, std::uint64_t seed, std::size_t bytes,
                             double selection_rate, SelectionRule rule) {
    if (candidates.empty()) throw PreconditionError("synthetic corpus needs at least one candidate");
    if (!(selection_rate >= 0.0 && selection_rate <= 1.0)) throw PreconditionError("selection rate must lie in [0, 1]");
    if (!(rule.rule_rate >= 0.0 && rule.rule_rate <= 1.0)) throw PreconditionError("rule rate must lie in [0, 1]");
    std::string (*line)(CounterRng&) = nullptr;
    if (style == "chat") {
        line = chat_line;
    } else if (style == "math") {
        line = math_line;
    } else if (style == "instruct") {
        line = instruct_line;
    } else {
        throw PreconditionError("unknown corpus style '" + std::string(style) + "'");
    }
    // Per-character weights, precomputed once.
    const std::size_t N = candidates.size();
    std::vector<double> W;
    if (rule.rule_seed != 0) {
        W.resize(256 * N);
        for (int c = 0; c < 256; ++c)
            for (std::size_t j = 0; j < N; ++j) {
                CounterRng w(derive_seed(rule.rule_seed, "corpus.rule", static_cast<std::uint64_t>(c)), j);
                W[static_cast<std::size_t>(c) * N + j] = w.normal();
            }
    }
    CounterRng rng(derive_seed(seed, "corpus." + std::string(style)));
    std::string text;
    text.reserve(bytes + 256);
    std::vector<double> score(N);
    while (text.size() < bytes) {
        const std::string item = line(rng);
        std::size_t pos = 0;
        // Multi-line items get a chance at a selection after each physical line.
        while (pos <= item.size()) {
            std::size_t end = item.find('\n', pos);
            if (end == std::string::npos) end = item.size();
            const std::string_view phys(item.data() + pos, end - pos);
            text += phys;
            if (rng.uniform() < selection_rate) {
                std::size_t ans = 0;
                if (rule.rule_seed != 0 && rng.uniform() < rule.rule_rate) {
                    std::fill(score.begin(), score.end(), 0.0);
                    for (const unsigned char c : phys)
                        for (std::size_t j = 0; j < N; ++j) score[j] += W[static_cast<std::size_t>(c) * N + j];
                    ans = static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
                } else {
                    ans = rng.below(N);
                }
                text += selection_prompt;
                text += candidates[ans];
            }
            text += "\n";
            pos = end + 1;
        }
    }
    return TrainCorpus{std::move(text), std::string(style), seed};
}

}  // namespace rsp::micro
