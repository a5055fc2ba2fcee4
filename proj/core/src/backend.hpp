#pragma once

// Backend interface behind ModelHandle. Not installed.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rsp/access.hpp"

namespace rsp {

struct ModelHandle::Backend {
    virtual ~Backend() = default;

    /// Highest level this backend can serve.
    virtual AccessLevel max_level() const noexcept = 0;

    /// Natural-log raw probabilities of the task candidates, in order;
    /// -infinity marks a candidate with zero probability.
    virtual std::vector<double> candidate_log_probs(const Prefix& prefix, const SelectionTask& task) = 0;

    virtual std::vector<std::vector<double>> candidate_log_probs_batch(std::span<const Prefix> pool,
                                                                       const SelectionTask& task) {
        std::vector<std::vector<double>> out;
        out.reserve(pool.size());
        for (const auto& p : pool) out.push_back(candidate_log_probs(p, task));
        return out;
    }

    virtual std::string sample(const Prefix& prefix, const SelectionTask& task, std::uint64_t seed) = 0;

    virtual const micro::MicroLM* lm() const noexcept { return nullptr; }
    virtual const micro::MicroVLM* vlm() const noexcept { return nullptr; }
};

/// Renormalises candidate log-probabilities into a probability vector.
std::vector<double> normalise_log_probs(std::span<const double> log_probs);

}  // namespace rsp
