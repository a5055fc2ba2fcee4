#pragma once

// Model handles presenting a local micromodel, a remote endpoint or a test
// stub at exactly one access level.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rsp/micromodel.hpp"
#include "rsp/prefix.hpp"

namespace rsp {

/// Ordered from most to least capable.
enum class AccessLevel { Gradient = 3, Logits = 2, GrayBox = 1, BlackBox = 0 };

const char* to_string(AccessLevel level) noexcept;
/// Accepts "gradient", "logits", "gray", "graybox", "black", "blackbox".
AccessLevel parse_access_level(const std::string& text);

inline bool at_least(AccessLevel have, AccessLevel need) noexcept {
    return static_cast<int>(have) >= static_cast<int>(need);
}

/// Served model reachable over HTTP.
struct RemoteEndpoint {
    enum class Mode { ChatText, Logprob };

    std::string base_url;        ///< scheme://host[:port]
    std::string path = "/v1/completions";
    std::string model;           ///< sent as the request's "model" field when non-empty
    std::string auth_env;        ///< name of the env var holding a bearer token; empty for none
    Mode mode = Mode::ChatText;
    double timeout_s = 30.0;
    int max_retries = 3;         ///< total attempts per query
    double backoff_s = 0.5;      ///< first retry delay; doubles each retry
    int max_in_flight = 4;
    double rate_per_s = 0.0;     ///< token-bucket refill rate; 0 disables the limit
    int burst = 4;
    std::string alphabet;        ///< decodes TokenSeq prefixes; empty means the default vocabulary
};

/// Options for local sampling.
struct LocalOptions {
    /// 1 samples the next-token distribution; 0 answers deterministically
    /// with the argmax candidate.
    double temperature = 1.0;
};

/// User-supplied backend, mainly for tests and adapters. `raw` returns
/// non-negative raw probabilities of the candidates; `sample`, when set,
/// returns generated text, otherwise text is sampled from the normalised
/// raw probabilities.
struct StubBackend {
    std::function<std::vector<double>(const Prefix&, const SelectionTask&)> raw;
    std::function<std::string(const Prefix&, const SelectionTask&, std::uint64_t seed)> sample;
};

/// Copies share the backend and the query budget.
class ModelHandle {
public:
    struct Backend;

    ModelHandle(std::string id, AccessLevel level, std::shared_ptr<Backend> backend);

    const std::string& id() const noexcept { return id_; }
    AccessLevel level() const noexcept { return level_; }

    /// Caps the number of remaining queries; nullopt removes the cap.
    void set_query_budget(std::optional<std::int64_t> budget);
    std::optional<std::int64_t> remaining_budget() const;
    std::int64_t queries_made() const noexcept { return meter_->queries.load(); }

    /// Local model behind the handle, or nullptr for remote and stub backends.
    const micro::MicroLM* local_lm() const noexcept;
    const micro::MicroVLM* local_vlm() const noexcept;

    /// Throws CapabilityError unless the handle grants `need`.
    void require(AccessLevel need, const char* operation) const;
    /// Consumes `n` queries of budget or throws BudgetError.
    void charge(std::int64_t n = 1) const;

    Backend& backend() const noexcept { return *backend_; }

private:
    std::string id_;
    AccessLevel level_;
    std::shared_ptr<Backend> backend_;
    struct Meter {
        std::atomic<std::int64_t> queries{0};
        std::atomic<std::int64_t> budget{-1};  ///< negative means unlimited
    };
    std::shared_ptr<Meter> meter_;
};

ModelHandle open_local(std::string id, micro::MicroLM model, AccessLevel level, LocalOptions options = {});
ModelHandle open_local(std::string id, micro::MicroVLM model, AccessLevel level, LocalOptions options = {});
/// Level must be GrayBox (Logprob mode only) or BlackBox.
ModelHandle open_remote(std::string id, const RemoteEndpoint& endpoint, AccessLevel level);
/// Stub levels are capped at Logits; a stub without `raw` is BlackBox only.
ModelHandle open_stub(std::string id, StubBackend stub, AccessLevel level);

/// Candidate probabilities renormalised over the task's candidates, in
/// candidate order. Requires GrayBox.
std::vector<double> candidate_distribution(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task);

/// candidate_distribution for every pool member. Local text models reuse the
/// computation shared with pool[0]. Charges one query per member.
std::vector<std::vector<double>> candidate_distributions(const ModelHandle& handle, std::span<const Prefix> pool,
                                                         const SelectionTask& task);

/// Index of the largest candidate probability, lowest index on ties.
int argmax_candidate(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task);
int argmax_index(std::span<const double> values) noexcept;

/// One generated response. Local models sample the next-token distribution
/// at temperature 1 (or answer the argmax candidate at temperature 0).
std::string sample_output(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task,
                          std::uint64_t seed);

/// Maps a generated response to a candidate index: trim, lowercase, first
/// character. Returns -1 for a miss.
int match_response(std::string_view response, const SelectionTask& task);

/// Gradient of log P(t | prefix) (candidate-normalised) with respect to the
/// one-hot encoding of a TokenSeq prefix. Requires Gradient and a local LM.
micro::Matrix grad_onehot(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task, int target);

/// Same for a PixelGrid prefix on a local VLM, on the 0..255 scale.
std::vector<double> grad_pixels(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task,
                                int target);

}  // namespace rsp
