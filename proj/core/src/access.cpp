#include "rsp/access.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "backend.hpp"
#include "rsp/error.hpp"
#include "rsp/rng.hpp"

namespace rsp {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<int> candidate_ids(const micro::Vocab& vocab, const SelectionTask& task) {
    std::vector<int> ids;
    ids.reserve(task.candidates.size());
    for (const auto& c : task.candidates) {
        if (c.size() != 1 || !vocab.contains(c[0]))
            throw PreconditionError("candidate '" + c + "' is not a single vocabulary token");
        ids.push_back(vocab.index_of(c[0]));
    }
    return ids;
}

// Prefix tokens followed by prompt tokens.
std::vector<int> text_input(const micro::Vocab& vocab, const Prefix& prefix, const SelectionTask& task) {
    std::vector<int> ids;
    if (prefix.is_tokens()) {
        ids = prefix.tokens().tokens;
        for (const int id : ids)
            if (id < 0 || id >= vocab.size()) throw PreconditionError("token id " + std::to_string(id) + " out of range");
    } else {
        ids = vocab.encode(prefix_text(prefix, vocab));
    }
    const auto prompt = vocab.encode(task.prompt);
    ids.insert(ids.end(), prompt.begin(), prompt.end());
    return ids;
}

double logsumexp(std::span<const double> v) {
    double m = kNegInf;
    for (const double x : v) m = std::max(m, x);
    if (m == kNegInf) return kNegInf;
    double s = 0.0;
    for (const double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

std::vector<double> pick_log_probs(std::span<const double> logits, std::span<const int> ids) {
    const double lse = logsumexp(logits);
    std::vector<double> out;
    out.reserve(ids.size());
    for (const int id : ids) out.push_back(logits[static_cast<std::size_t>(id)] - lse);
    return out;
}

class LocalBackend final : public ModelHandle::Backend {
public:
    LocalBackend(micro::MicroLM lm, LocalOptions opts) : lm_(std::move(lm)), opts_(opts) {}
    LocalBackend(micro::MicroVLM vlm, LocalOptions opts) : lm_(vlm.base()), vlm_(std::move(vlm)), opts_(opts) {}

    AccessLevel max_level() const noexcept override { return AccessLevel::Gradient; }
    const micro::MicroLM* lm() const noexcept override { return &lm_; }
    const micro::MicroVLM* vlm() const noexcept override { return vlm_ ? &*vlm_ : nullptr; }

    std::vector<double> logits(const Prefix& prefix, const SelectionTask& task) const {
        if (prefix.is_pixels()) {
            if (!vlm_) throw CapabilityError("pixel prefix given to a text-only model");
            return micro::forward_logits(*vlm_, prefix.pixels(), lm_.vocab().encode(task.prompt));
        }
        return micro::forward_logits(lm_, text_input(lm_.vocab(), prefix, task));
    }

    std::vector<double> candidate_log_probs(const Prefix& prefix, const SelectionTask& task) override {
        return pick_log_probs(logits(prefix, task), candidate_ids(lm_.vocab(), task));
    }

    std::vector<std::vector<double>> candidate_log_probs_batch(std::span<const Prefix> pool,
                                                               const SelectionTask& task) override {
        if (pool.empty()) return {};
        const bool text = std::all_of(pool.begin(), pool.end(), [](const Prefix& p) { return p.is_text(); });
        if (!text || pool.size() < 2) return Backend::candidate_log_probs_batch(pool, task);
        const auto ids = candidate_ids(lm_.vocab(), task);
        const micro::AnchoredScorer scorer(lm_, text_input(lm_.vocab(), pool[0], task));
        std::vector<std::vector<double>> out;
        out.reserve(pool.size());
        out.push_back(pick_log_probs(scorer.anchor_logits(), ids));
        for (std::size_t i = 1; i < pool.size(); ++i)
            out.push_back(pick_log_probs(scorer.logits(text_input(lm_.vocab(), pool[i], task)), ids));
        return out;
    }

    std::string sample(const Prefix& prefix, const SelectionTask& task, std::uint64_t seed) override {
        const auto z = logits(prefix, task);
        if (opts_.temperature <= 0.0) {
            return task.candidates[static_cast<std::size_t>(argmax_index(pick_log_probs(z, candidate_ids(lm_.vocab(), task))))];
        }
        std::vector<double> scaled(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) scaled[i] = z[i] / opts_.temperature;
        const auto p = micro::softmax(scaled);
        CounterRng rng(seed);
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t pick = p.size() - 1;
        for (std::size_t i = 0; i < p.size(); ++i) {
            acc += p[i];
            if (u < acc) {
                pick = i;
                break;
            }
        }
        return std::string(1, lm_.vocab().symbol(static_cast<int>(pick)));
    }

private:
    micro::MicroLM lm_;
    std::optional<micro::MicroVLM> vlm_;
    LocalOptions opts_;
};

class StubHandleBackend final : public ModelHandle::Backend {
public:
    explicit StubHandleBackend(StubBackend stub) : stub_(std::move(stub)) {}

    AccessLevel max_level() const noexcept override { return stub_.raw ? AccessLevel::Logits : AccessLevel::BlackBox; }

    std::vector<double> candidate_log_probs(const Prefix& prefix, const SelectionTask& task) override {
        auto raw = stub_.raw(prefix, task);
        if (raw.size() != task.candidates.size()) throw PreconditionError("stub returned the wrong number of probabilities");
        for (auto& v : raw) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw PreconditionError("stub returned an invalid probability");
            v = v > 0.0 ? std::log(v) : kNegInf;
        }
        return raw;
    }

    std::string sample(const Prefix& prefix, const SelectionTask& task, std::uint64_t seed) override {
        if (stub_.sample) return stub_.sample(prefix, task, seed);
        const auto p = normalise_log_probs(candidate_log_probs(prefix, task));
        CounterRng rng(seed);
        const double u = rng.uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            acc += p[i];
            if (u < acc) return task.candidates[i];
        }
        return task.candidates.back();
    }

private:
    StubBackend stub_;
};

}  // namespace

std::vector<double> normalise_log_probs(std::span<const double> log_probs) {
    const double lse = logsumexp(log_probs);
    if (lse == kNegInf) throw DegenerateDistributionError("every candidate has zero probability");
    std::vector<double> out(log_probs.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(log_probs[i] - lse);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

const char* to_string(AccessLevel level) noexcept {
    switch (level) {
    case AccessLevel::Gradient: return "gradient";
    case AccessLevel::Logits: return "logits";
    case AccessLevel::GrayBox: return "gray";
    case AccessLevel::BlackBox: return "black";
    }
    return "?";
}

AccessLevel parse_access_level(const std::string& text) {
    std::string t;
    for (const char c : text) t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (t == "gradient") return AccessLevel::Gradient;
    if (t == "logits") return AccessLevel::Logits;
    if (t == "gray" || t == "graybox" || t == "gray-box") return AccessLevel::GrayBox;
    if (t == "black" || t == "blackbox" || t == "black-box") return AccessLevel::BlackBox;
    throw PreconditionError("unknown access level '" + text + "'");
}

ModelHandle::ModelHandle(std::string id, AccessLevel level, std::shared_ptr<Backend> backend)
    : id_(std::move(id)), level_(level), backend_(std::move(backend)), meter_(std::make_shared<Meter>()) {
    if (!backend_) throw PreconditionError("model handle without a backend");
    if (!at_least(backend_->max_level(), level_))
        throw CapabilityError(std::string("backend of '") + id_ + "' cannot serve " + to_string(level_) + " access");
}

void ModelHandle::set_query_budget(std::optional<std::int64_t> budget) {
    if (budget && *budget < 0) throw PreconditionError("query budget must be non-negative");
    meter_->budget.store(budget ? *budget : -1);
}

std::optional<std::int64_t> ModelHandle::remaining_budget() const {
    const auto b = meter_->budget.load();
    if (b < 0) return std::nullopt;
    return b;
}

const micro::MicroLM* ModelHandle::local_lm() const noexcept { return backend_->lm(); }
const micro::MicroVLM* ModelHandle::local_vlm() const noexcept { return backend_->vlm(); }

void ModelHandle::require(AccessLevel need, const char* operation) const {
    if (!at_least(level_, need))
        throw CapabilityError(std::string(operation) + " needs " + to_string(need) + " access but '" + id_ +
                              "' grants " + to_string(level_));
}

void ModelHandle::charge(std::int64_t n) const {
    auto& budget = meter_->budget;
    std::int64_t cur = budget.load();
    while (cur >= 0) {
        if (cur < n) throw BudgetError("query budget of '" + id_ + "' exhausted");
        if (budget.compare_exchange_weak(cur, cur - n)) break;
    }
    meter_->queries.fetch_add(n);
}

ModelHandle open_local(std::string id, micro::MicroLM model, AccessLevel level, LocalOptions options) {
    return ModelHandle(std::move(id), level, std::make_shared<LocalBackend>(std::move(model), options));
}

ModelHandle open_local(std::string id, micro::MicroVLM model, AccessLevel level, LocalOptions options) {
    return ModelHandle(std::move(id), level, std::make_shared<LocalBackend>(std::move(model), options));
}

ModelHandle open_stub(std::string id, StubBackend stub, AccessLevel level) {
    if (!stub.raw && !stub.sample) throw PreconditionError("stub backend needs raw or sample");
    return ModelHandle(std::move(id), level, std::make_shared<StubHandleBackend>(std::move(stub)));
}

std::vector<double> candidate_distribution(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task) {
    handle.require(AccessLevel::GrayBox, "candidate_distribution");
    task.validate();
    handle.charge();
    return normalise_log_probs(handle.backend().candidate_log_probs(prefix, task));
}

std::vector<std::vector<double>> candidate_distributions(const ModelHandle& handle, std::span<const Prefix> pool,
                                                         const SelectionTask& task) {
    handle.require(AccessLevel::GrayBox, "candidate_distributions");
    task.validate();
    handle.charge(static_cast<std::int64_t>(pool.size()));
    auto logs = handle.backend().candidate_log_probs_batch(pool, task);
    std::vector<std::vector<double>> out;
    out.reserve(logs.size());
    for (const auto& l : logs) out.push_back(normalise_log_probs(l));
    return out;
}

int argmax_index(std::span<const double> values) noexcept {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

int argmax_candidate(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task) {
    return argmax_index(candidate_distribution(handle, prefix, task));
}

std::string sample_output(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task,
                          std::uint64_t seed) {
    task.validate();
    handle.charge();
    return handle.backend().sample(prefix, task, seed);
}

int match_response(std::string_view response, const SelectionTask& task) {
    std::size_t i = 0;
    while (i < response.size() && std::isspace(static_cast<unsigned char>(response[i]))) ++i;
    if (i == response.size()) return -1;
    const auto c = static_cast<char>(std::tolower(static_cast<unsigned char>(response[i])));
    for (std::size_t j = 0; j < task.candidates.size(); ++j) {
        const auto& cand = task.candidates[j];
        if (static_cast<char>(std::tolower(static_cast<unsigned char>(cand[0]))) == c) return static_cast<int>(j);
    }
    return -1;
}

micro::Matrix grad_onehot(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task, int target) {
    handle.require(AccessLevel::Gradient, "grad_onehot");
    const auto* lm = handle.local_lm();
    if (!lm) throw CapabilityError("gradients need a local model");
    if (!prefix.is_tokens()) throw PreconditionError("grad_onehot needs a token prefix");
    if (target < 0 || target >= task.size()) throw PreconditionError("target outside the candidate set");
    handle.charge();
    const auto ids = candidate_ids(lm->vocab(), task);
    const micro::TokenOneHot onehot(prefix.tokens().tokens, lm->config().vocab_size);
    return micro::grad_onehot(*lm, onehot, lm->vocab().encode(task.prompt), ids, ids[static_cast<std::size_t>(target)]);
}

std::vector<double> grad_pixels(const ModelHandle& handle, const Prefix& prefix, const SelectionTask& task,
                                int target) {
    handle.require(AccessLevel::Gradient, "grad_pixels");
    const auto* vlm = handle.local_vlm();
    if (!vlm) throw CapabilityError("pixel gradients need a local vision model");
    if (!prefix.is_pixels()) throw PreconditionError("grad_pixels needs a pixel prefix");
    if (target < 0 || target >= task.size()) throw PreconditionError("target outside the candidate set");
    handle.charge();
    const auto ids = candidate_ids(vlm->base().vocab(), task);
    return micro::grad_pixels(*vlm, prefix.pixels(), vlm->base().vocab().encode(task.prompt), ids,
                              ids[static_cast<std::size_t>(target)]);
}

}  // namespace rsp
