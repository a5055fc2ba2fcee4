#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"
#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <semaphore>
#include <thread>

#include "backend.hpp"
#include "rsp/error.hpp"

namespace rsp {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

class TokenBucket {
public:
    TokenBucket(double rate, int burst) : rate_(rate), cap_(std::max(1, burst)), tokens_(cap_), last_(Clock::now()) {}

    void acquire() {
        if (rate_ <= 0.0) return;
        std::unique_lock lock(mu_);
        for (;;) {
            const auto now = Clock::now();
            tokens_ = std::min(static_cast<double>(cap_),
                               tokens_ + rate_ * std::chrono::duration<double>(now - last_).count());
            last_ = now;
            if (tokens_ >= 1.0) {
                tokens_ -= 1.0;
                return;
            }
            const double wait = (1.0 - tokens_) / rate_;
            lock.unlock();
            std::this_thread::sleep_for(std::chrono::duration<double>(wait));
            lock.lock();
        }
    }

private:
    double rate_;
    int cap_;
    double tokens_;
    Clock::time_point last_;
    std::mutex mu_;
};

std::string trim(std::string_view s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return std::string(s.substr(a, b - a));
}

// Accepts {"text": ...} or {"choices": [{"text": ...}]} or chat-style
// {"choices": [{"message": {"content": ...}}]}.
std::string response_text(const json& r) {
    if (r.contains("text") && r["text"].is_string()) return r["text"].get<std::string>();
    if (r.contains("choices") && r["choices"].is_array() && !r["choices"].empty()) {
        const auto& c = r["choices"][0];
        if (c.contains("text") && c["text"].is_string()) return c["text"].get<std::string>();
        if (c.contains("message") && c["message"].contains("content")) return c["message"]["content"].get<std::string>();
    }
    throw FormatError("response carries no generated text");
}

// Accepts {"top_logprobs": {tok: lp}} or
// {"choices": [{"logprobs": {"top_logprobs": [{tok: lp}]}}]}.
const json& response_logprobs(const json& r) {
    if (r.contains("top_logprobs") && r["top_logprobs"].is_object()) return r["top_logprobs"];
    if (r.contains("choices") && r["choices"].is_array() && !r["choices"].empty()) {
        const auto& c = r["choices"][0];
        if (c.contains("logprobs") && c["logprobs"].contains("top_logprobs")) {
            const auto& t = c["logprobs"]["top_logprobs"];
            if (t.is_array() && !t.empty() && t[0].is_object()) return t[0];
            if (t.is_object()) return t;
        }
    }
    throw FormatError("response carries no top logprobs");
}

class RemoteBackend final : public ModelHandle::Backend {
public:
    explicit RemoteBackend(RemoteEndpoint ep)
        : ep_(std::move(ep)),
          vocab_(ep_.alphabet.empty() ? micro::Vocab::default_chars() : micro::Vocab(ep_.alphabet)),
          slots_(std::max(1, ep_.max_in_flight)),
          bucket_(ep_.rate_per_s, ep_.burst) {
        if (ep_.max_retries < 1) throw PreconditionError("max_retries must be at least 1");
        if (!ep_.auth_env.empty()) {
            if (const char* tok = std::getenv(ep_.auth_env.c_str())) token_ = tok;
        }
    }

    AccessLevel max_level() const noexcept override {
        return ep_.mode == RemoteEndpoint::Mode::Logprob ? AccessLevel::GrayBox : AccessLevel::BlackBox;
    }

    std::vector<double> candidate_log_probs(const Prefix& prefix, const SelectionTask& task) override {
        json body = {{"prompt", render(prefix, task)},
                     {"max_tokens", 1},
                     {"logprobs", task.size() + 20},
                     {"temperature", 0.0}};
        const json r = post(std::move(body));
        const json& lp = response_logprobs(r);
        std::vector<double> out(task.candidates.size(), -std::numeric_limits<double>::infinity());
        // Tokens differing only by surrounding whitespace are merged.
        std::vector<double> mass(task.candidates.size(), 0.0);
        for (const auto& [tok, val] : lp.items()) {
            if (!val.is_number()) continue;
            const std::string t = trim(tok);
            for (std::size_t j = 0; j < task.candidates.size(); ++j)
                if (t == task.candidates[j]) mass[j] += std::exp(val.get<double>());
        }
        for (std::size_t j = 0; j < out.size(); ++j)
            if (mass[j] > 0.0) out[j] = std::log(mass[j]);
        return out;
    }

    std::string sample(const Prefix& prefix, const SelectionTask& task, std::uint64_t) override {
        json body = {{"prompt", render(prefix, task)}, {"max_tokens", 1}, {"temperature", 1.0}};
        return response_text(post(std::move(body)));
    }

private:
    std::string render(const Prefix& prefix, const SelectionTask& task) const {
        return prefix_text(prefix, vocab_) + task.prompt;
    }

    json post(json body) {
        if (!ep_.model.empty()) body["model"] = ep_.model;
        std::counting_semaphore<>* slots = &slots_;
        slots->acquire();
        struct Release {
            std::counting_semaphore<>* s;
            ~Release() { s->release(); }
        } release{slots};

        const std::string payload = body.dump();
        std::string last_error;
        double delay = ep_.backoff_s;
        for (int attempt = 1; attempt <= ep_.max_retries; ++attempt) {
            if (attempt > 1) {
                std::this_thread::sleep_for(std::chrono::duration<double>(delay));
                delay *= 2.0;
            }
            bucket_.acquire();
            httplib::Client cli(ep_.base_url);
            const auto to = std::chrono::duration<double>(ep_.timeout_s);
            cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(to));
            cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(to));
            cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(to));
            httplib::Headers headers;
            if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
            auto res = cli.Post(ep_.path, headers, payload, "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 429 || res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200) throw QueryError("HTTP " + std::to_string(res->status) + " from " + ep_.base_url, attempt);
            try {
                return json::parse(res->body);
            } catch (const json::exception& e) {
                throw QueryError(std::string("unparseable response: ") + e.what(), attempt);
            }
        }
        throw QueryError(last_error + " from " + ep_.base_url, ep_.max_retries);
    }

    RemoteEndpoint ep_;
    micro::Vocab vocab_;
    std::string token_;
    std::counting_semaphore<> slots_;
    TokenBucket bucket_;
};

}  // namespace

ModelHandle open_remote(std::string id, const RemoteEndpoint& endpoint, AccessLevel level) {
    if (level == AccessLevel::Gradient || level == AccessLevel::Logits)
        throw CapabilityError(std::string("remote models cannot grant ") + to_string(level) + " access");
    if (level == AccessLevel::GrayBox && endpoint.mode != RemoteEndpoint::Mode::Logprob)
        throw CapabilityError("gray-box remote access needs a logprob endpoint");
    if (endpoint.base_url.empty()) throw PreconditionError("remote endpoint without a base URL");
    return ModelHandle(std::move(id), level, std::make_shared<RemoteBackend>(endpoint));
}

}  // namespace rsp
