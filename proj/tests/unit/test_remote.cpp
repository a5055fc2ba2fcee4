#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "rsp/access.hpp"
#include "rsp/error.hpp"
#include "rsp/stat_test.hpp"

using namespace rsp;
using json = nlohmann::json;

namespace {

// Local HTTP server running a handler on a background thread.
class MockServer {
public:
    using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

    explicit MockServer(Handler h) {
        server_.Post("/v1/completions", [this, h](const httplib::Request& req, httplib::Response& res) {
            ++requests_;
            {
                std::lock_guard lock(mu_);
                last_body_ = req.body;
                last_auth_ = req.get_header_value("Authorization");
            }
            h(req, res);
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~MockServer() {
        server_.stop();
        thread_.join();
    }

    RemoteEndpoint endpoint(RemoteEndpoint::Mode mode) const {
        RemoteEndpoint ep;
        ep.base_url = "http://127.0.0.1:" + std::to_string(port_);
        ep.mode = mode;
        ep.backoff_s = 0.01;
        ep.timeout_s = 5;
        return ep;
    }
    int requests() const { return requests_.load(); }
    json last_body() const {
        std::lock_guard lock(mu_);
        return json::parse(last_body_);
    }
    std::string last_auth() const {
        std::lock_guard lock(mu_);
        return last_auth_;
    }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> requests_{0};
    mutable std::mutex mu_;
    std::string last_body_;
    std::string last_auth_;
};

const SelectionTask kTask{"\nQ pick\nA ", {"a", "b", "c"}};
const Prefix kPrefix{WordSeq{{"red", "fox"}}, 0};

void reply(httplib::Response& res, const json& j) { res.set_content(j.dump(), "application/json"); }

}  // namespace

TEST_CASE("remote gray box parses OpenAI-style top logprobs") {
    MockServer srv([](const httplib::Request&, httplib::Response& res) {
        reply(res, {{"choices",
                     {{{"logprobs",
                        {{"top_logprobs",
                          {{{" a", std::log(0.1)}, {"a", std::log(0.1)}, {"b", std::log(0.6)}, {"zz", std::log(0.2)}}}}}}}}}});
    });
    const auto h = open_remote("r", srv.endpoint(RemoteEndpoint::Mode::Logprob), AccessLevel::GrayBox);
    const auto d = candidate_distribution(h, kPrefix, kTask);
    // " a" and "a" merge; "c" is absent and gets probability zero.
    CHECK(d[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(d[1] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(d[2] == 0.0);
    const auto body = srv.last_body();
    CHECK(body["prompt"] == "red fox\nQ pick\nA ");
    CHECK(body["max_tokens"] == 1);
    CHECK(body["logprobs"] == 23);
    CHECK(body["temperature"] == 0.0);
    CHECK(argmax_candidate(h, kPrefix, kTask) == 1);
}

TEST_CASE("remote gray box: flat top_logprobs map and degenerate responses") {
    std::atomic<bool> empty{false};
    MockServer srv([&](const httplib::Request&, httplib::Response& res) {
        if (empty) {
            reply(res, {{"top_logprobs", {{"x", -0.1}}}});
        } else {
            reply(res, {{"top_logprobs", {{"c", -1.0}}}});
        }
    });
    const auto h = open_remote("r", srv.endpoint(RemoteEndpoint::Mode::Logprob), AccessLevel::GrayBox);
    const auto d = candidate_distribution(h, kPrefix, kTask);
    CHECK(d[2] == 1.0);
    empty = true;
    CHECK_THROWS_AS(candidate_distribution(h, kPrefix, kTask), DegenerateDistributionError);
}

TEST_CASE("remote black box reads text and chat responses") {
    std::atomic<int> n{0};
    MockServer srv([&](const httplib::Request&, httplib::Response& res) {
        if (n++ % 2 == 0) {
            reply(res, {{"choices", {{{"message", {{"role", "assistant"}, {"content", " B."}}}}}}});
        } else {
            reply(res, {{"choices", {{{"text", "c"}}}}});
        }
    });
    const auto h = open_remote("r", srv.endpoint(RemoteEndpoint::Mode::ChatText), AccessLevel::BlackBox);
    const auto first = sample_output(h, kPrefix, kTask, 1);
    CHECK(first == " B.");
    CHECK(match_response(first, kTask) == 1);
    CHECK(sample_output(h, kPrefix, kTask, 2) == "c");
    CHECK(srv.last_body()["temperature"] == 1.0);
    CHECK_THROWS_AS(candidate_distribution(h, kPrefix, kTask), CapabilityError);
}

TEST_CASE("remote retries transient failures") {
    std::atomic<int> n{0};
    MockServer srv([&](const httplib::Request&, httplib::Response& res) {
        if (n++ < 2) {
            res.status = n == 1 ? 503 : 429;
            return;
        }
        reply(res, {{"text", "a"}});
    });
    const auto h = open_remote("r", srv.endpoint(RemoteEndpoint::Mode::ChatText), AccessLevel::BlackBox);
    CHECK(sample_output(h, kPrefix, kTask, 0) == "a");
    CHECK(srv.requests() == 3);
}

TEST_CASE("remote gives up after max_retries with the attempt count") {
    MockServer srv([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
    auto ep = srv.endpoint(RemoteEndpoint::Mode::ChatText);
    ep.max_retries = 3;
    const auto h = open_remote("r", ep, AccessLevel::BlackBox);
    try {
        sample_output(h, kPrefix, kTask, 0);
        FAIL("expected QueryError");
    } catch (const QueryError& e) {
        CHECK(e.attempts() == 3);
    }
    CHECK(srv.requests() == 3);
}

TEST_CASE("remote does not retry client errors") {
    MockServer srv([](const httplib::Request&, httplib::Response& res) { res.status = 400; });
    const auto h = open_remote("r", srv.endpoint(RemoteEndpoint::Mode::ChatText), AccessLevel::BlackBox);
    CHECK_THROWS_AS(sample_output(h, kPrefix, kTask, 0), QueryError);
    CHECK(srv.requests() == 1);
}

TEST_CASE("remote transport failure is a query error") {
    RemoteEndpoint ep;
    ep.base_url = "http://127.0.0.1:1";
    ep.backoff_s = 0.001;
    ep.max_retries = 2;
    ep.timeout_s = 1;
    const auto h = open_remote("r", ep, AccessLevel::BlackBox);
    try {
        sample_output(h, kPrefix, kTask, 0);
        FAIL("expected QueryError");
    } catch (const QueryError& e) {
        CHECK(e.attempts() == 2);
    }
}

TEST_CASE("remote malformed body is a format error") {
    MockServer srv([](const httplib::Request&, httplib::Response& res) { res.set_content("{\"nothing\": 1}", "application/json"); });
    const auto h = open_remote("r", srv.endpoint(RemoteEndpoint::Mode::Logprob), AccessLevel::GrayBox);
    CHECK_THROWS_AS(candidate_distribution(h, kPrefix, kTask), FormatError);
    CHECK_THROWS_AS(sample_output(h, kPrefix, kTask, 0), FormatError);
}

TEST_CASE("remote sends the bearer token from the environment") {
    MockServer srv([](const httplib::Request&, httplib::Response& res) { reply(res, {{"text", "a"}}); });
    ::setenv("RSP_TEST_TOKEN", "s3cret", 1);
    auto ep = srv.endpoint(RemoteEndpoint::Mode::ChatText);
    ep.auth_env = "RSP_TEST_TOKEN";
    sample_output(open_remote("r", ep, AccessLevel::BlackBox), kPrefix, kTask, 0);
    CHECK(srv.last_auth() == "Bearer s3cret");
    CHECK_FALSE(srv.last_body().contains("model"));
    ep.model = "tiny-1";
    sample_output(open_remote("r", ep, AccessLevel::BlackBox), kPrefix, kTask, 0);
    CHECK(srv.last_body()["model"] == "tiny-1");
    sample_output(open_remote("r", srv.endpoint(RemoteEndpoint::Mode::ChatText), AccessLevel::BlackBox), kPrefix, kTask, 0);
    CHECK(srv.last_auth().empty());
}

TEST_CASE("remote respects the in-flight limit") {
    std::atomic<int> live{0}, peak{0};
    MockServer srv([&](const httplib::Request&, httplib::Response& res) {
        const int now = ++live;
        int p = peak.load();
        while (now > p && !peak.compare_exchange_weak(p, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        --live;
        reply(res, {{"text", "a"}});
    });
    auto ep = srv.endpoint(RemoteEndpoint::Mode::ChatText);
    ep.max_in_flight = 2;
    const auto h = open_remote("r", ep, AccessLevel::BlackBox);
    ProbeSet ps;
    ps.task = kTask;
    for (int k = 0; k < 6; ++k) {
        ps.prefixes.push_back(Prefix{WordSeq{{"w" + std::to_string(k)}}, 0});
        ps.targets.push_back(0);
    }
    const auto obs = observed_statistic_black(h, ps, 2, 1, 6);
    CHECK(obs.x_obs == 6);
    CHECK(peak.load() <= 2);
    CHECK(srv.requests() == 12);
}

TEST_CASE("remote token bucket paces requests") {
    MockServer srv([](const httplib::Request&, httplib::Response& res) { reply(res, {{"text", "a"}}); });
    auto ep = srv.endpoint(RemoteEndpoint::Mode::ChatText);
    ep.rate_per_s = 50;
    ep.burst = 1;
    const auto h = open_remote("r", ep, AccessLevel::BlackBox);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 11; ++i) sample_output(h, kPrefix, kTask, 0);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(secs >= 0.18);
}
