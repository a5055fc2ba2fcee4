#include <cmath>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "rsp/corpus.hpp"
#include "rsp/error.hpp"
#include "rsp/micromodel.hpp"
#include "rsp/rng.hpp"

using namespace rsp;
using namespace rsp::micro;

namespace {

const std::vector<std::string> kCands{"a", "b", "c", "d"};

std::vector<int> random_tokens(std::uint64_t seed, int n) {
    CounterRng r(seed);
    std::vector<int> t(static_cast<std::size_t>(n));
    for (auto& v : t) v = static_cast<int>(r.below(64));
    return t;
}

}  // namespace

TEST_CASE("vocab encode and decode") {
    const auto v = Vocab::default_chars();
    CHECK(v.size() == 64);
    CHECK(v.symbol(0) == '\n');
    CHECK(v.symbol(1) == ' ');
    const auto ids = v.encode("Hi 42\n");
    CHECK(v.decode(ids) == "Hi 42\n");
    CHECK_THROWS_AS(v.encode("no!"), PreconditionError);
    CHECK_THROWS_AS(Vocab("aa"), PreconditionError);
}

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), PreconditionError);
    VisionConfig v{16, 16, 4};
    CHECK(v.num_patches() == 16);
    CHECK(v.patch_dim() == 48);
    v.patch = 5;
    CHECK_THROWS_AS(v.validate(), PreconditionError);
}

TEST_CASE("softmax of the logits sums to one") {
    const MicroLM m(ModelConfig{}, Vocab::default_chars(), 3);
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto tokens = random_tokens(s, 1 + static_cast<int>(s) * 12);
        const auto p = softmax(forward_logits(m, tokens));
        double sum = 0.0;
        for (const double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
    const std::vector<double> big{1000.0, 1000.0, -1000.0};
    const auto p = softmax(big);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[2] == 0.0);
}

TEST_CASE("forward is deterministic, context-limited and thread-safe") {
    const MicroLM a(ModelConfig{}, Vocab::default_chars(), 11);
    const MicroLM b(ModelConfig{}, Vocab::default_chars(), 11);
    const auto t = random_tokens(1, 40);
    CHECK(forward_logits(a, t) == forward_logits(b, t));
    CHECK(forward_logits(a, t) != forward_logits(MicroLM(ModelConfig{}, Vocab::default_chars(), 12), t));
    CHECK_THROWS_AS(forward_logits(a, random_tokens(2, 129)), PreconditionError);
    CHECK_THROWS_AS(forward_logits(a, std::vector<int>{}), PreconditionError);
    CHECK_THROWS_AS(forward_logits(a, std::vector<int>{64}), PreconditionError);

    const auto want = forward_logits(a, t);
    std::vector<std::vector<double>> got(4);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < got.size(); ++i) threads.emplace_back([&, i] { got[i] = forward_logits(a, t); });
    for (auto& th : threads) th.join();
    for (const auto& g : got) CHECK(g == want);
}

TEST_CASE("anchored scorer matches the plain forward pass") {
    const MicroLM m(ModelConfig{}, Vocab::default_chars(), 5);
    const auto anchor = random_tokens(3, 30);
    const AnchoredScorer s(m, anchor);
    const auto a0 = forward_logits(m, anchor);
    for (std::size_t i = 0; i < a0.size(); ++i) CHECK(s.anchor_logits()[i] == doctest::Approx(a0[i]).epsilon(1e-12));
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        auto t = anchor;
        // Edit a suffix of varying start, sometimes extend.
        CounterRng r(seed);
        const std::size_t from = r.below(t.size());
        for (std::size_t i = from; i < t.size(); ++i) t[i] = static_cast<int>(r.below(64));
        if (seed % 2) t.push_back(7);
        const auto want = forward_logits(m, t);
        const auto got = s.logits(t);
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("one-hot gradient agrees with central differences") {
    const MicroLM m(ModelConfig{}, Vocab::default_chars(), 21);
    const auto& v = m.vocab();
    const auto prompt = v.encode("\nQ pick\nA ");
    const auto cands = v.encode("abcd");
    const auto prefix = random_tokens(9, 6);
    const TokenOneHot oh(prefix, 64);
    CHECK(oh.tokens() == prefix);
    const auto g = grad_onehot(m, oh, prompt, cands, cands[2]);
    CHECK(g.rows == 6);
    CHECK(g.cols == 64);
    CounterRng r(4);
    double worst = 0.0;
    for (int n = 0; n < 16; ++n) {
        const int row = static_cast<int>(r.below(6)), col = static_cast<int>(r.below(64));
        Matrix up = oh.matrix(), dn = oh.matrix();
        const double h = 1e-5;
        up(row, col) += h;
        dn(row, col) -= h;
        const double fd = (log_target_prob_relaxed(m, up, prompt, cands, cands[2]) -
                           log_target_prob_relaxed(m, dn, prompt, cands, cands[2])) /
                          (2 * h);
        worst = std::max(worst, std::abs(g(row, col) - fd) / (std::abs(g(row, col)) + 1e-8));
    }
    CHECK(worst < 1e-3);
    CHECK_THROWS_AS(grad_onehot(m, oh, prompt, cands, 63), PreconditionError);
}

TEST_CASE("pixel gradient agrees with central differences") {
    const MicroVLM vm(MicroLM(ModelConfig{}, Vocab::default_chars(), 22), VisionConfig{8, 8, 4}, 3);
    const auto& v = vm.base().vocab();
    const auto prompt = v.encode("\nQ pick\nA ");
    const auto cands = v.encode("abcd");
    PixelGrid g(8, 8);
    CounterRng r(6);
    for (auto& p : g.data) p = static_cast<std::uint8_t>(r.below(256));
    const auto grad = grad_pixels(vm, g, prompt, cands, cands[1]);
    CHECK(grad.size() == g.size());
    std::vector<double> x(g.data.begin(), g.data.end());
    double worst = 0.0;
    for (int n = 0; n < 16; ++n) {
        const auto i = r.below(x.size());
        auto up = x, dn = x;
        up[i] += 1e-3;
        dn[i] -= 1e-3;
        const double fd = (log_target_prob_pixels(vm, up, prompt, cands, cands[1]) -
                           log_target_prob_pixels(vm, dn, prompt, cands, cands[1])) /
                          2e-3;
        worst = std::max(worst, std::abs(grad[i] - fd) / (std::abs(grad[i]) + 1e-8));
    }
    CHECK(worst < 1e-3);
    CHECK_THROWS_AS(grad_pixels(vm, PixelGrid(4, 4), prompt, cands, cands[1]), PreconditionError);
}

TEST_CASE("checkpoint round trip is byte-identical") {
    const MicroLM m(ModelConfig{}, Vocab::default_chars(), 31);
    std::stringstream a;
    write_checkpoint(a, m);
    const auto back = std::get<MicroLM>(read_checkpoint(a));
    CHECK(back.config() == m.config());
    CHECK(back.vocab() == m.vocab());
    CHECK(back.seed() == m.seed());
    CHECK(std::equal(back.params().begin(), back.params().end(), m.params().begin(), m.params().end()));
    std::stringstream b;
    write_checkpoint(b, back);
    CHECK(a.str() == b.str());

    const MicroVLM vm(m, VisionConfig{8, 8, 4}, 77);
    std::stringstream c;
    write_checkpoint(c, vm);
    const auto vback = std::get<MicroVLM>(read_checkpoint(c));
    CHECK(vback.vision() == vm.vision());
    CHECK(std::equal(vback.projector().begin(), vback.projector().end(), vm.projector().begin()));
    std::stringstream d;
    write_checkpoint(d, vback);
    CHECK(c.str() == d.str());

    std::string bytes = a.str();
    std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(read_checkpoint(truncated), FormatError);
    bytes[0] ^= 0x55;
    std::stringstream bad(bytes);
    CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.ckpt"), Error);
}

TEST_CASE("synthetic corpora are deterministic and in vocabulary") {
    const auto styles = corpus_styles();
    REQUIRE(styles.size() >= 3);
    const auto v = Vocab::default_chars();
    for (const auto& s : styles) {
        const auto c = synthetic_corpus(s, "\nQ pick\nA ", kCands, 4, 3000);
        CHECK_NOTHROW(c.validate(v));
        CHECK(c.text.size() >= 2500);
        CHECK(c.text == synthetic_corpus(s, "\nQ pick\nA ", kCands, 4, 3000).text);
        CHECK(c.text != synthetic_corpus(s, "\nQ pick\nA ", kCands, 5, 3000).text);
    }
    CHECK_THROWS_AS(synthetic_corpus("nope", "\nQ\nA ", kCands, 1, 100), PreconditionError);
    TrainCorpus empty;
    CHECK_THROWS_AS(empty.validate(v), PreconditionError);
}

TEST_CASE("rule corpora answer by the rule") {
    const SelectionRule rule{99, 1.0};
    const std::string prompt = "\nQ pick\nA ";
    const auto c = synthetic_corpus("chat", prompt, kCands, 8, 6000, 1.0, rule);
    std::size_t checked = 0, pos = 0;
    while ((pos = c.text.find(prompt, pos)) != std::string::npos) {
        const auto start = c.text.rfind('\n', pos == 0 ? 0 : pos - 1);
        const auto line = c.text.substr(start == std::string::npos ? 0 : start + 1,
                                        pos - (start == std::string::npos ? 0 : start + 1));
        const char answer = c.text[pos + prompt.size()];
        CHECK(answer == kCands[rule_answer(rule, line, kCands.size())][0]);
        ++checked;
        pos += prompt.size();
    }
    CHECK(checked > 20);
    CHECK(rule_answer(rule, "the cat", 4) == rule_answer(rule, "the cat", 4));
}

TEST_CASE("training lowers held-out loss and fine-tuning stays close") {
    const std::string prompt = "\nQ pick\nA ";
    const auto base_corpus = synthetic_corpus("chat", prompt, kCands, 1, 20000, 1.0, {5, 1.0});
    const auto ft_corpus = synthetic_corpus("math", prompt, kCands, 2, 20000, 0.0);
    TrainOptions opt;
    opt.steps = 300;
    opt.seq_len = 48;
    TrainLog log;
    const auto m = train(1, base_corpus, opt, {}, Vocab::default_chars(), &log);
    REQUIRE(log.heldout_loss.size() >= 2);
    CHECK(log.heldout_loss.back() <= 0.8 * log.heldout_loss.front());
    CHECK(heldout_loss(m, base_corpus, opt) == doctest::Approx(log.heldout_loss.back()).epsilon(1e-9));

    // Same seed and corpus give the same parameters.
    const auto again = train(1, base_corpus, opt);
    CHECK(param_distance(m, again) == 0.0);

    TrainOptions still = opt;
    still.lr = 0.0;
    CHECK(param_distance(finetune(m, ft_corpus, still), m) == 0.0);

    TrainOptions ft = opt;
    ft.steps = 100;
    ft.lr = 3e-4;
    const auto child = finetune(m, ft_corpus, ft);
    const auto fresh = train(9, ft_corpus, opt);
    CHECK(param_distance(child, m) > 0.0);
    CHECK(param_distance(child, m) < param_distance(fresh, m));
    CHECK(heldout_loss(child, ft_corpus, opt) < heldout_loss(m, ft_corpus, opt));

    CHECK_THROWS_AS(param_distance(m, MicroLM(ModelConfig{64, 16, 1, 2, 64, 32}, Vocab::default_chars(), 1)),
                    PreconditionError);
}

TEST_CASE("swapping unused embedding rows leaves outputs unchanged") {
    MicroLM m(ModelConfig{}, Vocab::default_chars(), 41);
    const auto input = m.vocab().encode("hello there\nQ pick\nA ");
    const int a = m.vocab().index_of('z'), b = m.vocab().index_of('Z');
    const auto before = forward_logits(m, input);
    const int d = m.config().d_model;
    auto p = m.mutable_params();
    const std::size_t off = m.token_embedding_offset();
    for (int i = 0; i < d; ++i)
        std::swap(p[off + static_cast<std::size_t>(a * d + i)], p[off + static_cast<std::size_t>(b * d + i)]);
    CHECK(forward_logits(m, input) == before);
    // A used row does change the output.
    const int h = m.vocab().index_of('h');
    for (int i = 0; i < d; ++i)
        std::swap(p[off + static_cast<std::size_t>(a * d + i)], p[off + static_cast<std::size_t>(h * d + i)]);
    CHECK(forward_logits(m, input) != before);
}
