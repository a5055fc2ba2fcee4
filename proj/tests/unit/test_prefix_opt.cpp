#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "rsp/error.hpp"
#include "rsp/io.hpp"
#include "rsp/prefix_opt.hpp"
#include "rsp/rng.hpp"

using namespace rsp;

namespace {

SelectionTask letters(int n) {
    SelectionTask t;
    t.prompt = "\nQ pick\nA ";
    for (int i = 0; i < n; ++i) t.candidates.emplace_back(1, static_cast<char>('a' + i));
    return t;
}

const micro::MicroLM& lm() {
    static const micro::MicroLM m(micro::ModelConfig{}, micro::Vocab::default_chars(), 2024);
    return m;
}

const std::vector<std::string> kWords{"red", "fox", "sat", "on", "the", "mat", "big", "dog", "ran", "far"};

OptimizerConfig small_cfg() {
    OptimizerConfig c;
    c.rounds = 3;
    c.length = 4;
    c.height = 8;
    c.width = 8;
    c.word_list = kWords;
    c.use_unrelated = false;
    c.seed = 17;
    c.workers = 1;
    return c;
}

Prefix toks(std::vector<int> t) { return Prefix{TokenSeq{std::move(t)}, 0}; }

}  // namespace

TEST_CASE("mode parsing and required levels") {
    CHECK(parse_opt_mode("gcg") == OptMode::Gcg);
    CHECK(parse_opt_mode("genetic") == OptMode::Genetic);
    CHECK(parse_opt_mode("pgd") == OptMode::Pgd);
    CHECK(parse_opt_mode("zo-pgd") == OptMode::ZoPgd);
    CHECK_THROWS_AS(parse_opt_mode("adam"), PreconditionError);
    CHECK(required_level(OptMode::Gcg) == AccessLevel::Gradient);
    CHECK(required_level(OptMode::Pgd) == AccessLevel::Gradient);
    CHECK(required_level(OptMode::Genetic) == AccessLevel::GrayBox);
    CHECK(required_level(OptMode::ZoPgd) == AccessLevel::GrayBox);
}

TEST_CASE("optimizer config validation") {
    auto c = small_cfg();
    CHECK_NOTHROW(c.validate());
    c.p_mutate = 1.5;
    CHECK_THROWS_AS(c.validate(), PreconditionError);
    c = small_cfg();
    c.rounds = 0;
    CHECK_THROWS_AS(c.validate(), PreconditionError);
    c = small_cfg();
    c.batch_llm = 0;
    CHECK_THROWS_AS(c.validate(), PreconditionError);
}

TEST_CASE("gcg with L=1 and k=|V| finds the brute-force optimum") {
    const auto task = letters(4);
    const auto ref = open_local("r", lm(), AccessLevel::Gradient);
    auto cfg = small_cfg();
    cfg.k_topk = 64;
    for (const int target : {0, 3}) {
        const auto x = toks({5});
        const auto step = gcg_step(ref, nullptr, x, task, target, cfg);
        double best = -1.0;
        int arg = -1;
        for (int v = 0; v < 64; ++v) {
            const double o = objective(ref, nullptr, toks({v}), task, target, false);
            if (o > best) best = o, arg = v;
        }
        CHECK(step.prefix.tokens().tokens[0] == arg);
        CHECK(step.objective == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("gcg with the incumbent never decreases the objective") {
    const auto task = letters(10);
    const auto ref = open_local("r", lm(), AccessLevel::Gradient);
    const auto mu = open_local("u", micro::MicroLM(micro::ModelConfig{}, micro::Vocab::default_chars(), 9),
                               AccessLevel::GrayBox);
    auto cfg = small_cfg();
    cfg.use_unrelated = true;
    auto x = initial_prefix(OptMode::Gcg, cfg, 64, 3);
    double prev = objective(ref, &mu, x, task, 2, true);
    for (int r = 0; r < 5; ++r) {
        const auto s = gcg_step(ref, &mu, x, task, 2, cfg);
        CHECK(s.objective >= prev);
        CHECK(s.objective == doctest::Approx(objective(ref, &mu, s.prefix, task, 2, true)).epsilon(1e-12));
        prev = s.objective;
        x = s.prefix;
    }
}

TEST_CASE("gcg flag semantics and errors") {
    const auto task = letters(4);
    const auto ref = open_local("r", lm(), AccessLevel::Gradient);
    auto cfg = small_cfg();
    CHECK_NOTHROW(gcg_step(ref, nullptr, toks({1, 2, 3}), task, 1, cfg));
    cfg.use_unrelated = true;
    CHECK_THROWS_AS(gcg_step(ref, nullptr, toks({1, 2, 3}), task, 1, cfg), PreconditionError);
    cfg.use_unrelated = false;
    CHECK_THROWS_AS(gcg_step(ref, nullptr, toks({1, 2, 3}), task, 4, cfg), PreconditionError);
    const auto gray = open_local("r", lm(), AccessLevel::GrayBox);
    CHECK_THROWS_AS(gcg_step(gray, nullptr, toks({1, 2, 3}), task, 1, cfg), CapabilityError);
    CHECK_THROWS_AS(gcg_step(ref, nullptr, Prefix{WordSeq{{"a"}}, 0}, task, 1, cfg), PreconditionError);
}

TEST_CASE("genetic: p_mutate 0 returns the incumbent") {
    const auto task = letters(4);
    const auto ref = open_local("r", lm(), AccessLevel::GrayBox);
    auto cfg = small_cfg();
    cfg.p_mutate = 0.0;
    const Prefix x{WordSeq{{"red", "fox", "sat", "on"}}, 0};
    const auto s = genetic_step(ref, nullptr, x, task, 1, cfg, 5);
    CHECK(s.prefix.words() == x.words());
}

TEST_CASE("genetic: p_mutate 1 resamples every position") {
    const auto task = letters(4);
    const auto ref = open_local("r", lm(), AccessLevel::GrayBox);
    auto cfg = small_cfg();
    cfg.p_mutate = 1.0;
    cfg.batch_llm = 1;
    cfg.include_current = false;
    const Prefix x{WordSeq{{"red", "fox", "sat", "on", "the", "mat"}}, 0};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = genetic_step(ref, nullptr, x, task, 1, cfg, seed);
        for (std::size_t i = 0; i < x.words().words.size(); ++i) CHECK(s.prefix.words().words[i] != x.words().words[i]);
    }
}

TEST_CASE("genetic: B=1 replay by hand") {
    const auto task = letters(4);
    const auto ref = open_local("r", lm(), AccessLevel::GrayBox);
    auto cfg = small_cfg();
    cfg.p_mutate = 0.5;
    cfg.batch_llm = 1;
    const Prefix x{WordSeq{{"red", "fox", "sat", "on"}}, 0};
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        // Independent replay of the documented mutation protocol.
        CounterRng rng(seed);
        auto words = x.words().words;
        for (auto& w : words) {
            if (!(rng.uniform() < cfg.p_mutate)) continue;
            std::string pick;
            do {
                pick = kWords[rng.below(kWords.size())];
            } while (pick == w);
            w = pick;
        }
        const Prefix mutant{WordSeq{words}, 0};
        const double ox = objective(ref, nullptr, x, task, 2, false);
        const double om = objective(ref, nullptr, mutant, task, 2, false);
        const auto s = genetic_step(ref, nullptr, x, task, 2, cfg, seed);
        CHECK(s.prefix.words() == (om > ox ? mutant : x).words());
        CHECK(s.objective == doctest::Approx(std::max(ox, om)).epsilon(1e-12));
    }
}

TEST_CASE("genetic: word list errors") {
    const auto task = letters(4);
    const auto ref = open_local("r", lm(), AccessLevel::GrayBox);
    auto cfg = small_cfg();
    const Prefix x{WordSeq{{"red"}}, 0};
    cfg.word_list = {};
    CHECK_THROWS_AS(genetic_step(ref, nullptr, x, task, 1, cfg, 0), PreconditionError);
    cfg.word_list = {"red", "red"};
    CHECK_THROWS_AS(genetic_step(ref, nullptr, x, task, 1, cfg, 0), PreconditionError);
}

TEST_CASE("pgd: zero gradient, clipping and step size") {
    const auto task = letters(4);
    micro::MicroVLM dead(lm(), micro::VisionConfig{8, 8, 4}, 1);
    for (auto& w : dead.mutable_projector()) w = 0.0;
    const auto hd = open_local("d", dead, AccessLevel::Gradient);
    CounterRng rng(4);
    PixelGrid g(8, 8);
    for (auto& v : g.data) v = static_cast<std::uint8_t>(rng.below(256));
    const Prefix x{g, 0};
    CHECK(pgd_step(hd, x, task, 1).pixels() == g);
    for (const double v : grad_pixels(hd, x, task, 1)) CHECK(v == 0.0);

    const auto hv = open_local("v", micro::MicroVLM(lm(), micro::VisionConfig{8, 8, 4}, 2), AccessLevel::Gradient);
    const auto grad = grad_pixels(hv, x, task, 1);
    const auto y = pgd_step(hv, x, task, 1).pixels();
    for (std::size_t i = 0; i < g.size(); ++i) {
        const int want = std::clamp(static_cast<int>(g.data[i]) + (grad[i] > 0 ? 1 : grad[i] < 0 ? -1 : 0), 0, 255);
        CHECK(static_cast<int>(y.data[i]) == want);
    }
    // Saturated grids stay in range.
    for (const std::uint8_t fill : {std::uint8_t{0}, std::uint8_t{255}}) {
        const auto s = pgd_step(hv, Prefix{PixelGrid(8, 8, fill), 0}, task, 0).pixels();
        for (const auto v : s.data) CHECK(std::abs(static_cast<int>(v) - fill) <= 1);
    }
    CHECK_THROWS_AS(pgd_step(hv, Prefix{PixelGrid(4, 4), 0}, task, 0), PreconditionError);
}

TEST_CASE("pgd: single-pixel model moves along the analytic sign") {
    const auto task = letters(4);
    const micro::MicroVLM one(lm(), micro::VisionConfig{1, 1, 1}, 8);
    const auto h = open_local("one", one, AccessLevel::Gradient);
    const auto prompt = lm().vocab().encode(task.prompt);
    const auto cands = lm().vocab().encode("abcd");
    PixelGrid g(1, 1);
    g.data = {100, 150, 30};
    for (int target = 0; target < 4; ++target) {
        const auto y = pgd_step(h, Prefix{g, 0}, task, target).pixels();
        for (std::size_t c = 0; c < 3; ++c) {
            std::vector<double> up(g.data.begin(), g.data.end()), dn = up;
            up[c] += 1e-3;
            dn[c] -= 1e-3;
            const double diff = micro::log_target_prob_pixels(one, up, prompt, cands, cands[static_cast<std::size_t>(target)]) -
                                micro::log_target_prob_pixels(one, dn, prompt, cands, cands[static_cast<std::size_t>(target)]);
            CHECK(static_cast<int>(y.data[c]) - static_cast<int>(g.data[c]) == (diff > 0 ? 1 : -1));
        }
    }
}

TEST_CASE("zo estimate: constant, linear and corner behaviour") {
    const std::vector<std::uint8_t> mid(12, 128);
    const auto zero = zo_estimate([](std::span<const std::uint8_t>) { return -1.25; }, mid, 16, 3);
    for (const double v : zero) CHECK(v == 0.0);

    const std::vector<double> a{0.5, -1.0, 2.0, 0.0, 0.25, -0.75, 1.5, 0.1, -0.2, 0.3, -2.0, 1.0};
    auto lin = [&](std::span<const std::uint8_t> p) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * p[i];
        return s;
    };
    // One draw: estimate_i = (a.u) u_i.
    const auto one = zo_estimate(lin, mid, 1, 99);
    CounterRng rng(99, 0);
    std::vector<int> u(12);
    for (auto& s : u) s = rng.sign();
    double au = 0.0;
    for (std::size_t i = 0; i < 12; ++i) au += a[i] * u[i];
    for (std::size_t i = 0; i < 12; ++i) CHECK(one[i] == doctest::Approx(au * u[i]).epsilon(1e-12));

    // Corners use one-sided differences and stay finite and unbiased.
    for (const std::uint8_t fill : {std::uint8_t{0}, std::uint8_t{255}}) {
        const std::vector<std::uint8_t> corner(12, fill);
        const auto est = zo_estimate(lin, corner, 20000, 5);
        for (std::size_t i = 0; i < 12; ++i) {
            CHECK(std::isfinite(est[i]));
            CHECK(std::abs(est[i] - a[i]) < 0.15);
        }
    }
}

TEST_CASE("zo gradient of a constant model is zero") {
    const auto task = letters(4);
    StubBackend s;
    s.raw = [](const Prefix&, const SelectionTask&) { return std::vector<double>{0.1, 0.2, 0.3, 0.4}; };
    const auto h = open_stub("c", s, AccessLevel::GrayBox);
    auto cfg = small_cfg();
    cfg.batch_vlm = 4;
    const auto g = zo_gradient(h, Prefix{PixelGrid(4, 4, 10), 0}, task, 1, cfg, 7);
    for (const double v : g) CHECK(v == 0.0);
    CHECK(h.queries_made() == 8);
}

TEST_CASE("optimize_probe_set: composition, reproducibility and workers") {
    const auto task = letters(4);
    const auto ref = open_local("r", lm(), AccessLevel::Gradient);
    auto cfg = small_cfg();
    cfg.rounds = 1;
    const auto one = optimize_probe_set(ref, nullptr, task, 1, std::vector<int>{2}, cfg, OptMode::Gcg);
    const auto x0 = initial_prefix(OptMode::Gcg, cfg, 64, derive_seed(cfg.seed, "probe.init", 0));
    const auto step = gcg_step(ref, nullptr, x0, task, 2, cfg);
    CHECK(one.probes.prefixes[0].same_payload(step.prefix));
    CHECK(one.traces[0].size() == 2);

    cfg.rounds = 2;
    for (const auto mode : {OptMode::Gcg, OptMode::Genetic, OptMode::Pgd, OptMode::ZoPgd}) {
        const bool pixels = mode == OptMode::Pgd || mode == OptMode::ZoPgd;
        const auto h = pixels ? open_local("v", micro::MicroVLM(lm(), micro::VisionConfig{8, 8, 4}, 3), AccessLevel::Gradient)
                              : ref;
        auto a = optimize_probe_set(h, nullptr, task, 6, {}, cfg, mode).probes;
        auto c2 = cfg;
        c2.workers = 3;
        auto b = optimize_probe_set(h, nullptr, task, 6, {}, c2, mode).probes;
        a.provenance.created = b.provenance.created = "";
        CHECK(a == b);
        CHECK(a.size() == 6);
        for (const int t : a.targets) CHECK((t >= 0 && t < 4));
        CHECK(a.provenance.mode == to_string(mode));
        if (!pixels) {
            for (const auto& p : a.prefixes) CHECK((p.is_tokens() ? p.tokens().tokens.size() : p.words().words.size()) == 4);
        }
    }
}

TEST_CASE("optimize_probe_set: level and argument checks") {
    const auto task = letters(4);
    auto cfg = small_cfg();
    const auto logits = open_local("r", lm(), AccessLevel::Logits);
    CHECK_THROWS_AS(optimize_probe_set(logits, nullptr, task, 2, {}, cfg, OptMode::Gcg), CapabilityError);
    CHECK_NOTHROW(optimize_probe_set(logits, nullptr, task, 2, {}, cfg, OptMode::Genetic));
    CHECK_THROWS_AS(optimize_probe_set(logits, nullptr, task, 0, {}, cfg, OptMode::Genetic), PreconditionError);
    CHECK_THROWS_AS(optimize_probe_set(logits, nullptr, task, 2, std::vector<int>{1}, cfg, OptMode::Genetic),
                    PreconditionError);
    CHECK_THROWS_AS(optimize_probe_set(logits, nullptr, task, 1, std::vector<int>{7}, cfg, OptMode::Genetic),
                    PreconditionError);
}

TEST_CASE("optimize_probe_set: fixed point on a saturated stub") {
    const auto task = letters(4);
    StubBackend s;
    s.raw = [](const Prefix&, const SelectionTask&) { return std::vector<double>{1.0, 0.0, 0.0, 0.0}; };
    const auto h = open_stub("s", s, AccessLevel::GrayBox);
    auto cfg = small_cfg();
    cfg.rounds = 5;
    const auto run = optimize_probe_set(h, nullptr, task, 3, std::vector<int>{0, 0, 0}, cfg, OptMode::Genetic);
    for (std::size_t k = 0; k < 3; ++k) {
        const auto init = initial_prefix(OptMode::Genetic, cfg, 64, derive_seed(cfg.seed, "probe.init", k));
        CHECK(run.probes.prefixes[k].same_payload(init));
        for (const double o : run.traces[k]) CHECK(o == 1.0);
    }
}

TEST_CASE("optimize_probe_set: duplicate prefixes are re-initialised") {
    // One-word prefixes over a two-word list and a stub that ignores the
    // prefix: at most two distinct prefixes exist, so K=4 must collide.
    const auto task = letters(2);
    StubBackend s;
    s.raw = [](const Prefix&, const SelectionTask&) { return std::vector<double>{0.5, 0.5}; };
    const auto h = open_stub("s", s, AccessLevel::GrayBox);
    auto cfg = small_cfg();
    cfg.length = 1;
    cfg.word_list = {"yes", "no"};
    const auto run = optimize_probe_set(h, nullptr, task, 4, {}, cfg, OptMode::Genetic);
    CHECK(run.probes.collisions.size() >= 2);
    for (const auto& c : run.probes.collisions) {
        CHECK(c.duplicate_of < c.index);
        if (!c.resolved) {
            bool dup = false;
            for (std::size_t j = 0; j < run.probes.size(); ++j)
                dup = dup || (static_cast<int>(j) != c.index &&
                              run.probes.prefixes[j].same_payload(run.probes.prefixes[static_cast<std::size_t>(c.index)]));
            CHECK(dup);
        }
    }
}

TEST_CASE("probe set JSON round trip for every variant") {
    const auto task = letters(3);
    ProbeSet ps;
    ps.task = task;
    ps.prefixes = {toks({1, 2, 3}), Prefix{WordSeq{{"red", "fox"}}, 9}, Prefix{PixelGrid(2, 3, 7), 10}};
    std::get<PixelGrid>(ps.prefixes[2].value).data[4] = 255;
    ps.targets = {0, 2, 1};
    ps.ref_probs = {0.5, 0.25, 1.0 / 3.0};
    ps.provenance = {"ref", AccessLevel::Gradient, "gcg", "hash", "2026-10-18T00:00:00Z"};
    ps.collisions = {{2, 0, true}};
    const auto text = to_json(ps);
    const auto back = probe_set_from_json(text);
    CHECK(back == ps);
    CHECK(to_json(back) == text);
    CHECK(text.find("\"data\"") != std::string::npos);

    const auto dir = std::filesystem::temp_directory_path() / "rsp-unit-probes";
    save_probe_set((dir / "a.json").string(), ps);
    const auto loaded = load_probe_set((dir / "a.json").string());
    save_probe_set((dir / "b.json").string(), loaded);
    CHECK(read_file((dir / "a.json").string()) == read_file((dir / "b.json").string()));

    // The hash ignores the timestamp only.
    auto later = ps;
    later.provenance.created = "2030-01-01T00:00:00Z";
    CHECK(probe_set_hash(later) == probe_set_hash(ps));
    later.targets[0] = 1;
    CHECK(probe_set_hash(later) != probe_set_hash(ps));

    CHECK_THROWS_AS(probe_set_from_json("{}"), FormatError);
    CHECK_THROWS_AS(probe_set_from_json("[1,2"), FormatError);
    auto bad = ps;
    bad.targets[0] = 3;
    CHECK_THROWS_AS(bad.validate(), PreconditionError);
}

TEST_CASE("word list loading") {
    const auto path = (std::filesystem::temp_directory_path() / "rsp-unit-words.txt").string();
    write_file(path, "red\n\n  fox \nred\nsat\n");
    CHECK(load_word_list(path) == std::vector<std::string>{"red", "fox", "sat"});
    CHECK_THROWS_AS(load_word_list(path + ".missing"), Error);
}
