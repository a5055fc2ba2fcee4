#include "rsp/prefix_opt.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "parallel.hpp"
#include "rsp/error.hpp"
#include "rsp/io.hpp"
#include "rsp/rng.hpp"

namespace rsp {

namespace {

using json = nlohmann::json;

std::uint8_t clip_byte(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

void check_target(const SelectionTask& task, int target) {
    if (target < 0 || target >= task.size()) throw PreconditionError("target outside the candidate set");
}

void check_unrelated(const ModelHandle* unrelated, bool use_unrelated) {
    if (use_unrelated && !unrelated) throw PreconditionError("use_unrelated is set but no unrelated model was given");
}

// Objective of every pool member, evaluated in batches that share work with pool[0].
std::vector<double> pool_objectives(const ModelHandle& ref, const ModelHandle* unrelated, std::span<const Prefix> pool,
                                    const SelectionTask& task, int target, bool use_unrelated) {
    const auto t = static_cast<std::size_t>(target);
    const auto pr = candidate_distributions(ref, pool, task);
    std::vector<double> obj(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) obj[i] = pr[i][t];
    if (use_unrelated) {
        const auto pu = candidate_distributions(*unrelated, pool, task);
        for (std::size_t i = 0; i < pool.size(); ++i) obj[i] -= pu[i][t];
    }
    return obj;
}

StepResult best_of(std::vector<Prefix>& pool, const std::vector<double>& obj) {
    const int best = argmax_index(obj);
    return {std::move(pool[static_cast<std::size_t>(best)]), obj[static_cast<std::size_t>(best)]};
}

int vocab_size_of(const ModelHandle& h) {
    if (const auto* lm = h.local_lm()) return lm->config().vocab_size;
    return micro::Vocab::default_chars().size();
}

}  // namespace

const char* to_string(OptMode mode) noexcept {
    switch (mode) {
    case OptMode::Gcg: return "gcg";
    case OptMode::Genetic: return "genetic";
    case OptMode::Pgd: return "pgd";
    case OptMode::ZoPgd: return "zo-pgd";
    }
    return "?";
}

OptMode parse_opt_mode(const std::string& text) {
    if (text == "gcg") return OptMode::Gcg;
    if (text == "genetic") return OptMode::Genetic;
    if (text == "pgd") return OptMode::Pgd;
    if (text == "zo-pgd" || text == "zo") return OptMode::ZoPgd;
    throw PreconditionError("unknown optimizer mode '" + text + "'");
}

AccessLevel required_level(OptMode mode) noexcept {
    return (mode == OptMode::Gcg || mode == OptMode::Pgd) ? AccessLevel::Gradient : AccessLevel::GrayBox;
}

void OptimizerConfig::validate() const {
    if (rounds < 1) throw PreconditionError("rounds must be at least 1");
    if (length < 1) throw PreconditionError("prefix length must be at least 1");
    if (height < 1 || width < 1) throw PreconditionError("pixel prefix shape must be positive");
    if (k_topk < 1) throw PreconditionError("k_topk must be at least 1");
    if (batch_llm < 1 || batch_vlm < 1) throw PreconditionError("batch sizes must be at least 1");
    if (!(p_mutate >= 0.0 && p_mutate <= 1.0)) throw PreconditionError("p_mutate must lie in [0, 1]");
}

std::vector<std::string> load_word_list(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<std::string> words;
    std::set<std::string> seen;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
        std::size_t a = 0;
        while (a < line.size() && std::isspace(static_cast<unsigned char>(line[a]))) ++a;
        line.erase(0, a);
        if (line.empty()) continue;
        if (seen.insert(line).second) words.push_back(line);
    }
    return words;
}

double objective(const ModelHandle& ref, const ModelHandle* unrelated, const Prefix& x, const SelectionTask& task,
                 int target, bool use_unrelated) {
    check_target(task, target);
    check_unrelated(unrelated, use_unrelated);
    const auto t = static_cast<std::size_t>(target);
    double v = candidate_distribution(ref, x, task)[t];
    if (use_unrelated) v -= candidate_distribution(*unrelated, x, task)[t];
    return v;
}

StepResult gcg_step(const ModelHandle& ref, const ModelHandle* unrelated, const Prefix& x, const SelectionTask& task,
                    int target, const OptimizerConfig& cfg) {
    ref.require(AccessLevel::Gradient, "gcg_step");
    check_target(task, target);
    check_unrelated(unrelated, cfg.use_unrelated);
    if (!x.is_tokens()) throw PreconditionError("gcg_step needs a token prefix");
    const auto g = grad_onehot(ref, x, task, target);
    const auto& cur = x.tokens().tokens;
    const int L = static_cast<int>(cur.size());
    const int V = g.cols;
    const int k = std::min(cfg.k_topk, V - 1);

    std::vector<Prefix> pool;
    pool.reserve(static_cast<std::size_t>(L * k + 1));
    if (cfg.include_current) pool.push_back(x);
    std::vector<int> order(static_cast<std::size_t>(V));
    for (int i = 0; i < L; ++i) {
        std::iota(order.begin(), order.end(), 0);
        const auto row = g.row(i);
        // Largest ascent first; lower id on ties; the incumbent token sorts last.
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if ((a == cur[static_cast<std::size_t>(i)]) != (b == cur[static_cast<std::size_t>(i)]))
                return b == cur[static_cast<std::size_t>(i)];
            return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
        });
        for (int j = 0; j < k; ++j) {
            Prefix p = x;
            std::get<TokenSeq>(p.value).tokens[static_cast<std::size_t>(i)] = order[static_cast<std::size_t>(j)];
            pool.push_back(std::move(p));
        }
    }
    const auto obj = pool_objectives(ref, unrelated, pool, task, target, cfg.use_unrelated);
    return best_of(pool, obj);
}

StepResult genetic_step(const ModelHandle& ref, const ModelHandle* unrelated, const Prefix& x,
                        const SelectionTask& task, int target, const OptimizerConfig& cfg, std::uint64_t seed) {
    ref.require(AccessLevel::GrayBox, "genetic_step");
    check_target(task, target);
    check_unrelated(unrelated, cfg.use_unrelated);
    if (!x.is_words()) throw PreconditionError("genetic_step needs a word prefix");
    const auto& words = cfg.word_list;
    if (words.empty()) throw PreconditionError("empty word list");
    if (std::none_of(words.begin(), words.end(), [&](const std::string& w) { return w != words.front(); }))
        throw PreconditionError("word list needs at least two distinct words");

    CounterRng rng(seed);
    std::vector<Prefix> pool;
    pool.reserve(static_cast<std::size_t>(cfg.batch_llm + 1));
    if (cfg.include_current) pool.push_back(x);
    for (int b = 0; b < cfg.batch_llm; ++b) {
        Prefix m = x;
        for (auto& w : std::get<WordSeq>(m.value).words) {
            if (!(rng.uniform() < cfg.p_mutate)) continue;
            // Rejection keeps the draw uniform over the other words.
            std::string_view pick;
            do {
                pick = words[rng.below(words.size())];
            } while (pick == w);
            w = std::string(pick);
        }
        pool.push_back(std::move(m));
    }
    const auto obj = pool_objectives(ref, unrelated, pool, task, target, cfg.use_unrelated);
    return best_of(pool, obj);
}

Prefix pgd_step(const ModelHandle& ref, const Prefix& x, const SelectionTask& task, int target) {
    ref.require(AccessLevel::Gradient, "pgd_step");
    check_target(task, target);
    if (!x.is_pixels()) throw PreconditionError("pgd_step needs a pixel prefix");
    const auto g = grad_pixels(ref, x, task, target);
    Prefix out = x;
    auto& px = std::get<PixelGrid>(out.value).data;
    for (std::size_t i = 0; i < px.size(); ++i) {
        const int s = g[i] > 0.0 ? 1 : (g[i] < 0.0 ? -1 : 0);
        px[i] = clip_byte(px[i] + s);
    }
    return out;
}

std::vector<double> zo_estimate(const std::function<double(std::span<const std::uint8_t>)>& f,
                                std::span<const std::uint8_t> x, int batch, std::uint64_t seed) {
    if (batch < 1) throw PreconditionError("batch must be at least 1");
    const std::size_t n = x.size();
    std::vector<double> acc(n, 0.0);
    std::vector<std::uint8_t> x1(n), x2(n);
    for (int b = 0; b < batch; ++b) {
        CounterRng rng(seed, static_cast<std::uint64_t>(b));
        for (std::size_t i = 0; i < n; ++i) {
            const int u = rng.sign();
            x1[i] = clip_byte(x[i] + u);
            x2[i] = clip_byte(x[i] - u);
        }
        const double df = f(x1) - f(x2);
        for (std::size_t i = 0; i < n; ++i) {
            const int d = static_cast<int>(x1[i]) - static_cast<int>(x2[i]);
            if (d != 0) acc[i] += df / d;
        }
    }
    for (auto& v : acc) v /= batch;
    return acc;
}

std::vector<double> zo_gradient(const ModelHandle& ref, const Prefix& x, const SelectionTask& task, int target,
                                const OptimizerConfig& cfg, std::uint64_t seed) {
    ref.require(AccessLevel::GrayBox, "zo_gradient");
    check_target(task, target);
    if (!x.is_pixels()) throw PreconditionError("zo_gradient needs a pixel prefix");
    const auto& grid = x.pixels();
    Prefix probe = x;
    auto f = [&](std::span<const std::uint8_t> v) {
        auto& d = std::get<PixelGrid>(probe.value).data;
        std::copy(v.begin(), v.end(), d.begin());
        const double p = candidate_distribution(ref, probe, task)[static_cast<std::size_t>(target)];
        return std::log(std::max(p, 1e-300));
    };
    return zo_estimate(f, grid.data, cfg.batch_vlm, seed);
}

Prefix initial_prefix(OptMode mode, const OptimizerConfig& cfg, int vocab_size, std::uint64_t seed) {
    CounterRng rng(seed);
    Prefix p;
    p.seed = seed;
    switch (mode) {
    case OptMode::Gcg: {
        TokenSeq t;
        t.tokens.resize(static_cast<std::size_t>(cfg.length));
        for (auto& v : t.tokens) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size)));
        p.value = std::move(t);
        break;
    }
    case OptMode::Genetic: {
        if (cfg.word_list.empty()) throw PreconditionError("empty word list");
        WordSeq w;
        w.words.resize(static_cast<std::size_t>(cfg.length));
        for (auto& v : w.words) v = cfg.word_list[rng.below(cfg.word_list.size())];
        p.value = std::move(w);
        break;
    }
    case OptMode::Pgd:
    case OptMode::ZoPgd: {
        PixelGrid g(cfg.height, cfg.width);
        for (auto& v : g.data) v = static_cast<std::uint8_t>(rng.below(256));
        p.value = std::move(g);
        break;
    }
    }
    return p;
}

namespace {

struct Optimized {
    Prefix prefix;
    std::vector<double> trace;
    double ref_prob = 0.0;
};

Optimized optimize_one(const ModelHandle& ref, const ModelHandle* unrelated, const SelectionTask& task, int target,
                       const OptimizerConfig& cfg, OptMode mode, std::uint64_t seed) {
    const bool text = mode == OptMode::Gcg || mode == OptMode::Genetic;
    const bool use_u = text && cfg.use_unrelated;
    OptimizerConfig c = cfg;
    c.use_unrelated = use_u;
    Optimized o;
    o.prefix = initial_prefix(mode, cfg, vocab_size_of(ref), seed);
    o.trace.reserve(static_cast<std::size_t>(cfg.rounds + 1));
    o.trace.push_back(objective(ref, unrelated, o.prefix, task, target, use_u));
    for (int r = 0; r < cfg.rounds; ++r) {
        switch (mode) {
        case OptMode::Gcg: {
            auto s = gcg_step(ref, unrelated, o.prefix, task, target, c);
            o.prefix = std::move(s.prefix);
            o.trace.push_back(s.objective);
            break;
        }
        case OptMode::Genetic: {
            auto s = genetic_step(ref, unrelated, o.prefix, task, target, c,
                                  derive_seed(seed, "probe.genetic", static_cast<std::uint64_t>(r)));
            o.prefix = std::move(s.prefix);
            o.trace.push_back(s.objective);
            break;
        }
        case OptMode::Pgd:
            o.prefix = pgd_step(ref, o.prefix, task, target);
            o.trace.push_back(objective(ref, nullptr, o.prefix, task, target, false));
            break;
        case OptMode::ZoPgd: {
            const auto g = zo_gradient(ref, o.prefix, task, target, c,
                                       derive_seed(seed, "probe.zo", static_cast<std::uint64_t>(r)));
            auto& px = std::get<PixelGrid>(o.prefix.value).data;
            for (std::size_t i = 0; i < px.size(); ++i)
                px[i] = clip_byte(px[i] + (g[i] > 0.0 ? 1 : (g[i] < 0.0 ? -1 : 0)));
            o.trace.push_back(objective(ref, nullptr, o.prefix, task, target, false));
            break;
        }
        }
    }
    o.ref_prob = use_u ? candidate_distribution(ref, o.prefix, task)[static_cast<std::size_t>(target)] : o.trace.back();
    o.prefix.seed = seed;
    return o;
}

}  // namespace

ProbeRun optimize_probe_set(const ModelHandle& ref, const ModelHandle* unrelated, const SelectionTask& task, int K,
                            std::span<const int> targets, const OptimizerConfig& cfg, OptMode mode,
                            const std::string& config_hash) {
    task.validate();
    cfg.validate();
    ref.require(required_level(mode), to_string(mode));
    if (K < 1) throw PreconditionError("K must be at least 1");
    if (!targets.empty() && static_cast<int>(targets.size()) != K)
        throw PreconditionError("targets must be empty or have K entries");
    for (const int t : targets) check_target(task, t);
    const bool text = mode == OptMode::Gcg || mode == OptMode::Genetic;
    if (text) check_unrelated(unrelated, cfg.use_unrelated);

    std::vector<int> tk(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        if (!targets.empty()) {
            tk[static_cast<std::size_t>(k)] = targets[static_cast<std::size_t>(k)];
        } else {
            CounterRng r(derive_seed(cfg.seed, "probe.target", static_cast<std::uint64_t>(k)));
            tk[static_cast<std::size_t>(k)] = static_cast<int>(r.below(static_cast<std::uint64_t>(task.size())));
        }
    }

    std::vector<Optimized> out(static_cast<std::size_t>(K));
    detail::parallel_for(static_cast<std::size_t>(K), cfg.workers, [&](std::size_t k) {
        out[k] = optimize_one(ref, unrelated, task, tk[k], cfg, mode,
                              derive_seed(cfg.seed, "probe.init", static_cast<std::uint64_t>(k)));
    });

    // Collision rule: a prefix equal to an earlier one is re-initialised and
    // re-optimised once; a remaining duplicate is recorded unresolved.
    ProbeRun run;
    auto first_equal = [&](std::size_t k) -> int {
        for (std::size_t j = 0; j < out.size(); ++j)
            if (j != k && out[j].prefix.same_payload(out[k].prefix)) return static_cast<int>(j);
        return -1;
    };
    for (std::size_t k = 1; k < out.size(); ++k) {
        int dup = -1;
        for (std::size_t j = 0; j < k; ++j)
            if (out[j].prefix.same_payload(out[k].prefix)) {
                dup = static_cast<int>(j);
                break;
            }
        if (dup < 0) continue;
        out[k] = optimize_one(ref, unrelated, task, tk[k], cfg, mode,
                              derive_seed(cfg.seed, "probe.reinit", static_cast<std::uint64_t>(k)));
        run.probes.collisions.push_back({static_cast<int>(k), dup, first_equal(k) < 0});
    }

    auto& ps = run.probes;
    ps.task = task;
    ps.targets = tk;
    for (auto& o : out) {
        ps.prefixes.push_back(std::move(o.prefix));
        ps.ref_probs.push_back(o.ref_prob);
        run.traces.push_back(std::move(o.trace));
    }
    ps.provenance = {ref.id(), ref.level(), to_string(mode), config_hash, utc_timestamp()};
    return run;
}

// ----------------------------------------------------------------------------
// Serialisation

void ProbeSet::validate() const {
    task.validate();
    if (prefixes.empty()) throw PreconditionError("probe set is empty");
    if (targets.size() != prefixes.size()) throw PreconditionError("probe set has mismatched prefix and target counts");
    if (!ref_probs.empty() && ref_probs.size() != prefixes.size())
        throw PreconditionError("probe set has mismatched reference probabilities");
    for (const int t : targets) check_target(task, t);
    for (const auto& p : prefixes) {
        if (p.is_pixels()) {
            const auto& g = p.pixels();
            if (g.height < 1 || g.width < 1 || g.data.size() != static_cast<std::size_t>(g.height) * g.width * 3)
                throw PreconditionError("pixel prefix has an inconsistent shape");
        }
    }
}

namespace {

json prefix_payload(const Prefix& p) {
    if (p.is_tokens()) return p.tokens().tokens;
    if (p.is_words()) return p.words().words;
    const auto& g = p.pixels();
    return json{{"height", g.height}, {"width", g.width}, {"data", base64_encode(g.data)}};
}

Prefix prefix_from(const std::string& tag, const json& payload, std::uint64_t seed) {
    Prefix p;
    p.seed = seed;
    if (tag == "tokens") {
        p.value = TokenSeq{payload.get<std::vector<int>>()};
    } else if (tag == "words") {
        p.value = WordSeq{payload.get<std::vector<std::string>>()};
    } else if (tag == "pixels") {
        PixelGrid g;
        g.height = payload.at("height").get<int>();
        g.width = payload.at("width").get<int>();
        g.data = base64_decode(payload.at("data").get<std::string>());
        p.value = std::move(g);
    } else {
        throw FormatError("unknown prefix variant '" + tag + "'");
    }
    return p;
}

}  // namespace

std::string to_json(const ProbeSet& ps) {
    ps.validate();
    json j;
    j["format"] = "rsp-probe-set";
    j["version"] = kProbeSetFormatVersion;
    j["task"] = {{"prompt", ps.task.prompt}, {"candidates", ps.task.candidates}};
    j["provenance"] = {{"reference", ps.provenance.reference_id},
                       {"access", to_string(ps.provenance.level)},
                       {"mode", ps.provenance.mode},
                       {"config_hash", ps.provenance.config_hash},
                       {"created", ps.provenance.created}};
    json recs = json::array();
    for (std::size_t k = 0; k < ps.prefixes.size(); ++k) {
        json r = {{"index", k},
                  {"target", ps.targets[k]},
                  {"variant", ps.prefixes[k].tag()},
                  {"seed", ps.prefixes[k].seed},
                  {"payload", prefix_payload(ps.prefixes[k])}};
        if (!ps.ref_probs.empty()) r["ref_prob"] = ps.ref_probs[k];
        recs.push_back(std::move(r));
    }
    j["prefixes"] = std::move(recs);
    json cols = json::array();
    for (const auto& c : ps.collisions)
        cols.push_back({{"index", c.index}, {"duplicate_of", c.duplicate_of}, {"resolved", c.resolved}});
    j["collisions"] = std::move(cols);
    return j.dump(2) + "\n";
}

ProbeSet probe_set_from_json(std::string_view text) {
    ProbeSet ps;
    try {
        const json j = json::parse(text);
        if (j.at("format").get<std::string>() != "rsp-probe-set") throw FormatError("not a probe set document");
        const int version = j.at("version").get<int>();
        if (version != kProbeSetFormatVersion)
            throw FormatError("unsupported probe set version " + std::to_string(version));
        ps.task.prompt = j.at("task").at("prompt").get<std::string>();
        ps.task.candidates = j.at("task").at("candidates").get<std::vector<std::string>>();
        const auto& pv = j.at("provenance");
        ps.provenance.reference_id = pv.at("reference").get<std::string>();
        ps.provenance.level = parse_access_level(pv.at("access").get<std::string>());
        ps.provenance.mode = pv.at("mode").get<std::string>();
        ps.provenance.config_hash = pv.at("config_hash").get<std::string>();
        ps.provenance.created = pv.at("created").get<std::string>();
        bool any_prob = false;
        for (const auto& r : j.at("prefixes")) {
            if (r.at("index").get<std::size_t>() != ps.prefixes.size()) throw FormatError("prefix records out of order");
            ps.prefixes.push_back(
                prefix_from(r.at("variant").get<std::string>(), r.at("payload"), r.at("seed").get<std::uint64_t>()));
            ps.targets.push_back(r.at("target").get<int>());
            if (r.contains("ref_prob")) {
                any_prob = true;
                ps.ref_probs.push_back(r["ref_prob"].get<double>());
            }
        }
        if (any_prob && ps.ref_probs.size() != ps.prefixes.size())
            throw FormatError("ref_prob present on some records only");
        for (const auto& c : j.at("collisions"))
            ps.collisions.push_back(
                {c.at("index").get<int>(), c.at("duplicate_of").get<int>(), c.at("resolved").get<bool>()});
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed probe set: ") + e.what());
    } catch (const PreconditionError& e) {
        throw FormatError(std::string("malformed probe set: ") + e.what());
    }
    try {
        ps.validate();
    } catch (const PreconditionError& e) {
        throw FormatError(std::string("invalid probe set: ") + e.what());
    }
    return ps;
}

void save_probe_set(const std::string& path, const ProbeSet& probes) { write_file(path, to_json(probes)); }

ProbeSet load_probe_set(const std::string& path) { return probe_set_from_json(read_file(path)); }

std::string probe_set_hash(const ProbeSet& probes) {
    ProbeSet copy = probes;
    copy.provenance.created.clear();
    return sha256_hex(to_json(copy));
}

}  // namespace rsp
