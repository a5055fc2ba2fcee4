#include "rsp/harness.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "parallel.hpp"
#include "report_json.hpp"
#include "rsp/error.hpp"
#include "rsp/io.hpp"
#include "rsp/rng.hpp"

#ifndef RSP_SOURCE_DATA_DIR
#define RSP_SOURCE_DATA_DIR ""
#endif
#ifndef RSP_INSTALL_DATA_DIR
#define RSP_INSTALL_DATA_DIR ""
#endif

namespace rsp {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

SelectionTask letter_task(char last) {
    SelectionTask t;
    t.prompt = std::string("\nQ pick a to ") + last + "\nA ";
    for (char c = 'a'; c <= last; ++c) t.candidates.emplace_back(1, c);
    return t;
}

std::string resolve(const std::string& base_dir, const std::string& path) {
    if (path.empty() || base_dir.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(base_dir) / path).lexically_normal().string();
}

template <class T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

json train_json(const micro::TrainOptions& o) {
    return {{"steps", o.steps},     {"lr", o.lr},       {"batch", o.batch},
            {"seq_len", o.seq_len}, {"beta1", o.beta1}, {"beta2", o.beta2},
            {"eps", o.eps},         {"holdout_fraction", o.holdout_fraction}, {"eval_windows", o.eval_windows}};
}

void train_from(const json& j, micro::TrainOptions& o) {
    take(j, "steps", o.steps);
    take(j, "lr", o.lr);
    take(j, "batch", o.batch);
    take(j, "seq_len", o.seq_len);
    take(j, "beta1", o.beta1);
    take(j, "beta2", o.beta2);
    take(j, "eps", o.eps);
    take(j, "holdout_fraction", o.holdout_fraction);
    take(j, "eval_windows", o.eval_windows);
}

const char* mode_name(RemoteEndpoint::Mode m) { return m == RemoteEndpoint::Mode::Logprob ? "logprob" : "chat"; }

std::string fmt_fixed(double v, int digits) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(digits) << v;
    return ss.str();
}

std::string render_table(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& r : rows) {
        if (width.size() < r.size()) width.resize(r.size(), 0);
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    std::ostringstream ss;
    for (std::size_t ri = 0; ri < rows.size(); ++ri) {
        const auto& r = rows[ri];
        for (std::size_t i = 0; i < r.size(); ++i) {
            ss << r[i];
            if (i + 1 < r.size()) ss << std::string(width[i] - r[i].size() + 2, ' ');
        }
        ss << "\n";
        if (ri == 0) {
            std::size_t total = 0;
            for (std::size_t i = 0; i < width.size(); ++i) total += width[i] + (i + 1 < width.size() ? 2 : 0);
            ss << std::string(total, '-') << "\n";
        }
    }
    return ss.str();
}

}  // namespace

// ----------------------------------------------------------------------------
// RunConfig

std::string default_word_list_path() {
    if (const char* env = std::getenv("RSP_DATA_DIR")) return (fs::path(env) / "words.txt").string();
    for (const char* dir : {RSP_SOURCE_DATA_DIR, RSP_INSTALL_DATA_DIR}) {
        if (*dir == '\0') continue;
        const auto p = fs::path(dir) / "words.txt";
        if (fs::exists(p)) return p.string();
    }
    return "data/words.txt";
}

RunConfig RunConfig::desk() {
    RunConfig c;
    c.profile = "desk";
    c.task = letter_task('j');
    c.zoo.pretrain.steps = 2000;
    c.zoo.pretrain.lr = 3e-3;
    c.zoo.finetune.steps = 100;
    c.zoo.finetune.lr = 3e-4;
    c.zoo.models = {
        {"ref", "reference", "", "chat", 1, 11},
        {"ft-math", "finetuned", "ref", "math", 2, 0},
        {"ft-instruct", "finetuned", "ref", "instruct", 3, 0},
        {"un-a", "unrelated", "", "instruct", 5, 55},
        {"un-b", "unrelated", "", "math", 7, 77},
        {"aux", "auxiliary", "", "chat", 6, 66},
    };
    c.optimizer.length = 20;
    c.optimizer.height = 16;
    c.optimizer.width = 16;
    c.optimizer.k_topk = 3;
    c.optimizer.batch_llm = 8;
    c.optimizer.batch_vlm = 8;
    c.optimizer.p_mutate = 0.1;
    c.optimizer.seed = 1;
    c.K = 100;
    c.rounds_gradient = 50;
    c.rounds_logits = 300;
    c.detect.T = 50;
    c.detect.seed = 2;
    return c;
}

RunConfig RunConfig::full() {
    RunConfig c = desk();
    c.profile = "full";
    c.task = letter_task('z');
    c.K = 500;
    c.optimizer.length = 50;
    c.optimizer.height = 280;
    c.optimizer.width = 280;
    c.zoo.vision = {280, 280, 40};
    c.optimizer.batch_llm = 32;
    c.optimizer.batch_vlm = 32;
    c.rounds_gradient = 100;
    c.rounds_logits = 1000;
    c.detect.T = 100;
    return c;
}

RunConfig RunConfig::from_json(std::string_view text, const std::string& base_dir) {
    RunConfig c;
    try {
        const json j = json::parse(text);
        const std::string profile = j.value("profile", std::string("desk"));
        if (profile == "desk") {
            c = desk();
        } else if (profile == "full") {
            c = full();
        } else {
            throw PreconditionError("unknown profile '" + profile + "'");
        }
        if (j.contains("task")) {
            take(j["task"], "prompt", c.task.prompt);
            take(j["task"], "candidates", c.task.candidates);
        }
        if (j.contains("zoo")) {
            const auto& z = j["zoo"];
            if (z.contains("model")) {
                const auto& m = z["model"];
                take(m, "vocab_size", c.zoo.model.vocab_size);
                take(m, "d_model", c.zoo.model.d_model);
                take(m, "n_layers", c.zoo.model.n_layers);
                take(m, "n_heads", c.zoo.model.n_heads);
                take(m, "context", c.zoo.model.context);
                take(m, "d_ff", c.zoo.model.d_ff);
            }
            if (z.contains("vision")) {
                take(z["vision"], "height", c.zoo.vision.height);
                take(z["vision"], "width", c.zoo.vision.width);
                take(z["vision"], "patch", c.zoo.vision.patch);
            }
            take(z, "corpus_bytes", c.zoo.corpus_bytes);
            if (z.contains("pretrain")) train_from(z["pretrain"], c.zoo.pretrain);
            if (z.contains("finetune")) train_from(z["finetune"], c.zoo.finetune);
            take(z, "pretrain_selection_rate", c.zoo.pretrain_selection_rate);
            take(z, "finetune_selection_rate", c.zoo.finetune_selection_rate);
            if (z.contains("models")) {
                c.zoo.models.clear();
                for (const auto& m : z["models"]) {
                    ZooModelSpec s;
                    s.id = m.at("id").get<std::string>();
                    s.role = m.at("role").get<std::string>();
                    take(m, "parent", s.parent);
                    take(m, "style", s.style);
                    take(m, "seed", s.seed);
                    take(m, "rule_seed", s.rule_seed);
                    c.zoo.models.push_back(std::move(s));
                }
            }
        }
        if (j.contains("optimizer")) {
            const auto& o = j["optimizer"];
            take(o, "K", c.K);
            take(o, "rounds_gradient", c.rounds_gradient);
            take(o, "rounds_logits", c.rounds_logits);
            take(o, "length", c.optimizer.length);
            take(o, "height", c.optimizer.height);
            take(o, "width", c.optimizer.width);
            take(o, "k_topk", c.optimizer.k_topk);
            take(o, "batch_llm", c.optimizer.batch_llm);
            take(o, "batch_vlm", c.optimizer.batch_vlm);
            take(o, "p_mutate", c.optimizer.p_mutate);
            take(o, "include_current", c.optimizer.include_current);
            take(o, "use_unrelated", c.optimizer.use_unrelated);
            take(o, "unrelated_id", c.unrelated_id);
            take(o, "seed", c.optimizer.seed);
            take(o, "word_list", c.word_list_path);
        }
        if (j.contains("detect")) {
            const auto& d = j["detect"];
            take(d, "T", c.detect.T);
            take(d, "alpha", c.detect.alpha);
            take(d, "seed", c.detect.seed);
            take(d, "target_temperature", c.detect.target_temperature);
        }
        if (j.contains("ablate")) {
            const auto& a = j["ablate"];
            take(a, "samples", c.ablate.samples);
            take(a, "p_mutate", c.ablate.p_mutate);
            take(a, "prefix_length", c.ablate.prefix_length);
            take(a, "resolution", c.ablate.resolution);
            take(a, "targets", c.ablate.targets);
        }
        take(j, "output_dir", c.output_dir);
        take(j, "workers", c.workers);
        if (j.contains("remotes")) {
            for (const auto& [name, r] : j["remotes"].items()) {
                RemoteEndpoint e;
                e.base_url = r.at("base_url").get<std::string>();
                take(r, "path", e.path);
                take(r, "model", e.model);
                take(r, "auth_env", e.auth_env);
                const std::string mode = r.value("mode", std::string("chat"));
                if (mode == "chat") {
                    e.mode = RemoteEndpoint::Mode::ChatText;
                } else if (mode == "logprob") {
                    e.mode = RemoteEndpoint::Mode::Logprob;
                } else {
                    throw PreconditionError("remote '" + name + "': mode must be chat or logprob");
                }
                take(r, "timeout_s", e.timeout_s);
                take(r, "max_retries", e.max_retries);
                take(r, "backoff_s", e.backoff_s);
                take(r, "max_in_flight", e.max_in_flight);
                take(r, "rate_per_s", e.rate_per_s);
                take(r, "burst", e.burst);
                take(r, "alphabet", e.alphabet);
                c.remotes[name] = std::move(e);
            }
        }
    } catch (const json::exception& e) {
        throw PreconditionError(std::string("malformed config: ") + e.what());
    }
    c.output_dir = resolve(base_dir, c.output_dir);
    c.word_list_path = resolve(base_dir, c.word_list_path);
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    return from_json(read_file(path), fs::path(path).parent_path().string());
}

std::string RunConfig::to_json() const {
    json models = json::array();
    for (const auto& m : zoo.models)
        models.push_back({{"id", m.id}, {"role", m.role}, {"parent", m.parent}, {"style", m.style}, {"seed", m.seed},
                          {"rule_seed", m.rule_seed}});
    json remotes_j = json::object();
    for (const auto& [name, e] : remotes)
        remotes_j[name] = {{"base_url", e.base_url},       {"path", e.path},
                           {"model", e.model},             {"auth_env", e.auth_env},       {"mode", mode_name(e.mode)},
                           {"timeout_s", e.timeout_s},     {"max_retries", e.max_retries},
                           {"backoff_s", e.backoff_s},     {"max_in_flight", e.max_in_flight},
                           {"rate_per_s", e.rate_per_s},   {"burst", e.burst},
                           {"alphabet", e.alphabet}};
    const json j = {
        {"profile", profile},
        {"task", {{"prompt", task.prompt}, {"candidates", task.candidates}}},
        {"zoo",
         {{"model",
           {{"vocab_size", zoo.model.vocab_size},
            {"d_model", zoo.model.d_model},
            {"n_layers", zoo.model.n_layers},
            {"n_heads", zoo.model.n_heads},
            {"context", zoo.model.context},
            {"d_ff", zoo.model.d_ff}}},
          {"vision", {{"height", zoo.vision.height}, {"width", zoo.vision.width}, {"patch", zoo.vision.patch}}},
          {"corpus_bytes", zoo.corpus_bytes},
          {"pretrain", train_json(zoo.pretrain)},
          {"finetune", train_json(zoo.finetune)},
          {"pretrain_selection_rate", zoo.pretrain_selection_rate},
          {"finetune_selection_rate", zoo.finetune_selection_rate},
          {"models", models}}},
        {"optimizer",
         {{"K", K},
          {"rounds_gradient", rounds_gradient},
          {"rounds_logits", rounds_logits},
          {"length", optimizer.length},
          {"height", optimizer.height},
          {"width", optimizer.width},
          {"k_topk", optimizer.k_topk},
          {"batch_llm", optimizer.batch_llm},
          {"batch_vlm", optimizer.batch_vlm},
          {"p_mutate", optimizer.p_mutate},
          {"include_current", optimizer.include_current},
          {"use_unrelated", optimizer.use_unrelated},
          {"unrelated_id", unrelated_id},
          {"seed", optimizer.seed},
          {"word_list", word_list_path}}},
        {"detect",
         {{"T", detect.T}, {"alpha", detect.alpha}, {"seed", detect.seed},
          {"target_temperature", detect.target_temperature}}},
        {"ablate",
         {{"samples", ablate.samples},
          {"p_mutate", ablate.p_mutate},
          {"prefix_length", ablate.prefix_length},
          {"resolution", ablate.resolution},
          {"targets", ablate.targets}}},
        {"output_dir", output_dir},
        {"workers", workers},
        {"remotes", remotes_j}};
    return j.dump(2) + "\n";
}

std::string RunConfig::hash() const {
    // The output directory and worker count do not affect results.
    RunConfig c = *this;
    c.output_dir.clear();
    c.workers = 0;
    return sha256_hex(c.to_json());
}

void RunConfig::validate() const {
    task.validate();
    zoo.model.validate();
    zoo.vision.validate();
    if (K < 1) throw PreconditionError("optimizer.K must be at least 1");
    if (rounds_gradient < 1 || rounds_logits < 1) throw PreconditionError("optimizer rounds must be at least 1");
    OptimizerConfig o = optimizer;
    o.rounds = 1;
    o.validate();
    if (detect.T < 1) throw PreconditionError("detect.T must be at least 1");
    if (!(detect.alpha > 0.0 && detect.alpha < 1.0)) throw PreconditionError("detect.alpha must lie in (0, 1)");
    if (!(detect.target_temperature >= 0.0)) throw PreconditionError("detect.target_temperature must be non-negative");
    if (zoo.corpus_bytes < 1000) throw PreconditionError("zoo.corpus_bytes must be at least 1000");
    if (zoo.pretrain.steps < 1 || zoo.finetune.steps < 1) throw PreconditionError("zoo training steps must be at least 1");
    std::set<std::string> ids;
    int refs = 0;
    for (const auto& m : zoo.models) {
        if (m.id.empty() || m.id.rfind("remote:", 0) == 0) throw PreconditionError("invalid zoo model id '" + m.id + "'");
        if (!ids.insert(m.id).second) throw PreconditionError("duplicate zoo model id '" + m.id + "'");
        if (m.role == "reference") {
            ++refs;
        } else if (m.role == "finetuned") {
            if (m.parent.empty()) throw PreconditionError("finetuned model '" + m.id + "' has no parent");
        } else if (m.role != "unrelated" && m.role != "auxiliary") {
            throw PreconditionError("zoo model '" + m.id + "' has unknown role '" + m.role + "'");
        }
        const auto styles = micro::corpus_styles();
        if (std::find(styles.begin(), styles.end(), m.style) == styles.end())
            throw PreconditionError("zoo model '" + m.id + "' has unknown style '" + m.style + "'");
    }
    if (!zoo.models.empty() && refs != 1) throw PreconditionError("the zoo needs exactly one reference model");
    for (const auto& m : zoo.models)
        if (m.role == "finetuned" && !ids.count(m.parent))
            throw PreconditionError("finetuned model '" + m.id + "' names missing parent '" + m.parent + "'");
    for (const auto& [name, e] : remotes)
        if (e.base_url.empty()) throw PreconditionError("remote '" + name + "' has no base_url");
    if (optimizer.use_unrelated) {
        const bool remote = unrelated_id.rfind("remote:", 0) == 0;
        const bool known = remote ? remotes.count(unrelated_id.substr(7)) > 0 : ids.count(unrelated_id) > 0;
        if (!known) throw PreconditionError("unrelated_id '" + unrelated_id + "' names no zoo model or remote");
    }
}

OptimizerConfig RunConfig::optimizer_for(OptMode mode) const {
    OptimizerConfig o = optimizer;
    o.rounds = (mode == OptMode::Gcg || mode == OptMode::Pgd) ? rounds_gradient : rounds_logits;
    o.workers = workers;
    if (mode == OptMode::Genetic) o.word_list = word_list();
    return o;
}

std::vector<std::string> RunConfig::word_list() const {
    return load_word_list(word_list_path.empty() ? default_word_list_path() : word_list_path);
}

// ----------------------------------------------------------------------------
// Zoo

const ZooEntry& ZooManifest::find(const std::string& id) const {
    for (const auto& e : entries)
        if (e.id == id) return e;
    throw PreconditionError("model '" + id + "' is not in the zoo");
}

const ZooEntry& ZooManifest::reference() const {
    for (const auto& e : entries)
        if (e.role == "reference") return e;
    throw PreconditionError("the zoo has no reference model");
}

void ZooManifest::validate(bool check_files) const {
    int refs = 0;
    std::set<std::string> ids;
    for (const auto& e : entries) {
        if (!ids.insert(e.id).second) throw PreconditionError("duplicate zoo entry '" + e.id + "'");
        if (e.role == "reference") ++refs;
    }
    if (refs != 1) throw PreconditionError("a zoo manifest needs exactly one reference");
    for (const auto& e : entries) {
        if (e.role == "finetuned" && (e.parent.empty() || !ids.count(e.parent)))
            throw PreconditionError("finetuned entry '" + e.id + "' lacks an existing parent");
        if (!check_files) continue;
        for (const auto& [rel, digest] : {std::pair{e.checkpoint, e.checkpoint_sha256}, {e.vision_checkpoint, e.vision_sha256}}) {
            const auto path = resolve(directory, rel);
            if (!fs::exists(path)) throw PreconditionError("checkpoint '" + path + "' is missing");
            if (sha256_hex(read_file(path)) != digest) throw PreconditionError("checkpoint '" + path + "' does not match its digest");
            (void)micro::load_checkpoint(path);
        }
    }
}

micro::MicroLM ZooManifest::load_lm(const std::string& id) const {
    auto m = micro::load_checkpoint(resolve(directory, find(id).checkpoint));
    if (!std::holds_alternative<micro::MicroLM>(m)) throw FormatError("checkpoint of '" + id + "' is not a language model");
    return std::get<micro::MicroLM>(std::move(m));
}

micro::MicroVLM ZooManifest::load_vlm(const std::string& id) const {
    auto m = micro::load_checkpoint(resolve(directory, find(id).vision_checkpoint));
    if (!std::holds_alternative<micro::MicroVLM>(m)) throw FormatError("vision checkpoint of '" + id + "' is not a vision model");
    return std::get<micro::MicroVLM>(std::move(m));
}

std::string ZooManifest::to_json() const {
    json es = json::array();
    for (const auto& e : entries)
        es.push_back({{"id", e.id},
                      {"role", e.role},
                      {"parent", e.parent.empty() ? json(nullptr) : json(e.parent)},
                      {"corpus", e.corpus},
                      {"seed", e.seed},
                      {"rule_seed", e.rule_seed},
                      {"checkpoint", e.checkpoint},
                      {"checkpoint_sha256", e.checkpoint_sha256},
                      {"vision_checkpoint", e.vision_checkpoint},
                      {"vision_sha256", e.vision_sha256}});
    const json j = {{"format", "rsp-zoo-manifest"},
                    {"version", 1},
                    {"config_hash", config_hash},
                    {"created", created},
                    {"entries", es}};
    return j.dump(2) + "\n";
}

ZooManifest ZooManifest::from_json(std::string_view text, const std::string& directory) {
    ZooManifest m;
    m.directory = directory;
    try {
        const json j = json::parse(text);
        if (j.at("format").get<std::string>() != "rsp-zoo-manifest") throw FormatError("not a zoo manifest");
        m.config_hash = j.at("config_hash").get<std::string>();
        m.created = j.at("created").get<std::string>();
        for (const auto& e : j.at("entries")) {
            ZooEntry z;
            z.id = e.at("id").get<std::string>();
            z.role = e.at("role").get<std::string>();
            if (!e.at("parent").is_null()) z.parent = e["parent"].get<std::string>();
            z.corpus = e.at("corpus").get<std::string>();
            z.seed = e.at("seed").get<std::uint64_t>();
            z.rule_seed = e.at("rule_seed").get<std::uint64_t>();
            z.checkpoint = e.at("checkpoint").get<std::string>();
            z.checkpoint_sha256 = e.at("checkpoint_sha256").get<std::string>();
            z.vision_checkpoint = e.at("vision_checkpoint").get<std::string>();
            z.vision_sha256 = e.at("vision_sha256").get<std::string>();
            m.entries.push_back(std::move(z));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed zoo manifest: ") + e.what());
    }
    m.validate(false);
    return m;
}

ZooManifest ZooManifest::load(const std::string& path) {
    return from_json(read_file(path), fs::path(path).parent_path().string());
}

void ZooManifest::save(const std::string& path) const { write_file(path, to_json()); }

std::string zoo_manifest_path(const RunConfig& cfg) { return (fs::path(cfg.output_dir) / "zoo" / "manifest.json").string(); }

ZooManifest cmd_zoo_build(const RunConfig& cfg, std::ostream* log) {
    cfg.validate();
    if (cfg.zoo.models.empty()) throw PreconditionError("the zoo configuration lists no models");
    const fs::path dir = fs::path(cfg.output_dir) / "zoo";
    fs::create_directories(dir);
    const auto vocab = micro::Vocab::default_chars();
    const auto& specs = cfg.zoo.models;

    auto corpus_for = [&](const ZooModelSpec& s, bool pretrain) {
        micro::SelectionRule rule;
        if (pretrain) rule.rule_seed = s.rule_seed;
        return micro::synthetic_corpus(s.style, cfg.task.prompt, cfg.task.candidates, s.seed, cfg.zoo.corpus_bytes,
                                       pretrain ? cfg.zoo.pretrain_selection_rate : cfg.zoo.finetune_selection_rate,
                                       rule);
    };

    std::vector<std::optional<micro::MicroLM>> lms(specs.size());
    std::vector<std::size_t> roots;
    for (std::size_t i = 0; i < specs.size(); ++i)
        if (specs[i].role != "finetuned") roots.push_back(i);
    detail::parallel_for(roots.size(), cfg.workers, [&](std::size_t r) {
        const auto& s = specs[roots[r]];
        lms[roots[r]] = micro::train(s.seed, corpus_for(s, true), cfg.zoo.pretrain, cfg.zoo.model, vocab);
    });
    if (log)
        for (const auto i : roots) *log << "trained " << specs[i].id << " (" << specs[i].role << ")\n";
    // Children after their parents; parents may themselves be finetuned.
    std::vector<bool> done(specs.size(), false);
    for (const auto i : roots) done[i] = true;
    for (bool progress = true; progress;) {
        progress = false;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            if (done[i]) continue;
            const auto p = static_cast<std::size_t>(
                std::find_if(specs.begin(), specs.end(), [&](const ZooModelSpec& m) { return m.id == specs[i].parent; }) -
                specs.begin());
            if (!done[p]) continue;
            lms[i] = micro::finetune(*lms[p], corpus_for(specs[i], false), cfg.zoo.finetune);
            done[i] = true;
            progress = true;
            if (log) *log << "finetuned " << specs[i].id << " from " << specs[i].parent << "\n";
        }
    }

    std::vector<std::optional<micro::MicroVLM>> vlms(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].role == "finetuned") continue;
        vlms[i].emplace(*lms[i], cfg.zoo.vision, derive_seed(specs[i].seed, "zoo.projector"));
    }
    // Finetuned children keep their parent's projector.
    for (bool progress = true; progress;) {
        progress = false;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            if (vlms[i]) continue;
            const auto p = static_cast<std::size_t>(
                std::find_if(specs.begin(), specs.end(), [&](const ZooModelSpec& m) { return m.id == specs[i].parent; }) -
                specs.begin());
            if (!vlms[p]) continue;
            const auto& pv = *vlms[p];
            vlms[i].emplace(*lms[i], cfg.zoo.vision, pv.projector_seed(),
                            std::vector<double>(pv.projector().begin(), pv.projector().end()));
            progress = true;
        }
    }

    ZooManifest m;
    m.directory = dir.string();
    m.config_hash = cfg.hash();
    m.created = utc_timestamp();
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        ZooEntry e;
        e.id = s.id;
        e.role = s.role;
        e.parent = s.parent;
        e.corpus = s.style + "-" + std::to_string(s.seed);
        e.seed = s.seed;
        e.rule_seed = s.role == "finetuned" ? 0 : s.rule_seed;
        e.checkpoint = s.id + ".ckpt";
        e.vision_checkpoint = s.id + ".vlm.ckpt";
        micro::save_checkpoint((dir / e.checkpoint).string(), *lms[i]);
        micro::save_checkpoint((dir / e.vision_checkpoint).string(), *vlms[i]);
        e.checkpoint_sha256 = sha256_hex(read_file((dir / e.checkpoint).string()));
        e.vision_sha256 = sha256_hex(read_file((dir / e.vision_checkpoint).string()));
        m.entries.push_back(std::move(e));
    }
    m.validate(true);
    m.save((dir / "manifest.json").string());
    if (log) *log << "wrote " << (dir / "manifest.json").string() << "\n";
    return m;
}

ModelHandle open_model(const RunConfig& cfg, const ZooManifest& zoo, const std::string& id, AccessLevel level,
                       bool vision, LocalOptions options) {
    if (id.rfind("remote:", 0) == 0) {
        const auto name = id.substr(7);
        const auto it = cfg.remotes.find(name);
        if (it == cfg.remotes.end()) throw PreconditionError("no remote endpoint named '" + name + "' in the config");
        if (vision) throw CapabilityError("remote endpoints take textual prefixes only");
        return open_remote(id, it->second, level);
    }
    if (vision) {
        auto v = zoo.load_vlm(id);
        if (v.vision().height != cfg.optimizer.height || v.vision().width != cfg.optimizer.width) {
            // The patch projector is resolution independent.
            micro::VisionConfig vc{cfg.optimizer.height, cfg.optimizer.width, v.vision().patch};
            v = micro::MicroVLM(v.base(), vc, v.projector_seed(),
                                std::vector<double>(v.projector().begin(), v.projector().end()));
        }
        return open_local(id, std::move(v), level, options);
    }
    return open_local(id, zoo.load_lm(id), level, options);
}

// ----------------------------------------------------------------------------
// Commands

ProbeOutcome cmd_probe(const RunConfig& cfg, const ZooManifest& zoo, const std::string& ref_id, OptMode mode,
                       std::optional<AccessLevel> access, const std::string& out_path, std::ostream* log) {
    cfg.validate();
    const bool pixels = mode == OptMode::Pgd || mode == OptMode::ZoPgd;
    const auto ref = open_model(cfg, zoo, ref_id, access.value_or(required_level(mode)), pixels);
    const auto ocfg = cfg.optimizer_for(mode);
    std::optional<ModelHandle> unrelated;
    if (!pixels && ocfg.use_unrelated) unrelated = open_model(cfg, zoo, cfg.unrelated_id, AccessLevel::GrayBox, false);

    ProbeOutcome out;
    out.run = optimize_probe_set(ref, unrelated ? &*unrelated : nullptr, cfg.task, cfg.K, {}, ocfg, mode, cfg.hash());
    const auto& rp = out.run.probes.ref_probs;
    out.mean_ref_prob = std::accumulate(rp.begin(), rp.end(), 0.0) / static_cast<double>(rp.size());
    out.path = out_path.empty()
                   ? (fs::path(cfg.output_dir) / "probes" / (ref_id + "-" + to_string(mode) + ".json")).string()
                   : out_path;
    save_probe_set(out.path, out.run.probes);
    if (log) {
        *log << "probe set " << out.path << ": K=" << out.run.probes.size() << " mode=" << to_string(mode)
             << " mean P_ref(target)=" << fmt_fixed(out.mean_ref_prob, 4) << "\n";
        for (const auto& c : out.run.probes.collisions)
            *log << "collision: prefix " << c.index << " equalled prefix " << c.duplicate_of
                 << (c.resolved ? " (re-initialised)" : " (unresolved)") << "\n";
    }
    return out;
}

TestReport evaluate(const RunConfig& cfg, const ModelHandle& target, const ProbeSet& probes, AccessMode access) {
    if (access == AccessMode::Gray) {
        const auto obs = observed_statistic_gray(target, probes, cfg.workers);
        return make_report(probes, target.id(), obs, access, std::nullopt, cfg.detect.alpha, cfg.hash());
    }
    const auto obs = observed_statistic_black(target, probes, cfg.detect.T, derive_seed(cfg.detect.seed, target.id()),
                                              cfg.workers);
    return make_report(probes, target.id(), obs, access, cfg.detect.T, cfg.detect.alpha, cfg.hash());
}

DetectionMatrix cmd_detect(const RunConfig& cfg, const ZooManifest& zoo, const std::vector<std::string>& probe_paths,
                           const std::vector<std::string>& targets, AccessMode access, const std::string& out_stem,
                           std::ostream* log) {
    cfg.validate();
    DetectionMatrix mx;
    mx.targets = targets;
    mx.access = access;
    mx.config_hash = cfg.hash();
    mx.created = utc_timestamp();
    const AccessLevel level = access == AccessMode::Gray ? AccessLevel::GrayBox : AccessLevel::BlackBox;
    const LocalOptions opts{cfg.detect.target_temperature};
    for (const auto& path : probe_paths) {
        const auto probes = load_probe_set(path);
        DetectionMatrix::Row row{path, probe_set_hash(probes), probes.provenance.reference_id, probes.provenance.mode,
                                 static_cast<int>(probes.size()), probes.task.size()};
        std::vector<MatrixCell> cells;
        for (const auto& t : targets) {
            MatrixCell cell;
            try {
                const auto h = open_model(cfg, zoo, t, level, probes.prefixes.front().is_pixels(), opts);
                cell.report = evaluate(cfg, h, probes, access);
                if (log)
                    *log << row.reference << "/" << row.mode << " vs " << t << ": x_obs=" << cell.report->x_obs << "/"
                         << cell.report->K << " p=" << format_p(cell.report->p_value) << "\n";
            } catch (const std::exception& e) {
                cell.error = e.what();
                if (log) *log << row.reference << "/" << row.mode << " vs " << t << ": error: " << e.what() << "\n";
            }
            cells.push_back(std::move(cell));
        }
        mx.rows.push_back(std::move(row));
        mx.cells.push_back(std::move(cells));
    }
    std::string stem = out_stem;
    if (stem.empty()) {
        stem = probe_paths.empty() ? std::string("empty") : fs::path(probe_paths.front()).stem().string();
        stem += std::string("-") + to_string(access);
    }
    const auto base = fs::path(cfg.output_dir) / "detect" / stem;
    write_file(base.string() + ".json", mx.to_json());
    write_file(base.string() + ".txt", mx.to_table());
    return mx;
}

std::string DetectionMatrix::to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows)
        rows_j.push_back({{"probes", r.probes_path},
                          {"probes_hash", r.probes_hash},
                          {"reference", r.reference},
                          {"mode", r.mode},
                          {"K", r.K},
                          {"N", r.N}});
    json cells_j = json::array();
    for (const auto& row : cells) {
        json rj = json::array();
        for (const auto& c : row) rj.push_back(c.report ? detail::report_to_json(*c.report) : json{{"error", c.error}});
        cells_j.push_back(std::move(rj));
    }
    const json j = {{"format", "rsp-detection-matrix"},
                    {"version", 1},
                    {"access", rsp::to_string(access)},
                    {"config_hash", config_hash},
                    {"created", created},
                    {"rows", rows_j},
                    {"targets", targets},
                    {"cells", cells_j}};
    return j.dump(2) + "\n";
}

DetectionMatrix DetectionMatrix::from_json(std::string_view text) {
    DetectionMatrix m;
    try {
        const json j = json::parse(text);
        if (j.at("format").get<std::string>() != "rsp-detection-matrix") throw FormatError("not a detection matrix");
        m.access = parse_access_mode(j.at("access").get<std::string>());
        m.config_hash = j.at("config_hash").get<std::string>();
        m.created = j.at("created").get<std::string>();
        m.targets = j.at("targets").get<std::vector<std::string>>();
        for (const auto& r : j.at("rows"))
            m.rows.push_back({r.at("probes").get<std::string>(), r.at("probes_hash").get<std::string>(),
                              r.at("reference").get<std::string>(), r.at("mode").get<std::string>(),
                              r.at("K").get<int>(), r.at("N").get<int>()});
        for (const auto& rj : j.at("cells")) {
            std::vector<MatrixCell> row;
            for (const auto& c : rj) {
                MatrixCell cell;
                if (c.contains("error")) {
                    cell.error = c["error"].get<std::string>();
                } else {
                    cell.report = detail::report_from_json(c);
                }
                row.push_back(std::move(cell));
            }
            m.cells.push_back(std::move(row));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed detection matrix: ") + e.what());
    }
    return m;
}

std::string DetectionMatrix::to_table() const {
    std::vector<std::vector<std::string>> t;
    std::vector<std::string> head{"probes (" + std::string(rsp::to_string(access)) + ")"};
    for (const auto& tg : targets) head.push_back(tg);
    t.push_back(head);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::vector<std::string> r{rows[i].reference + "/" + rows[i].mode};
        for (const auto& c : cells[i]) {
            if (c.report) {
                r.push_back(format_p(c.report->p_value) + " (" + std::to_string(c.report->x_obs) + "/" +
                            std::to_string(c.report->K) + ")");
            } else {
                r.push_back("error");
            }
        }
        t.push_back(std::move(r));
    }
    return render_table(t);
}

namespace {

std::vector<std::string> default_targets(const RunConfig& cfg, const ZooManifest& zoo,
                                         const std::vector<std::string>& given) {
    if (!given.empty()) return given;
    if (!cfg.ablate.targets.empty()) return cfg.ablate.targets;
    std::vector<std::string> out;
    for (const auto& e : zoo.entries)
        if (e.role == "finetuned" || e.role == "unrelated") out.push_back(e.id);
    return out;
}

std::string setting_text(double v) {
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

}  // namespace

AblationReport cmd_ablate(const RunConfig& cfg, const ZooManifest& zoo, const std::string& sweep,
                          const std::string& probes_path, const std::vector<std::string>& targets, AccessMode access,
                          std::ostream* log) {
    cfg.validate();
    AblationReport rep;
    rep.sweep = sweep;
    rep.config_hash = cfg.hash();
    const auto tgts = default_targets(cfg, zoo, targets);
    const AccessLevel level = access == AccessMode::Gray ? AccessLevel::GrayBox : AccessLevel::BlackBox;
    const LocalOptions opts{cfg.detect.target_temperature};
    const fs::path dir = fs::path(cfg.output_dir) / "ablate";

    auto add_rows = [&](const std::string& setting, const ProbeSet& probes) {
        for (const auto& t : tgts) {
            const auto h = open_model(cfg, zoo, t, level, probes.prefixes.front().is_pixels(), opts);
            const auto r = evaluate(cfg, h, probes, access);
            rep.rows.push_back({sweep, setting, t, r.K, r.x_obs, r.p_value, static_cast<double>(r.x_obs) / r.K});
            if (log) *log << sweep << " " << setting << " vs " << t << ": " << r.x_obs << "/" << r.K << " p=" << format_p(r.p_value) << "\n";
        }
    };
    const std::string ref = zoo.reference().id;

    if (sweep == "samples") {
        if (probes_path.empty()) throw PreconditionError("the samples sweep needs --probes");
        const auto probes = load_probe_set(probes_path);
        for (const int k : cfg.ablate.samples)
            if (k < 1 || k > static_cast<int>(probes.size()))
                throw PreconditionError("sample count " + std::to_string(k) + " outside [1, K]");
        for (const auto& t : tgts) {
            const auto h = open_model(cfg, zoo, t, level, probes.prefixes.front().is_pixels(), opts);
            const auto r = evaluate(cfg, h, probes, access);
            for (const int k : cfg.ablate.samples) {
                const auto tail = tail_for_prefix_count(r.ledger, k, r.N);
                int hits = 0;
                for (int i = 0; i < k; ++i) hits += r.ledger[static_cast<std::size_t>(i)].hit ? 1 : 0;
                rep.rows.push_back({sweep, "k=" + std::to_string(k), t, k, hits, tail.p, static_cast<double>(hits) / k});
            }
        }
    } else if (sweep == "p_mutate") {
        for (const double v : cfg.ablate.p_mutate) {
            if (!(v >= 0.0 && v <= 1.0)) throw PreconditionError("p_mutate sweep value outside [0, 1]");
            RunConfig c = cfg;
            c.optimizer.p_mutate = v;
            const auto out = cmd_probe(c, zoo, ref, OptMode::Genetic, std::nullopt,
                                       (dir / ("p_mutate-" + setting_text(v) + ".json")).string(), log);
            add_rows("p_mutate=" + setting_text(v), out.run.probes);
        }
    } else if (sweep == "prefix_length") {
        for (const int L : cfg.ablate.prefix_length) {
            if (L < 1) throw PreconditionError("prefix length sweep value must be positive");
            RunConfig c = cfg;
            c.optimizer.length = L;
            const auto out = cmd_probe(c, zoo, ref, OptMode::Gcg, std::nullopt,
                                       (dir / ("prefix_length-" + std::to_string(L) + ".json")).string(), log);
            add_rows("L=" + std::to_string(L), out.run.probes);
        }
    } else if (sweep == "resolution") {
        for (const int r : cfg.ablate.resolution) {
            if (r < 1 || r % cfg.zoo.vision.patch != 0)
                throw PreconditionError("resolution sweep values must be positive multiples of the patch size");
            RunConfig c = cfg;
            c.optimizer.height = r;
            c.optimizer.width = r;
            const auto out = cmd_probe(c, zoo, ref, OptMode::Pgd, std::nullopt,
                                       (dir / ("resolution-" + std::to_string(r) + ".json")).string(), log);
            // Targets are opened at the same resolution.
            for (const auto& t : tgts) {
                const auto h = open_model(c, zoo, t, level, true, opts);
                const auto rr = evaluate(c, h, out.run.probes, access);
                rep.rows.push_back({sweep, std::to_string(r) + "x" + std::to_string(r), t, rr.K, rr.x_obs, rr.p_value,
                                    static_cast<double>(rr.x_obs) / rr.K});
            }
        }
    } else {
        throw PreconditionError("unknown sweep '" + sweep + "' (expected samples, p_mutate, prefix_length or resolution)");
    }
    write_file((dir / (sweep + ".csv")).string(), rep.to_csv());
    write_file((dir / (sweep + ".txt")).string(), rep.to_table());
    return rep;
}

std::string AblationReport::to_csv() const {
    std::ostringstream ss;
    ss << "sweep,setting,target,K,x_obs,hit_rate,p_value\n";
    for (const auto& r : rows)
        ss << r.sweep << "," << r.setting << "," << r.target << "," << r.K << "," << r.x_obs << ","
           << fmt_fixed(r.hit_rate, 4) << "," << format_p(r.p_value) << "\n";
    return ss.str();
}

std::string AblationReport::to_table() const {
    std::vector<std::vector<std::string>> t{{"setting", "target", "x_obs/K", "p-value"}};
    for (const auto& r : rows)
        t.push_back({r.setting, r.target, std::to_string(r.x_obs) + "/" + std::to_string(r.K), format_p(r.p_value)});
    return render_table(t);
}

SimilarityComparison compare_similarity(const ProbeSet& probes, const std::vector<std::string>& word_list,
                                        std::uint64_t seed, int vocab_size) {
    SimilarityComparison c;
    c.variant = probes.prefixes.front().tag();
    const auto baseline = random_probe_set(probes, derive_seed(seed, "similarity.baseline"), word_list, vocab_size);
    if (probes.prefixes.front().is_pixels()) {
        c.optimized = pixel_similarity(probes);
        c.random = pixel_similarity(baseline);
    } else {
        const auto embed = random_item_embedding(derive_seed(seed, "similarity.embed"));
        c.optimized = textual_similarity(probes, embed);
        c.random = textual_similarity(baseline, embed);
    }
    return c;
}

SimilarityComparison cmd_similarity(const RunConfig& cfg, const std::string& probes_path, std::uint64_t seed) {
    const auto probes = load_probe_set(probes_path);
    const auto words = probes.prefixes.front().is_words() ? cfg.word_list() : std::vector<std::string>{};
    auto c = compare_similarity(probes, words, seed, cfg.zoo.model.vocab_size);
    const auto base = fs::path(cfg.output_dir) / "similarity" / fs::path(probes_path).stem();
    write_file(base.string() + ".json", c.to_json());
    write_file(base.string() + ".txt", c.to_table());
    return c;
}

std::string SimilarityComparison::to_table() const {
    return render_table({{"Method", "Average Similarity", "Top 1% Similarity"},
                         {"Random Prefixes", fmt_fixed(random.mean_cos, 4), fmt_fixed(random.top1pct_cos, 4)},
                         {"RSP (" + variant + ")", fmt_fixed(optimized.mean_cos, 4), fmt_fixed(optimized.top1pct_cos, 4)}});
}

std::string SimilarityComparison::to_json() const {
    auto stats = [](const SimilarityStats& s) {
        return json{{"mean_cos", s.mean_cos}, {"top1pct_cos", s.top1pct_cos}, {"pair_count", s.pair_count}};
    };
    return json{{"variant", variant}, {"optimized", stats(optimized)}, {"random", stats(random)}}.dump(2) + "\n";
}

}  // namespace rsp
