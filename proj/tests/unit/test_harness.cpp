#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "rsp/error.hpp"
#include "rsp/harness.hpp"
#include "rsp/io.hpp"

using namespace rsp;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(const std::string& dir) {
    auto c = RunConfig::desk();
    c.output_dir = dir;
    c.workers = 1;
    c.K = 4;
    c.rounds_gradient = 2;
    c.rounds_logits = 3;
    c.optimizer.length = 5;
    c.optimizer.height = 8;
    c.optimizer.width = 8;
    c.zoo.vision = {8, 8, 4};
    c.zoo.model = {64, 16, 1, 2, 64, 32};
    c.zoo.corpus_bytes = 4000;
    c.zoo.pretrain.steps = 20;
    c.zoo.pretrain.seq_len = 32;
    c.zoo.finetune.steps = 5;
    c.zoo.finetune.seq_len = 32;
    c.detect.T = 3;
    c.ablate.samples = {2, 4};
    c.ablate.p_mutate = {0.0, 1.0};
    c.ablate.prefix_length = {3};
    c.ablate.resolution = {4, 8};
    return c;
}

struct TinyZoo {
    std::string dir;
    RunConfig cfg;
    ZooManifest zoo;
    TinyZoo() : dir((fs::temp_directory_path() / "rsp-unit-harness").string()), cfg(tiny(dir)) {
        fs::remove_all(dir);
        zoo = cmd_zoo_build(cfg);
    }
};

const TinyZoo& shared_zoo() {
    static const TinyZoo z;
    return z;
}

}  // namespace

TEST_CASE("run config round trip, hash and validation") {
    const auto d = RunConfig::desk();
    CHECK_NOTHROW(d.validate());
    CHECK(d.K == 100);
    CHECK(d.task.size() == 10);
    CHECK(d.optimizer.length == 20);
    CHECK(d.detect.T == 50);
    const auto f = RunConfig::full();
    CHECK_NOTHROW(f.validate());
    CHECK(f.K == 500);
    CHECK(f.task.size() == 26);
    CHECK(f.detect.T == 100);

    const auto back = RunConfig::from_json(d.to_json());
    CHECK(back.to_json() == d.to_json());
    CHECK(back.hash() == d.hash());

    // Output location and worker count do not change the hash.
    auto moved = d;
    moved.output_dir = "/elsewhere";
    moved.workers = 7;
    CHECK(moved.hash() == d.hash());
    auto other = d;
    other.K = 99;
    CHECK(other.hash() != d.hash());

    const auto partial = RunConfig::from_json(R"({"profile": "full", "optimizer": {"K": 12}})");
    CHECK(partial.K == 12);
    CHECK(partial.task.size() == 26);
    CHECK_THROWS_AS(RunConfig::from_json("{"), PreconditionError);
    CHECK_THROWS_AS(RunConfig::from_json(R"({"profile": "huge"})"), PreconditionError);

    auto bad = d;
    bad.K = 0;
    CHECK_THROWS_AS(bad.validate(), PreconditionError);
    bad = d;
    bad.detect.alpha = 1.5;
    CHECK_THROWS_AS(bad.validate(), PreconditionError);
    bad = d;
    bad.unrelated_id = "missing";
    CHECK_THROWS_AS(bad.validate(), PreconditionError);

    CHECK(d.optimizer_for(OptMode::Gcg).rounds == 50);
    CHECK(d.optimizer_for(OptMode::Genetic).rounds == 300);
    CHECK_FALSE(d.optimizer_for(OptMode::Genetic).word_list.empty());
    CHECK(fs::exists(default_word_list_path()));
}

TEST_CASE("zoo manifest validation") {
    ZooManifest m;
    m.entries = {{"r", "reference", "", "chat", 1, 2, "r.ckpt", "", "", ""},
                 {"f", "finetuned", "r", "math", 2, 0, "f.ckpt", "", "", ""}};
    CHECK_NOTHROW(m.validate());
    CHECK(m.reference().id == "r");
    CHECK_THROWS_AS(m.find("zz"), PreconditionError);
    auto two = m;
    two.entries[1].role = "reference";
    two.entries[1].parent = "";
    CHECK_THROWS_AS(two.validate(), PreconditionError);
    auto orphan = m;
    orphan.entries[1].parent = "nobody";
    CHECK_THROWS_AS(orphan.validate(), PreconditionError);
    const auto back = ZooManifest::from_json(m.to_json(), "");
    CHECK(back.entries == m.entries);
    CHECK_THROWS_AS(m.validate(true), Error);
}

TEST_CASE("tiny zoo builds, validates and reloads") {
    const auto& z = shared_zoo();
    CHECK(z.zoo.entries.size() == z.cfg.zoo.models.size());
    CHECK(z.zoo.config_hash == z.cfg.hash());
    CHECK_NOTHROW(z.zoo.validate(true));
    const auto loaded = ZooManifest::load(zoo_manifest_path(z.cfg));
    CHECK(loaded.entries == z.zoo.entries);
    const auto ref = loaded.load_lm("ref");
    const auto child = loaded.load_lm("ft-math");
    CHECK(micro::param_distance(ref, child) > 0.0);
    CHECK(loaded.load_vlm("ft-math").projector().size() == loaded.load_vlm("ref").projector().size());

    // Rebuilding from the same configuration reproduces the checkpoints.
    auto again = z.cfg;
    again.output_dir = z.dir + "-again";
    fs::remove_all(again.output_dir);
    const auto rebuilt = cmd_zoo_build(again);
    for (std::size_t i = 0; i < rebuilt.entries.size(); ++i)
        CHECK(rebuilt.entries[i].checkpoint_sha256 == z.zoo.entries[i].checkpoint_sha256);

    // A corrupted checkpoint fails file validation.
    const auto victim = fs::path(again.output_dir) / "zoo" / rebuilt.entries[0].checkpoint;
    write_file(victim.string(), "junk");
    CHECK_THROWS_AS(rebuilt.validate(true), Error);
}

TEST_CASE("open_model levels and unknown ids") {
    const auto& z = shared_zoo();
    const auto h = open_model(z.cfg, z.zoo, "ref", AccessLevel::GrayBox, false);
    CHECK(h.level() == AccessLevel::GrayBox);
    CHECK_THROWS_AS(open_model(z.cfg, z.zoo, "nobody", AccessLevel::GrayBox, false), PreconditionError);
    CHECK_THROWS_AS(open_model(z.cfg, z.zoo, "remote:none", AccessLevel::GrayBox, false), PreconditionError);
}

TEST_CASE("probe, detect and similarity end to end") {
    const auto& z = shared_zoo();
    for (const auto mode : {OptMode::Gcg, OptMode::Genetic, OptMode::Pgd, OptMode::ZoPgd}) {
        const auto out = cmd_probe(z.cfg, z.zoo, "ref", mode);
        CHECK(fs::exists(out.path));
        const auto ps = load_probe_set(out.path);
        CHECK(ps.size() == 4);
        CHECK(ps.provenance.config_hash == z.cfg.hash());
        CHECK(ps.provenance.mode == to_string(mode));
        // Re-running reproduces the payload apart from the timestamp.
        const auto again = cmd_probe(z.cfg, z.zoo, "ref", mode, std::nullopt, out.path + ".again");
        CHECK(probe_set_hash(load_probe_set(out.path + ".again")) == probe_set_hash(ps));
    }
    CHECK_THROWS_AS(cmd_probe(z.cfg, z.zoo, "ref", OptMode::Gcg, AccessLevel::GrayBox), CapabilityError);

    const auto gcg = (fs::path(z.dir) / "probes" / "ref-gcg.json").string();
    const std::vector<std::string> targets{"ft-math", "un-a", "missing"};
    const auto gray = cmd_detect(z.cfg, z.zoo, {gcg}, targets, AccessMode::Gray);
    REQUIRE(gray.cells.size() == 1);
    REQUIRE(gray.cells[0].size() == 3);
    CHECK(gray.cells[0][0].report.has_value());
    CHECK(gray.cells[0][1].report.has_value());
    CHECK_FALSE(gray.cells[0][2].report.has_value());
    CHECK_FALSE(gray.cells[0][2].error.empty());
    CHECK(gray.cells[0][0].report->K == 4);
    CHECK(gray.config_hash == z.cfg.hash());
    CHECK(DetectionMatrix::from_json(gray.to_json()).to_json() == gray.to_json());
    CHECK(gray.to_table().find("ft-math") != std::string::npos);
    CHECK(fs::exists(fs::path(z.dir) / "detect" / "ref-gcg-gray.json"));
    CHECK(fs::exists(fs::path(z.dir) / "detect" / "ref-gcg-gray.txt"));

    // Deterministic local targets: black equals gray for every T.
    auto det = z.cfg;
    det.detect.target_temperature = 0.0;
    for (const int T : {1, 4}) {
        det.detect.T = T;
        const auto g = cmd_detect(det, z.zoo, {gcg}, {"ft-math", "un-b"}, AccessMode::Gray, "det-gray");
        const auto b = cmd_detect(det, z.zoo, {gcg}, {"ft-math", "un-b"}, AccessMode::Black, "det-black");
        for (std::size_t t = 0; t < 2; ++t) {
            CHECK(g.cells[0][t].report->x_obs == b.cells[0][t].report->x_obs);
            CHECK(g.cells[0][t].report->p_value == b.cells[0][t].report->p_value);
        }
    }

    const auto sim = cmd_similarity(z.cfg, gcg);
    CHECK(sim.optimized.pair_count == 6);
    CHECK(sim.random.pair_count == 6);
    const auto table = sim.to_table();
    CHECK(table.find("Random Prefixes") != std::string::npos);
    CHECK(table.find("RSP") != std::string::npos);
    CHECK(cmd_similarity(z.cfg, gcg).to_json() == sim.to_json());
    const auto pgd = (fs::path(z.dir) / "probes" / "ref-pgd.json").string();
    CHECK(cmd_similarity(z.cfg, pgd).variant == "pixels");
}

TEST_CASE("ablation sweeps") {
    const auto& z = shared_zoo();
    const auto gcg = cmd_probe(z.cfg, z.zoo, "ref", OptMode::Gcg).path;
    const auto samples = cmd_ablate(z.cfg, z.zoo, "samples", gcg, {"ft-math"});
    CHECK(samples.rows.size() == 2);
    CHECK(samples.rows[0].K == 2);
    CHECK(samples.rows[1].K == 4);
    CHECK(samples.to_csv().rfind("sweep,setting,target,K,x_obs,hit_rate,p_value\n", 0) == 0);
    CHECK(fs::exists(fs::path(z.dir) / "ablate" / "samples.csv"));

    const auto pm = cmd_ablate(z.cfg, z.zoo, "p_mutate", "", {"un-a"});
    CHECK(pm.rows.size() == 2);
    const auto res = cmd_ablate(z.cfg, z.zoo, "resolution", "", {"un-a"});
    CHECK(res.rows.size() == 2);
    CHECK(cmd_ablate(z.cfg, z.zoo, "prefix_length", "", {"un-a"}).rows.size() == 1);
    CHECK_THROWS_AS(cmd_ablate(z.cfg, z.zoo, "colour"), PreconditionError);
    auto bad = z.cfg;
    bad.ablate.resolution = {6};
    CHECK_THROWS_AS(cmd_ablate(bad, z.zoo, "resolution", "", {"un-a"}), PreconditionError);
}
