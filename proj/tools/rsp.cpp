// Command-line front end for zoo building, probe optimisation, detection,
// ablation sweeps and probe similarity.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rsp/error.hpp"
#include "rsp/harness.hpp"
#include "rsp/io.hpp"

namespace {

rsp::RunConfig load_config(const std::string& path, const std::string& profile) {
    if (!path.empty()) return rsp::RunConfig::load(path);
    return profile == "full" ? rsp::RunConfig::full() : rsp::RunConfig::desk();
}

rsp::ZooManifest load_zoo(const rsp::RunConfig& cfg) {
    const auto path = rsp::zoo_manifest_path(cfg);
    if (!std::filesystem::exists(path))
        throw rsp::PreconditionError("no zoo manifest at " + path + "; run 'rsp zoo build' first");
    return rsp::ZooManifest::load(path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Random-selection probes for model lineage detection"};
    app.require_subcommand(1);

    std::string config_path;
    std::string profile = "desk";
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run configuration");
        sub->add_option("--profile", profile, "Profile used when no config is given")
            ->check(CLI::IsMember({"desk", "full"}));
    };

    auto* config_cmd = app.add_subcommand("config", "Print the effective configuration");
    add_config(config_cmd);

    auto* zoo = app.add_subcommand("zoo", "Model zoo");
    zoo->require_subcommand(1);
    auto* zoo_build = zoo->add_subcommand("build", "Train the zoo and write its manifest");
    add_config(zoo_build);

    auto* probe = app.add_subcommand("probe", "Optimise a probe set on a reference model");
    add_config(probe);
    std::string ref_id, mode_text, access_text, out_path;
    probe->add_option("--ref", ref_id, "Reference model id")->required();
    probe->add_option("--mode", mode_text, "gcg, genetic, pgd or zo-pgd")
        ->required()
        ->check(CLI::IsMember({"gcg", "genetic", "pgd", "zo-pgd"}));
    probe->add_option("--access", access_text, "Override the reference access level");
    probe->add_option("--out", out_path, "Output probe-set path");

    auto* detect = app.add_subcommand("detect", "Test target models against probe sets");
    add_config(detect);
    std::vector<std::string> probe_paths, targets;
    std::string detect_access = "gray", out_stem;
    detect->add_option("--probes", probe_paths, "Probe-set files")->required();
    detect->add_option("--targets", targets, "Target model ids")->required();
    detect->add_option("--access", detect_access, "gray or black")->check(CLI::IsMember({"gray", "black"}));
    detect->add_option("--out", out_stem, "Output file stem under <output_dir>/detect");

    auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
    add_config(ablate);
    std::string sweep, ablate_probes, ablate_access = "gray";
    std::vector<std::string> ablate_targets;
    ablate->add_option("--sweep", sweep, "samples, p_mutate, prefix_length or resolution")
        ->required()
        ->check(CLI::IsMember({"samples", "p_mutate", "prefix_length", "resolution"}));
    ablate->add_option("--probes", ablate_probes, "Probe set for the samples sweep");
    ablate->add_option("--targets", ablate_targets, "Target model ids");
    ablate->add_option("--access", ablate_access, "gray or black")->check(CLI::IsMember({"gray", "black"}));

    auto* similarity = app.add_subcommand("similarity", "Compare probe similarity with a random baseline");
    add_config(similarity);
    std::string sim_probes;
    std::uint64_t sim_seed = 7;
    similarity->add_option("--probes", sim_probes, "Probe-set file")->required();
    similarity->add_option("--seed", sim_seed, "Embedding and baseline seed");

    CLI11_PARSE(app, argc, argv);

    try {
        const auto cfg = load_config(config_path, profile);
        if (config_cmd->parsed()) {
            std::cout << cfg.to_json();
        } else if (zoo_build->parsed()) {
            rsp::cmd_zoo_build(cfg, &std::cerr);
        } else if (probe->parsed()) {
            std::optional<rsp::AccessLevel> level;
            if (!access_text.empty()) level = rsp::parse_access_level(access_text);
            const auto out = rsp::cmd_probe(cfg, load_zoo(cfg), ref_id, rsp::parse_opt_mode(mode_text), level,
                                            out_path, &std::cerr);
            std::cout << out.path << "\n";
        } else if (detect->parsed()) {
            const auto m = rsp::cmd_detect(cfg, load_zoo(cfg), probe_paths, targets,
                                           rsp::parse_access_mode(detect_access), out_stem, &std::cerr);
            std::cout << m.to_table();
        } else if (ablate->parsed()) {
            const auto r = rsp::cmd_ablate(cfg, load_zoo(cfg), sweep, ablate_probes, ablate_targets,
                                           rsp::parse_access_mode(ablate_access), &std::cerr);
            std::cout << r.to_table();
        } else if (similarity->parsed()) {
            std::cout << rsp::cmd_similarity(cfg, sim_probes, sim_seed).to_table();
        }
    } catch (const rsp::PreconditionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
