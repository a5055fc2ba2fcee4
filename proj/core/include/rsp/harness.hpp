#pragma once

// Experiment orchestration: run configuration, model zoo, probe, detect,
// ablation and similarity commands, and their reports.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rsp/access.hpp"
#include "rsp/corpus.hpp"
#include "rsp/independence.hpp"
#include "rsp/micromodel.hpp"
#include "rsp/prefix_opt.hpp"
#include "rsp/stat_test.hpp"

namespace rsp {

// ----------------------------------------------------------------------------
// Configuration

struct ZooModelSpec {
    std::string id;
    std::string role;     ///< reference | finetuned | unrelated | auxiliary
    std::string parent;   ///< finetuned only
    std::string style;    ///< corpus style
    std::uint64_t seed = 0;
    std::uint64_t rule_seed = 0;  ///< pretraining selection rule; unused for finetuned entries
};

struct ZooSettings {
    micro::ModelConfig model;
    micro::VisionConfig vision;
    std::size_t corpus_bytes = 100000;
    micro::TrainOptions pretrain;
    micro::TrainOptions finetune;
    double pretrain_selection_rate = 1.0;
    double finetune_selection_rate = 0.0;
    std::vector<ZooModelSpec> models;
};

struct DetectSettings {
    int T = 50;
    double alpha = 0.05;
    std::uint64_t seed = 0;
    double target_temperature = 1.0;  ///< 0 makes local targets deterministic
};

struct AblateSettings {
    std::vector<int> samples{10, 25, 50, 100};
    std::vector<double> p_mutate{0.05, 0.1, 0.5, 1.0};
    std::vector<int> prefix_length{10, 20, 50};
    std::vector<int> resolution{8, 16, 32};
    std::vector<std::string> targets;  ///< empty means every non-reference zoo model
};

struct RunConfig {
    std::string profile = "desk";
    SelectionTask task;
    ZooSettings zoo;
    OptimizerConfig optimizer;     ///< rounds here are ignored; see the two fields below
    int K = 100;
    int rounds_gradient = 50;
    int rounds_logits = 300;
    std::string unrelated_id = "aux";
    std::string word_list_path;    ///< empty means the bundled list
    DetectSettings detect;
    AblateSettings ablate;
    std::string output_dir = "rsp-out";
    std::map<std::string, RemoteEndpoint> remotes;
    int workers = 0;

    /// Desk-scale defaults: 64 symbols, N=10, K=100, L=20, 16x16, B=8,
    /// 50/300 rounds, T=50.
    static RunConfig desk();
    /// Full-scale constants: K=500, N=26, L=50, 280x280, B=32, T=100, 100/1000 rounds.
    static RunConfig full();

    /// Starts from the profile named in the document (default desk) and
    /// applies every field present. Relative paths resolve against `base_dir`.
    static RunConfig from_json(std::string_view text, const std::string& base_dir = "");
    static RunConfig load(const std::string& path);
    std::string to_json() const;
    /// SHA-256 of to_json().
    std::string hash() const;
    /// Throws PreconditionError naming the first invalid field.
    void validate() const;

    /// Optimizer settings for `mode` with the matching round count.
    OptimizerConfig optimizer_for(OptMode mode) const;
    std::vector<std::string> word_list() const;
};

/// Bundled word list location.
std::string default_word_list_path();

// ----------------------------------------------------------------------------
// Model zoo

struct ZooEntry {
    std::string id;
    std::string role;
    std::string parent;
    std::string corpus;
    std::uint64_t seed = 0;
    std::uint64_t rule_seed = 0;
    std::string checkpoint;         ///< relative to the manifest directory
    std::string vision_checkpoint;  ///< relative to the manifest directory
    std::string checkpoint_sha256;
    std::string vision_sha256;
    bool operator==(const ZooEntry&) const = default;
};

struct ZooManifest {
    std::string config_hash;
    std::string created;
    std::vector<ZooEntry> entries;
    std::string directory;  ///< where the manifest lives; not serialised

    const ZooEntry& find(const std::string& id) const;
    const ZooEntry& reference() const;
    /// Exactly one reference, finetuned parents exist; with `check_files`,
    /// checkpoints exist, match their digests and load.
    void validate(bool check_files = false) const;

    micro::MicroLM load_lm(const std::string& id) const;
    micro::MicroVLM load_vlm(const std::string& id) const;

    std::string to_json() const;
    static ZooManifest from_json(std::string_view text, const std::string& directory);
    static ZooManifest load(const std::string& path);
    void save(const std::string& path) const;
};

std::string zoo_manifest_path(const RunConfig& cfg);

/// Trains the zoo described by cfg.zoo and writes checkpoints and manifest
/// under cfg.output_dir/zoo. Progress lines go to `log` when non-null.
ZooManifest cmd_zoo_build(const RunConfig& cfg, std::ostream* log = nullptr);

/// Opens a zoo model or a configured remote ("remote:<name>") at `level`.
ModelHandle open_model(const RunConfig& cfg, const ZooManifest& zoo, const std::string& id, AccessLevel level,
                       bool vision, LocalOptions options = {});

// ----------------------------------------------------------------------------
// Commands

struct ProbeOutcome {
    ProbeRun run;
    std::string path;
    double mean_ref_prob = 0.0;
};

/// Optimises a probe set on `ref_id`. `access` overrides the level the
/// reference is opened at (default: the least the mode needs).
ProbeOutcome cmd_probe(const RunConfig& cfg, const ZooManifest& zoo, const std::string& ref_id, OptMode mode,
                       std::optional<AccessLevel> access = std::nullopt, const std::string& out_path = "",
                       std::ostream* log = nullptr);

struct MatrixCell {
    std::optional<TestReport> report;
    std::string error;
};

struct DetectionMatrix {
    struct Row {
        std::string probes_path;
        std::string probes_hash;
        std::string reference;
        std::string mode;
        int K = 0;
        int N = 0;
    };
    std::vector<Row> rows;
    std::vector<std::string> targets;
    AccessMode access = AccessMode::Gray;
    std::vector<std::vector<MatrixCell>> cells;  ///< rows x targets
    std::string config_hash;
    std::string created;

    std::string to_json() const;
    static DetectionMatrix from_json(std::string_view text);
    /// References down, targets across; "p (x_obs/K)" per cell.
    std::string to_table() const;
};

/// One report per (probe set, target). Failing cells record their error.
DetectionMatrix cmd_detect(const RunConfig& cfg, const ZooManifest& zoo, const std::vector<std::string>& probe_paths,
                           const std::vector<std::string>& targets, AccessMode access, const std::string& out_stem = "",
                           std::ostream* log = nullptr);

/// Evaluates one probe set against one target.
TestReport evaluate(const RunConfig& cfg, const ModelHandle& target, const ProbeSet& probes, AccessMode access);

struct AblationRow {
    std::string sweep;
    std::string setting;
    std::string target;
    int K = 0;
    int x_obs = 0;
    double p_value = 1.0;
    double hit_rate = 0.0;
};

struct AblationReport {
    std::string sweep;
    std::vector<AblationRow> rows;
    std::string config_hash;

    std::string to_csv() const;
    std::string to_table() const;
};

/// `probes_path` and `targets` are required for the samples sweep; other
/// sweeps optimise fresh probe sets on the zoo reference.
AblationReport cmd_ablate(const RunConfig& cfg, const ZooManifest& zoo, const std::string& sweep,
                          const std::string& probes_path = "", const std::vector<std::string>& targets = {},
                          AccessMode access = AccessMode::Gray, std::ostream* log = nullptr);

struct SimilarityComparison {
    SimilarityStats optimized;
    SimilarityStats random;
    std::string variant;

    std::string to_table() const;
    std::string to_json() const;
};

SimilarityComparison cmd_similarity(const RunConfig& cfg, const std::string& probes_path, std::uint64_t seed = 7);
SimilarityComparison compare_similarity(const ProbeSet& probes, const std::vector<std::string>& word_list,
                                        std::uint64_t seed = 7, int vocab_size = 64);

}  // namespace rsp
