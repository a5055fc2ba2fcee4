#pragma once

// Prefix optimisation: gradient-guided token search, word-level genetic
// search, signed-gradient pixel ascent and its zeroth-order variant, and the
// driver that turns them into probe sets.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rsp/access.hpp"
#include "rsp/prefix.hpp"

namespace rsp {

enum class OptMode { Gcg, Genetic, Pgd, ZoPgd };

const char* to_string(OptMode mode) noexcept;
/// Accepts "gcg", "genetic", "pgd", "zo-pgd".
OptMode parse_opt_mode(const std::string& text);
/// Least access level a reference handle must grant for `mode`.
AccessLevel required_level(OptMode mode) noexcept;

struct OptimizerConfig {
    int rounds = 50;          ///< rounds per prefix
    int length = 20;          ///< tokens or words per textual prefix
    int height = 16;          ///< pixel prefix shape
    int width = 16;
    int k_topk = 3;           ///< replacements per position in the token search
    int batch_llm = 8;        ///< mutants per genetic round
    int batch_vlm = 8;        ///< sign perturbations per zeroth-order estimate
    double p_mutate = 0.1;
    bool include_current = true;
    bool use_unrelated = true;
    std::vector<std::string> word_list;
    std::uint64_t seed = 0;
    int workers = 0;          ///< 0 means one per hardware thread

    void validate() const;
};

/// Plain-text word list, one word per line; blank lines are skipped and
/// duplicates dropped in first-seen order.
std::vector<std::string> load_word_list(const std::string& path);

struct StepResult {
    Prefix prefix;
    double objective = 0.0;  ///< P_ref(t) - [use_unrelated] P_u(t) of `prefix`
};

/// P_ref(t | x) - [use_unrelated] P_u(t | x), each renormalised over the candidates.
double objective(const ModelHandle& ref, const ModelHandle* unrelated, const Prefix& x, const SelectionTask& task,
                 int target, bool use_unrelated);

/// One round of gradient-guided single-token replacement over a TokenSeq.
StepResult gcg_step(const ModelHandle& ref, const ModelHandle* unrelated, const Prefix& x, const SelectionTask& task,
                    int target, const OptimizerConfig& cfg);

/// One round of word mutation over a WordSeq; `seed` drives the mutations.
StepResult genetic_step(const ModelHandle& ref, const ModelHandle* unrelated, const Prefix& x,
                        const SelectionTask& task, int target, const OptimizerConfig& cfg, std::uint64_t seed);

/// Moves every pixel one unit along the sign of the gradient of log P_ref(t),
/// clipped to [0, 255].
Prefix pgd_step(const ModelHandle& ref, const Prefix& x, const SelectionTask& task, int target);

/// Symmetric sign-perturbation estimate of the gradient of `f` at integer
/// point `x` on [0, 255]: mean over `batch` draws of
/// (f(clip(x+u)) - f(clip(x-u))) / (clip(x+u)_i - clip(x-u)_i), with
/// coordinates whose perturbations both clip to the same value contributing 0.
std::vector<double> zo_estimate(const std::function<double(std::span<const std::uint8_t>)>& f,
                                std::span<const std::uint8_t> x, int batch, std::uint64_t seed);

/// zo_estimate of log P_ref(t | x) for a pixel prefix. Needs GrayBox access.
std::vector<double> zo_gradient(const ModelHandle& ref, const Prefix& x, const SelectionTask& task, int target,
                                const OptimizerConfig& cfg, std::uint64_t seed);

struct Provenance {
    std::string reference_id;
    AccessLevel level = AccessLevel::Gradient;
    std::string mode;
    std::string config_hash;
    std::string created;  ///< UTC timestamp; excluded from hashes
    bool operator==(const Provenance&) const = default;
};

/// A final prefix that equalled an earlier one.
struct Collision {
    int index = 0;
    int duplicate_of = 0;
    bool resolved = false;  ///< re-initialisation produced a distinct prefix
    bool operator==(const Collision&) const = default;
};

struct ProbeSet {
    SelectionTask task;
    std::vector<Prefix> prefixes;
    std::vector<int> targets;        ///< candidate indices, 0-based
    std::vector<double> ref_probs;   ///< final P_ref(t_k | x_k); may be empty
    Provenance provenance;
    std::vector<Collision> collisions;

    std::size_t size() const noexcept { return prefixes.size(); }
    /// Throws PreconditionError on shape or range violations.
    void validate() const;
    bool operator==(const ProbeSet&) const = default;
};

inline constexpr int kProbeSetFormatVersion = 1;

std::string to_json(const ProbeSet& probes);
ProbeSet probe_set_from_json(std::string_view text);
void save_probe_set(const std::string& path, const ProbeSet& probes);
ProbeSet load_probe_set(const std::string& path);
/// SHA-256 of the serialised probe set with the creation timestamp blanked.
std::string probe_set_hash(const ProbeSet& probes);

struct ProbeRun {
    ProbeSet probes;
    /// Objective per prefix per round; entry 0 is the initial prefix.
    std::vector<std::vector<double>> traces;
};

/// Optimises K independently seeded prefixes. `targets` empty means uniform
/// random targets. The reference must grant required_level(mode); pixel modes
/// never use the unrelated model.
ProbeRun optimize_probe_set(const ModelHandle& ref, const ModelHandle* unrelated, const SelectionTask& task, int K,
                            std::span<const int> targets, const OptimizerConfig& cfg, OptMode mode,
                            const std::string& config_hash = "");

/// Random initial prefix of the mode's variant.
Prefix initial_prefix(OptMode mode, const OptimizerConfig& cfg, int vocab_size, std::uint64_t seed);

}  // namespace rsp
