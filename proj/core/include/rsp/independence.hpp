#pragma once

// Pairwise similarity diagnostics for probe sets.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rsp/prefix_opt.hpp"

namespace rsp {

struct SimilarityStats {
    double mean_cos = 0.0;
    double top1pct_cos = 0.0;  ///< mean over the top ceil(1%) of pairs, at least one pair
    std::size_t pair_count = 0;
};

/// Statistics of all unordered pairwise cosines. A zero vector has cosine 0
/// with everything. Needs at least two vectors.
SimilarityStats pairwise_similarity(std::span<const std::vector<double>> vectors);

/// Unit-vector embedding per vocabulary item (token id or word).
using ItemEmbedding = std::function<std::vector<double>(const std::string& item)>;

/// Seeded random unit vectors of dimension `dim`, a pure function of (seed, item).
ItemEmbedding random_item_embedding(std::uint64_t seed, int dim = 128);

/// Mean item embedding of each textual prefix; token ids are rendered as decimal strings.
std::vector<double> embed_prefix(const Prefix& prefix, const ItemEmbedding& embed);

SimilarityStats textual_similarity(const ProbeSet& probes, std::uint64_t embed_seed, int dim = 128);
SimilarityStats textual_similarity(const ProbeSet& probes, const ItemEmbedding& embed);

/// Cosine over mean-centred flattened pixel vectors.
SimilarityStats pixel_similarity(const ProbeSet& probes);

/// Probe set with the same task, variant, shape and targets but freshly
/// drawn uniform random prefixes (the comparison baseline).
ProbeSet random_probe_set(const ProbeSet& like, std::uint64_t seed, const std::vector<std::string>& word_list,
                          int vocab_size = 64);

}  // namespace rsp
