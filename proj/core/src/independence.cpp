#include "rsp/independence.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "rsp/error.hpp"
#include "rsp/rng.hpp"

namespace rsp {

SimilarityStats pairwise_similarity(std::span<const std::vector<double>> vectors) {
    const std::size_t K = vectors.size();
    if (K < 2) throw PreconditionError("similarity needs at least two prefixes");
    std::vector<double> norms(K);
    for (std::size_t i = 0; i < K; ++i) {
        double s = 0.0;
        for (const double v : vectors[i]) s += v * v;
        norms[i] = std::sqrt(s);
    }
    std::vector<double> cos;
    cos.reserve(K * (K - 1) / 2);
    for (std::size_t i = 0; i < K; ++i) {
        for (std::size_t j = i + 1; j < K; ++j) {
            if (vectors[i].size() != vectors[j].size()) throw PreconditionError("similarity vectors differ in length");
            if (norms[i] == 0.0 || norms[j] == 0.0) {
                cos.push_back(0.0);
                continue;
            }
            double d = 0.0;
            for (std::size_t c = 0; c < vectors[i].size(); ++c) d += vectors[i][c] * vectors[j][c];
            cos.push_back(std::clamp(d / (norms[i] * norms[j]), -1.0, 1.0));
        }
    }
    SimilarityStats st;
    st.pair_count = cos.size();
    double sum = 0.0;
    for (const double c : cos) sum += c;
    st.mean_cos = sum / static_cast<double>(cos.size());
    const auto top = std::max<std::size_t>(1, (cos.size() + 99) / 100);
    std::partial_sort(cos.begin(), cos.begin() + static_cast<std::ptrdiff_t>(top), cos.end(), std::greater<>());
    double ts = 0.0;
    for (std::size_t i = 0; i < top; ++i) ts += cos[i];
    st.top1pct_cos = std::max(ts / static_cast<double>(top), st.mean_cos);
    return st;
}

ItemEmbedding random_item_embedding(std::uint64_t seed, int dim) {
    if (dim < 1) throw PreconditionError("embedding dimension must be positive");
    return [seed, dim](const std::string& item) {
        CounterRng rng(derive_seed(seed, "embed." + item));
        std::vector<double> v(static_cast<std::size_t>(dim));
        double s = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            s += x * x;
        }
        const double inv = 1.0 / std::sqrt(s);
        for (auto& x : v) x *= inv;
        return v;
    };
}

std::vector<double> embed_prefix(const Prefix& prefix, const ItemEmbedding& embed) {
    std::vector<std::string> items;
    if (prefix.is_tokens()) {
        for (const int t : prefix.tokens().tokens) items.push_back(std::to_string(t));
    } else if (prefix.is_words()) {
        items = prefix.words().words;
    } else {
        throw PreconditionError("textual similarity needs textual prefixes");
    }
    std::vector<double> mean;
    for (const auto& it : items) {
        const auto e = embed(it);
        if (mean.empty()) mean.assign(e.size(), 0.0);
        if (e.size() != mean.size()) throw PreconditionError("embedding dimension changed between items");
        for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i];
    }
    for (auto& v : mean) v /= static_cast<double>(items.size());
    return mean;
}

SimilarityStats textual_similarity(const ProbeSet& probes, const ItemEmbedding& embed) {
    std::vector<std::vector<double>> vecs;
    vecs.reserve(probes.size());
    for (const auto& p : probes.prefixes) vecs.push_back(embed_prefix(p, embed));
    return pairwise_similarity(vecs);
}

SimilarityStats textual_similarity(const ProbeSet& probes, std::uint64_t embed_seed, int dim) {
    return textual_similarity(probes, random_item_embedding(embed_seed, dim));
}

SimilarityStats pixel_similarity(const ProbeSet& probes) {
    std::vector<std::vector<double>> vecs;
    vecs.reserve(probes.size());
    for (const auto& p : probes.prefixes) {
        if (!p.is_pixels()) throw PreconditionError("pixel similarity needs pixel prefixes");
        const auto& d = p.pixels().data;
        double mean = 0.0;
        for (const auto v : d) mean += v;
        mean /= static_cast<double>(d.size());
        std::vector<double> c(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) c[i] = d[i] - mean;
        vecs.push_back(std::move(c));
    }
    return pairwise_similarity(vecs);
}

ProbeSet random_probe_set(const ProbeSet& like, std::uint64_t seed, const std::vector<std::string>& word_list,
                          int vocab_size) {
    like.validate();
    ProbeSet out = like;
    out.ref_probs.clear();
    out.collisions.clear();
    out.provenance.mode = "random";
    OptimizerConfig cfg;
    cfg.word_list = word_list;
    for (std::size_t k = 0; k < like.size(); ++k) {
        const auto& p = like.prefixes[k];
        const auto s = derive_seed(seed, "random.prefix", k);
        if (p.is_tokens()) {
            cfg.length = static_cast<int>(p.tokens().tokens.size());
            out.prefixes[k] = initial_prefix(OptMode::Gcg, cfg, vocab_size, s);
        } else if (p.is_words()) {
            cfg.length = static_cast<int>(p.words().words.size());
            out.prefixes[k] = initial_prefix(OptMode::Genetic, cfg, vocab_size, s);
        } else {
            cfg.height = p.pixels().height;
            cfg.width = p.pixels().width;
            out.prefixes[k] = initial_prefix(OptMode::Pgd, cfg, vocab_size, s);
        }
    }
    return out;
}

}  // namespace rsp
