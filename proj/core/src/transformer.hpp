#pragma once

// Internal forward/backward passes shared by inference, input gradients and
// training. Not installed.

#include <cstddef>
#include <span>
#include <vector>

#include "rsp/micromodel.hpp"

namespace rsp::micro::detail {

struct LayerOffsets {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ParamLayout {
    std::size_t tok_emb = 0;
    std::size_t pos_emb = 0;
    std::vector<LayerOffsets> layers;
    std::size_t lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;
    std::size_t total = 0;

    static ParamLayout for_config(const ModelConfig& cfg);
};

struct LayerCache {
    std::vector<double> x_in, xhat1, rstd1, a1, q, k, v, att, o, x_mid, xhat2, rstd2, a2, u, g;
};

struct ForwardCache {
    int T = 0;
    std::vector<LayerCache> layers;
    std::vector<double> x_out, xhatf, rstdf, f;
};

/// Which positions produce logits.
enum class Heads { Last, All };

/// Runs the transformer over input embeddings `x` (T x d). Returns logits for
/// the last position (V values) or all positions (T x V).
std::vector<double> forward(const ModelConfig& cfg, const ParamLayout& layout, std::span<const double> params,
                            std::span<const double> x, int T, ForwardCache& cache, Heads heads);

/// Backpropagates `dlogits` (shape matching the forward Heads mode). Adds
/// parameter gradients into `dparams` when non-empty; writes the gradient with
/// respect to the input embeddings into `dx` (T x d) when non-empty.
void backward(const ModelConfig& cfg, const ParamLayout& layout, std::span<const double> params,
              const ForwardCache& cache, std::span<const double> dlogits, Heads heads, std::span<double> dparams,
              std::span<double> dx);

/// Per-layer inputs, keys and values of one sequence, reusable by later
/// sequences that share a leading run of positions with it.
struct PrefixState {
    int T = 0;
    std::vector<double> x;                  ///< input embeddings (T x d)
    std::vector<std::vector<double>> h, k, v;  ///< per layer (T x d)
};

/// Inference-only forward returning last-position logits. Positions below
/// `start` are taken from `base` (which must describe the same inputs there);
/// the remaining rows of `x` are computed. Fills `capture` when non-null.
std::vector<double> forward_last(const ModelConfig& cfg, const ParamLayout& layout, std::span<const double> params,
                                 std::span<const double> x, int T, int start, const PrefixState* base,
                                 PrefixState* capture);

/// Token + position embeddings for a token sequence starting at `pos0`.
void embed_tokens(const ModelConfig& cfg, const ParamLayout& layout, std::span<const double> params,
                  std::span<const int> tokens, int pos0, std::span<double> out);

/// d/dz of log(softmax restricted to candidates)[target], with z the logits.
/// Returns the objective value.
double candidate_log_prob_grad(std::span<const double> logits, std::span<const int> candidates, int target,
                               std::span<double> dlogits);

}  // namespace rsp::micro::detail
