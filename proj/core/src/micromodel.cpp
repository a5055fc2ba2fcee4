#include "rsp/micromodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "rsp/error.hpp"
#include "rsp/rng.hpp"
#include "transformer.hpp"

namespace rsp::micro {

using detail::ForwardCache;
using detail::Heads;
using detail::ParamLayout;

// ----------------------------------------------------------------------------
// Vocab

Vocab::Vocab(std::string alphabet) : alphabet_(std::move(alphabet)) {
    std::fill(std::begin(index_), std::end(index_), -1);
    if (alphabet_.empty()) throw PreconditionError("vocabulary must not be empty");
    for (std::size_t i = 0; i < alphabet_.size(); ++i) {
        auto& slot = index_[static_cast<unsigned char>(alphabet_[i])];
        if (slot >= 0) throw PreconditionError(std::string("duplicate vocabulary symbol '") + alphabet_[i] + "'");
        slot = static_cast<int>(i);
    }
}

Vocab Vocab::default_chars() {
    std::string a = "\n ";
    for (char c = 'a'; c <= 'z'; ++c) a.push_back(c);
    for (char c = 'A'; c <= 'Z'; ++c) a.push_back(c);
    for (char c = '0'; c <= '9'; ++c) a.push_back(c);
    return Vocab(std::move(a));
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        const int id = index_of(text[i]);
        if (id < 0) {
            const auto code = static_cast<unsigned>(static_cast<unsigned char>(text[i]));
            throw PreconditionError("character '" + std::string(1, text[i]) + "' (code " + std::to_string(code) +
                                    ") at offset " + std::to_string(i) + " is not in the vocabulary");
        }
        ids.push_back(id);
    }
    return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
    std::string s;
    s.reserve(ids.size());
    for (const int id : ids) s.push_back(symbol(id));
    return s;
}

// ----------------------------------------------------------------------------
// Configs and containers

void ModelConfig::validate() const {
    if (vocab_size < 2 || d_model < 1 || n_layers < 1 || n_heads < 1 || context < 2 || d_ff < 1)
        throw PreconditionError("model config dimensions must be positive");
    if (d_model % n_heads != 0) throw PreconditionError("d_model must be divisible by n_heads");
}

void VisionConfig::validate() const {
    if (patch < 1 || height < patch || width < patch) throw PreconditionError("invalid vision config");
    if (height % patch != 0 || width % patch != 0)
        throw PreconditionError("image height and width must be multiples of the patch size");
}

TokenOneHot::TokenOneHot(std::span<const int> tokens, int vocab_size)
    : m_(static_cast<int>(tokens.size()), vocab_size) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= vocab_size) throw PreconditionError("token id out of range");
        m_(static_cast<int>(i), tokens[i]) = 1.0;
    }
}

std::vector<int> TokenOneHot::tokens() const {
    std::vector<int> ids(static_cast<std::size_t>(m_.rows));
    for (int r = 0; r < m_.rows; ++r) {
        const auto row = m_.row(r);
        ids[static_cast<std::size_t>(r)] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return ids;
}

void TrainCorpus::validate(const Vocab& vocab) const {
    if (text.empty()) throw PreconditionError("corpus '" + name + "' is empty");
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (!vocab.contains(text[i])) {
            throw PreconditionError("corpus '" + name + "' contains out-of-vocabulary character '" +
                                    std::string(1, text[i]) + "' at offset " + std::to_string(i));
        }
    }
}

namespace {

std::vector<double> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const auto layout = ParamLayout::for_config(cfg);
    std::vector<double> p(layout.total, 0.0);
    CounterRng rng(derive_seed(seed, "micromodel.init"));
    const std::size_t d = cfg.d_model;
    auto fill = [&](std::size_t off, std::size_t n, double std) {
        for (std::size_t i = 0; i < n; ++i) p[off + i] = std * rng.normal();
    };
    auto ones = [&](std::size_t off, std::size_t n) { std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(off), n, 1.0); };
    const double emb_std = 0.08;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_std = in_std / std::sqrt(2.0 * cfg.n_layers);
    fill(layout.tok_emb, static_cast<std::size_t>(cfg.vocab_size) * d, emb_std);
    fill(layout.pos_emb, static_cast<std::size_t>(cfg.context) * d, emb_std);
    for (const auto& o : layout.layers) {
        ones(o.ln1_g, d);
        fill(o.wq, d * d, in_std);
        fill(o.wk, d * d, in_std);
        fill(o.wv, d * d, in_std);
        fill(o.wo, d * d, out_std);
        ones(o.ln2_g, d);
        fill(o.w1, d * cfg.d_ff, in_std);
        fill(o.w2, static_cast<std::size_t>(cfg.d_ff) * d, out_std / std::sqrt(static_cast<double>(cfg.d_ff) / d));
    }
    ones(layout.lnf_g, d);
    fill(layout.head_w, d * cfg.vocab_size, in_std);
    return p;
}

std::vector<double> init_projector(const ModelConfig& cfg, const VisionConfig& vision, std::uint64_t seed) {
    const std::size_t pd = static_cast<std::size_t>(vision.patch_dim());
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::vector<double> w(pd * d + d, 0.0);
    CounterRng rng(derive_seed(seed, "micromodel.projector"));
    // Pixels are scaled to [0,1]; this keeps patch embeddings at roughly the
    // token-embedding scale plus the residual stream's unit layer norm.
    const double std = 1.0 / std::sqrt(static_cast<double>(pd));
    for (std::size_t i = 0; i < pd * d; ++i) w[i] = std * rng.normal();
    for (std::size_t i = 0; i < d; ++i) w[pd * d + i] = -0.5 * std * rng.normal();
    return w;
}

struct Prepared {
    std::vector<double> x;
    int T = 0;
};

Prepared embed_with_prefix_weights(const MicroLM& model, const ParamLayout& layout, const Matrix& weights,
                                   std::span<const int> prompt) {
    const auto& cfg = model.config();
    const int d = cfg.d_model;
    const int L = weights.rows;
    if (weights.cols != cfg.vocab_size) throw PreconditionError("prefix matrix width must equal vocabulary size");
    const int T = L + static_cast<int>(prompt.size());
    if (T < 1) throw PreconditionError("empty input");
    if (T > cfg.context) throw PreconditionError("input of length " + std::to_string(T) + " exceeds context " +
                                                 std::to_string(cfg.context));
    Prepared out{std::vector<double>(static_cast<std::size_t>(T) * d, 0.0), T};
    const double* P = model.params().data();
    for (int i = 0; i < L; ++i) {
        double* o = out.x.data() + static_cast<std::size_t>(i) * d;
        const double* pe = P + layout.pos_emb + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) o[j] = pe[j];
        for (int v = 0; v < cfg.vocab_size; ++v) {
            const double w = weights(i, v);
            if (w == 0.0) continue;
            const double* te = P + layout.tok_emb + static_cast<std::size_t>(v) * d;
            for (int j = 0; j < d; ++j) o[j] += w * te[j];
        }
    }
    detail::embed_tokens(cfg, layout, model.params(), prompt, L,
                         std::span<double>(out.x).subspan(static_cast<std::size_t>(L) * d));
    return out;
}

Prepared embed_with_pixels(const MicroVLM& model, const ParamLayout& layout, std::span<const double> pixels,
                           std::span<const int> prompt) {
    const auto& cfg = model.base().config();
    const auto& vc = model.vision();
    const int d = cfg.d_model;
    const int np = vc.num_patches();
    const int pd = vc.patch_dim();
    if (pixels.size() != static_cast<std::size_t>(vc.height) * vc.width * 3)
        throw PreconditionError("pixel grid shape does not match the model's vision config");
    const int T = np + static_cast<int>(prompt.size());
    if (T > cfg.context) throw PreconditionError("input of length " + std::to_string(T) + " exceeds context " +
                                                 std::to_string(cfg.context));
    Prepared out{std::vector<double>(static_cast<std::size_t>(T) * d, 0.0), T};
    const double* P = model.base().params().data();
    const double* W = model.projector().data();
    const double* b = W + static_cast<std::size_t>(pd) * d;
    const int pcols = vc.width / vc.patch;
    std::vector<double> patch(static_cast<std::size_t>(pd));
    for (int p = 0; p < np; ++p) {
        const int pr = p / pcols, pc = p % pcols;
        int idx = 0;
        for (int dy = 0; dy < vc.patch; ++dy) {
            for (int dx = 0; dx < vc.patch; ++dx) {
                const std::size_t base =
                    (static_cast<std::size_t>(pr * vc.patch + dy) * vc.width + static_cast<std::size_t>(pc * vc.patch + dx)) * 3;
                for (int ch = 0; ch < 3; ++ch) patch[static_cast<std::size_t>(idx++)] = pixels[base + ch] / 255.0;
            }
        }
        double* o = out.x.data() + static_cast<std::size_t>(p) * d;
        const double* pe = P + layout.pos_emb + static_cast<std::size_t>(p) * d;
        for (int j = 0; j < d; ++j) o[j] = b[j] + pe[j];
        for (int i = 0; i < pd; ++i) {
            const double a = patch[static_cast<std::size_t>(i)];
            const double* w = W + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) o[j] += a * w[j];
        }
    }
    detail::embed_tokens(cfg, layout, model.base().params(), prompt, np,
                         std::span<double>(out.x).subspan(static_cast<std::size_t>(np) * d));
    return out;
}

void check_candidates(int vocab_size, std::span<const int> candidates, int target) {
    if (candidates.empty()) throw PreconditionError("candidate set is empty");
    bool found = false;
    for (const int c : candidates) {
        if (c < 0 || c >= vocab_size) throw PreconditionError("candidate token out of range");
        found = found || c == target;
    }
    if (!found) throw PreconditionError("target token " + std::to_string(target) + " is not among the candidates");
}

const ParamLayout& layout_for(const ModelConfig& cfg) {
    thread_local ModelConfig cached_cfg{};
    thread_local ParamLayout cached = ParamLayout::for_config(cached_cfg);
    if (!(cfg == cached_cfg)) {
        cached_cfg = cfg;
        cached = ParamLayout::for_config(cfg);
    }
    return cached;
}

}  // namespace

MicroLM::MicroLM(ModelConfig config, Vocab vocab, std::uint64_t seed)
    : MicroLM(config, std::move(vocab), seed, init_params(config, seed)) {}

MicroLM::MicroLM(ModelConfig config, Vocab vocab, std::uint64_t seed, std::vector<double> params)
    : config_(config), vocab_(std::move(vocab)), seed_(seed), params_(std::move(params)) {
    config_.validate();
    if (vocab_.size() != config_.vocab_size) throw PreconditionError("vocabulary size does not match model config");
    if (params_.size() != ParamLayout::for_config(config_).total)
        throw PreconditionError("parameter count does not match model config");
}

std::size_t MicroLM::token_embedding_offset() const noexcept { return layout_for(config_).tok_emb; }

MicroVLM::MicroVLM(MicroLM base, VisionConfig vision, std::uint64_t projector_seed)
    : MicroVLM(base, vision, projector_seed, init_projector(base.config(), vision, projector_seed)) {}

MicroVLM::MicroVLM(MicroLM base, VisionConfig vision, std::uint64_t projector_seed, std::vector<double> projector)
    : base_(std::move(base)), vision_(vision), projector_seed_(projector_seed), projector_(std::move(projector)) {
    vision_.validate();
    const std::size_t want =
        static_cast<std::size_t>(vision_.patch_dim()) * base_.config().d_model + base_.config().d_model;
    if (projector_.size() != want) throw PreconditionError("projector size does not match vision config");
    if (vision_.num_patches() >= base_.config().context)
        throw PreconditionError("patch sequence does not fit in the model context");
}

// ----------------------------------------------------------------------------
// Inference

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

std::vector<double> forward_logits(const MicroLM& model, std::span<const int> tokens) {
    const auto& cfg = model.config();
    if (tokens.empty()) throw PreconditionError("empty input");
    if (static_cast<int>(tokens.size()) > cfg.context)
        throw PreconditionError("input of length " + std::to_string(tokens.size()) + " exceeds context " +
                                std::to_string(cfg.context));
    const auto& layout = layout_for(cfg);
    const int T = static_cast<int>(tokens.size());
    std::vector<double> x(static_cast<std::size_t>(T) * cfg.d_model);
    detail::embed_tokens(cfg, layout, model.params(), tokens, 0, x);
    return detail::forward_last(cfg, layout, model.params(), x, T, 0, nullptr, nullptr);
}

struct AnchoredScorer::State {
    detail::PrefixState prefix;
};

AnchoredScorer::AnchoredScorer(const MicroLM& model, std::span<const int> anchor)
    : model_(&model), anchor_(anchor.begin(), anchor.end()), state_(std::make_unique<State>()) {
    const auto& cfg = model.config();
    if (anchor_.empty()) throw PreconditionError("empty input");
    if (static_cast<int>(anchor_.size()) > cfg.context)
        throw PreconditionError("input of length " + std::to_string(anchor_.size()) + " exceeds context " +
                                std::to_string(cfg.context));
    const auto& layout = layout_for(cfg);
    const int T = static_cast<int>(anchor_.size());
    std::vector<double> x(static_cast<std::size_t>(T) * cfg.d_model);
    detail::embed_tokens(cfg, layout, model.params(), anchor_, 0, x);
    anchor_logits_ = detail::forward_last(cfg, layout, model.params(), x, T, 0, nullptr, &state_->prefix);
}

AnchoredScorer::~AnchoredScorer() = default;
AnchoredScorer::AnchoredScorer(AnchoredScorer&&) noexcept = default;
AnchoredScorer& AnchoredScorer::operator=(AnchoredScorer&&) noexcept = default;

std::vector<double> AnchoredScorer::logits(std::span<const int> tokens) const {
    const auto& cfg = model_->config();
    if (tokens.empty()) throw PreconditionError("empty input");
    if (static_cast<int>(tokens.size()) > cfg.context)
        throw PreconditionError("input of length " + std::to_string(tokens.size()) + " exceeds context " +
                                std::to_string(cfg.context));
    const std::size_t n = std::min(tokens.size(), anchor_.size());
    std::size_t shared = 0;
    while (shared < n && tokens[shared] == anchor_[shared]) ++shared;
    if (shared == tokens.size() && shared == anchor_.size()) return anchor_logits_;
    // The last position is always recomputed.
    const int start = static_cast<int>(std::min(shared, tokens.size() - 1));
    const auto& layout = layout_for(cfg);
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    thread_local std::vector<double> x;
    x.resize(static_cast<std::size_t>(T) * d);
    detail::embed_tokens(cfg, layout, model_->params(), tokens.subspan(static_cast<std::size_t>(start)), start,
                         std::span<double>(x).subspan(static_cast<std::size_t>(start) * d));
    return detail::forward_last(cfg, layout, model_->params(), x, T, start, &state_->prefix, nullptr);
}

std::vector<double> forward_logits(const MicroVLM& model, const PixelGrid& pixels, std::span<const int> tokens) {
    if (pixels.height != model.vision().height || pixels.width != model.vision().width)
        throw PreconditionError("pixel grid shape does not match the model's vision config");
    std::vector<double> px(pixels.data.begin(), pixels.data.end());
    const auto& cfg = model.base().config();
    const auto& layout = layout_for(cfg);
    auto in = embed_with_pixels(model, layout, px, tokens);
    return detail::forward_last(cfg, layout, model.base().params(), in.x, in.T, 0, nullptr, nullptr);
}

double log_target_prob_relaxed(const MicroLM& model, const Matrix& prefix_weights, std::span<const int> prompt,
                               std::span<const int> candidates, int target) {
    const auto& cfg = model.config();
    check_candidates(cfg.vocab_size, candidates, target);
    const auto& layout = layout_for(cfg);
    auto in = embed_with_prefix_weights(model, layout, prefix_weights, prompt);
    thread_local ForwardCache cache;
    const auto logits = detail::forward(cfg, layout, model.params(), in.x, in.T, cache, Heads::Last);
    return detail::candidate_log_prob_grad(logits, candidates, target, {});
}

Matrix grad_onehot(const MicroLM& model, const TokenOneHot& prefix, std::span<const int> prompt,
                   std::span<const int> candidates, int target) {
    const auto& cfg = model.config();
    check_candidates(cfg.vocab_size, candidates, target);
    const auto& layout = layout_for(cfg);
    const auto& E = prefix.matrix();
    auto in = embed_with_prefix_weights(model, layout, E, prompt);
    thread_local ForwardCache cache;
    const auto logits = detail::forward(cfg, layout, model.params(), in.x, in.T, cache, Heads::Last);
    std::vector<double> dlogits(logits.size());
    detail::candidate_log_prob_grad(logits, candidates, target, dlogits);
    const int d = cfg.d_model;
    std::vector<double> dx(static_cast<std::size_t>(in.T) * d);
    detail::backward(cfg, layout, model.params(), cache, dlogits, Heads::Last, {}, dx);

    // dE[i][v] = dx_i . tok_emb[v]
    Matrix grad(E.rows, cfg.vocab_size);
    const double* te = model.params().data() + layout.tok_emb;
    for (int i = 0; i < E.rows; ++i) {
        const double* g = dx.data() + static_cast<std::size_t>(i) * d;
        for (int v = 0; v < cfg.vocab_size; ++v) {
            const double* e = te + static_cast<std::size_t>(v) * d;
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += g[j] * e[j];
            grad(i, v) = s;
        }
    }
    return grad;
}

double log_target_prob_pixels(const MicroVLM& model, std::span<const double> pixels, std::span<const int> prompt,
                              std::span<const int> candidates, int target) {
    const auto& cfg = model.base().config();
    check_candidates(cfg.vocab_size, candidates, target);
    const auto& layout = layout_for(cfg);
    auto in = embed_with_pixels(model, layout, pixels, prompt);
    thread_local ForwardCache cache;
    const auto logits = detail::forward(cfg, layout, model.base().params(), in.x, in.T, cache, Heads::Last);
    return detail::candidate_log_prob_grad(logits, candidates, target, {});
}

std::vector<double> grad_pixels(const MicroVLM& model, const PixelGrid& pixels, std::span<const int> prompt,
                                std::span<const int> candidates, int target) {
    const auto& cfg = model.base().config();
    const auto& vc = model.vision();
    if (pixels.height != vc.height || pixels.width != vc.width)
        throw PreconditionError("pixel grid shape does not match the model's vision config");
    check_candidates(cfg.vocab_size, candidates, target);
    const auto& layout = layout_for(cfg);
    std::vector<double> px(pixels.data.begin(), pixels.data.end());
    auto in = embed_with_pixels(model, layout, px, prompt);
    thread_local ForwardCache cache;
    const auto logits = detail::forward(cfg, layout, model.base().params(), in.x, in.T, cache, Heads::Last);
    std::vector<double> dlogits(logits.size());
    detail::candidate_log_prob_grad(logits, candidates, target, dlogits);
    const int d = cfg.d_model;
    std::vector<double> dx(static_cast<std::size_t>(in.T) * d);
    detail::backward(cfg, layout, model.base().params(), cache, dlogits, Heads::Last, {}, dx);

    std::vector<double> grad(px.size(), 0.0);
    const double* W = model.projector().data();
    const int pcols = vc.width / vc.patch;
    for (int p = 0; p < vc.num_patches(); ++p) {
        const int pr = p / pcols, pc = p % pcols;
        const double* g = dx.data() + static_cast<std::size_t>(p) * d;
        int idx = 0;
        for (int dy = 0; dy < vc.patch; ++dy) {
            for (int dxp = 0; dxp < vc.patch; ++dxp) {
                const std::size_t base =
                    (static_cast<std::size_t>(pr * vc.patch + dy) * vc.width + static_cast<std::size_t>(pc * vc.patch + dxp)) * 3;
                for (int ch = 0; ch < 3; ++ch) {
                    const double* w = W + static_cast<std::size_t>(idx++) * d;
                    double s = 0.0;
                    for (int j = 0; j < d; ++j) s += g[j] * w[j];
                    grad[base + ch] = s / 255.0;
                }
            }
        }
    }
    return grad;
}

// ----------------------------------------------------------------------------
// Training

namespace {

struct Split {
    std::vector<int> train;
    std::vector<int> heldout;
};

Split split_corpus(const MicroLM& model, const TrainCorpus& corpus, const TrainOptions& options) {
    corpus.validate(model.vocab());
    auto ids = model.vocab().encode(corpus.text);
    const auto n = ids.size();
    auto hold = static_cast<std::size_t>(std::floor(static_cast<double>(n) * options.holdout_fraction));
    hold = std::clamp<std::size_t>(hold, std::min<std::size_t>(n / 2, 2), n / 2);
    Split s;
    s.train.assign(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(hold));
    s.heldout.assign(ids.end() - static_cast<std::ptrdiff_t>(hold), ids.end());
    if (s.train.size() < 2 || s.heldout.size() < 2) throw PreconditionError("corpus '" + corpus.name + "' is too short");
    return s;
}

int effective_seq_len(const MicroLM& model, const TrainOptions& options, std::size_t available) {
    int len = options.seq_len > 0 ? options.seq_len : model.config().context;
    len = std::min(len, model.config().context);
    len = std::min<int>(len, static_cast<int>(available) - 1);
    return len;
}

// Cross-entropy over all positions of one window; fills dlogits with
// d(loss)/d(logits) scaled by `weight` when requested.
double window_loss(const MicroLM& model, const ParamLayout& layout, std::span<const int> window, ForwardCache& cache,
                   std::vector<double>* dlogits, double weight) {
    const auto& cfg = model.config();
    const int T = static_cast<int>(window.size()) - 1;
    const int V = cfg.vocab_size;
    std::vector<double> x(static_cast<std::size_t>(T) * cfg.d_model);
    detail::embed_tokens(cfg, layout, model.params(), window.first(static_cast<std::size_t>(T)), 0, x);
    const auto logits = detail::forward(cfg, layout, model.params(), x, T, cache, Heads::All);
    if (dlogits) dlogits->assign(logits.size(), 0.0);
    double loss = 0.0;
    for (int t = 0; t < T; ++t) {
        const double* z = logits.data() + static_cast<std::size_t>(t) * V;
        const double mx = *std::max_element(z, z + V);
        double sum = 0.0;
        for (int v = 0; v < V; ++v) sum += std::exp(z[v] - mx);
        const double lse = mx + std::log(sum);
        const int y = window[static_cast<std::size_t>(t) + 1];
        loss += lse - z[y];
        if (dlogits) {
            double* g = dlogits->data() + static_cast<std::size_t>(t) * V;
            for (int v = 0; v < V; ++v) g[v] = weight * std::exp(z[v] - lse);
            g[y] -= weight;
        }
    }
    return loss / T;
}

double heldout_loss_ids(const MicroLM& model, std::span<const int> heldout, const TrainOptions& options) {
    const auto& layout = layout_for(model.config());
    const int len = effective_seq_len(model, options, heldout.size());
    const std::size_t span_len = static_cast<std::size_t>(len) + 1;
    const int windows = std::max(1, options.eval_windows);
    const std::size_t room = heldout.size() - span_len;
    ForwardCache cache;
    double total = 0.0;
    for (int w = 0; w < windows; ++w) {
        const std::size_t start = windows == 1 ? 0 : room * static_cast<std::size_t>(w) / static_cast<std::size_t>(windows - 1);
        total += window_loss(model, layout, heldout.subspan(start, span_len), cache, nullptr, 0.0);
    }
    return total / windows;
}

void run_training(MicroLM& model, const TrainCorpus& corpus, const TrainOptions& options, std::uint64_t data_seed,
                  TrainLog* log) {
    const auto split = split_corpus(model, corpus, options);
    const auto& cfg = model.config();
    const auto& layout = layout_for(cfg);
    const int len = effective_seq_len(model, options, split.train.size());
    const int d = cfg.d_model;
    const std::size_t n = model.params().size();
    std::vector<double> grad(n), m(n, 0.0), v(n, 0.0), dlogits, dx(static_cast<std::size_t>(len) * d);
    CounterRng rng(data_seed);
    ForwardCache cache;
    const int batch = std::max(1, options.batch);
    const double weight = 1.0 / (static_cast<double>(batch) * len);
    const int eval_every = std::max(1, options.steps / 10);

    if (log) {
        log->eval_every = eval_every;
        log->heldout_loss.assign(1, heldout_loss_ids(model, split.heldout, options));
    }

    auto params = model.mutable_params();
    double b1t = 1.0, b2t = 1.0;
    for (int step = 0; step < options.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (int b = 0; b < batch; ++b) {
            const std::size_t start = rng.below(split.train.size() - static_cast<std::size_t>(len));
            const auto window = std::span<const int>(split.train).subspan(start, static_cast<std::size_t>(len) + 1);
            window_loss(model, layout, window, cache, &dlogits, weight);
            detail::backward(cfg, layout, model.params(), cache, dlogits, Heads::All, grad, dx);
            for (int t = 0; t < len; ++t) {
                const int id = window[static_cast<std::size_t>(t)];
                double* gt = grad.data() + layout.tok_emb + static_cast<std::size_t>(id) * d;
                double* gp = grad.data() + layout.pos_emb + static_cast<std::size_t>(t) * d;
                const double* g = dx.data() + static_cast<std::size_t>(t) * d;
                for (int j = 0; j < d; ++j) {
                    gt[j] += g[j];
                    gp[j] += g[j];
                }
            }
        }
        b1t *= options.beta1;
        b2t *= options.beta2;
        const double lr_t = options.lr * std::sqrt(1.0 - b2t) / (1.0 - b1t);
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * grad[i];
            v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * grad[i] * grad[i];
            params[i] -= lr_t * m[i] / (std::sqrt(v[i]) + options.eps);
        }
        if (log && ((step + 1) % eval_every == 0 || step + 1 == options.steps))
            log->heldout_loss.push_back(heldout_loss_ids(model, split.heldout, options));
    }
}

void check_train_options(const TrainOptions& options, bool allow_zero_lr) {
    if (options.steps < 1) throw PreconditionError("training requires steps >= 1");
    if (allow_zero_lr ? !(options.lr >= 0.0) : !(options.lr > 0.0))
        throw PreconditionError(allow_zero_lr ? "learning rate must be >= 0" : "learning rate must be > 0");
    if (!(options.holdout_fraction > 0.0 && options.holdout_fraction < 1.0))
        throw PreconditionError("holdout fraction must lie in (0, 1)");
}

}  // namespace

MicroLM train(std::uint64_t init_seed, const TrainCorpus& corpus, const TrainOptions& options,
              const ModelConfig& config, const Vocab& vocab, TrainLog* log) {
    check_train_options(options, false);
    corpus.validate(vocab);
    MicroLM model(config, vocab, init_seed);
    run_training(model, corpus, options, derive_seed(init_seed ^ corpus.seed, "micromodel.train"), log);
    return model;
}

MicroLM finetune(const MicroLM& model, const TrainCorpus& corpus, const TrainOptions& options, TrainLog* log) {
    check_train_options(options, true);
    corpus.validate(model.vocab());
    MicroLM tuned = model;
    run_training(tuned, corpus, options, derive_seed(model.seed() ^ corpus.seed, "micromodel.finetune"), log);
    return tuned;
}

double heldout_loss(const MicroLM& model, const TrainCorpus& corpus, const TrainOptions& options) {
    const auto split = split_corpus(model, corpus, options);
    return heldout_loss_ids(model, split.heldout, options);
}

double param_distance(const MicroLM& a, const MicroLM& b) {
    if (a.params().size() != b.params().size()) throw PreconditionError("models have different shapes");
    double s = 0.0;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        const double diff = a.params()[i] - b.params()[i];
        s += diff * diff;
    }
    return std::sqrt(s);
}

// ----------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'R', 'S', 'P', 'M', 'O', 'D', 'E', 'L'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

void put_f64s(std::ostream& out, std::span<const double> values) {
    put_u64(out, values.size());
    for (const double x : values) put_u64(out, std::bit_cast<std::uint64_t>(x));
}

std::uint64_t get_uint(std::istream& in, int bytes) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), bytes)) throw FormatError("truncated checkpoint");
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

std::uint32_t get_u32(std::istream& in) { return static_cast<std::uint32_t>(get_uint(in, 4)); }
std::uint64_t get_u64(std::istream& in) { return get_uint(in, 8); }

std::vector<double> get_f64s(std::istream& in, std::size_t limit) {
    const auto n = get_u64(in);
    if (n != limit) throw FormatError("checkpoint parameter count does not match its configuration");
    std::vector<double> v(n);
    for (auto& x : v) x = std::bit_cast<double>(get_u64(in));
    return v;
}

void write_header(std::ostream& out, const MicroLM& model, std::uint32_t kind) {
    out.write(kMagic, sizeof kMagic);
    put_u32(out, kFormatVersion);
    put_u32(out, kind);
    const auto& c = model.config();
    for (const int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.context, c.d_ff}) put_u32(out, static_cast<std::uint32_t>(v));
    put_u64(out, model.seed());
    const auto& a = model.vocab().alphabet();
    put_u32(out, static_cast<std::uint32_t>(a.size()));
    out.write(a.data(), static_cast<std::streamsize>(a.size()));
}

}  // namespace

void write_checkpoint(std::ostream& out, const MicroLM& model) {
    write_header(out, model, 0);
    put_f64s(out, model.params());
    if (!out) throw Error("failed to write checkpoint");
}

void write_checkpoint(std::ostream& out, const MicroVLM& model) {
    write_header(out, model.base(), 1);
    const auto& v = model.vision();
    put_u32(out, static_cast<std::uint32_t>(v.height));
    put_u32(out, static_cast<std::uint32_t>(v.width));
    put_u32(out, static_cast<std::uint32_t>(v.patch));
    put_u64(out, model.projector_seed());
    put_f64s(out, model.base().params());
    put_f64s(out, model.projector());
    if (!out) throw Error("failed to write checkpoint");
}

AnyModel read_checkpoint(std::istream& in) {
    char magic[8];
    if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kMagic)) throw FormatError("not an rsp checkpoint");
    const auto version = get_u32(in);
    if (version != kFormatVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto kind = get_u32(in);
    if (kind > 1) throw FormatError("unknown checkpoint kind");
    ModelConfig c;
    c.vocab_size = static_cast<int>(get_u32(in));
    c.d_model = static_cast<int>(get_u32(in));
    c.n_layers = static_cast<int>(get_u32(in));
    c.n_heads = static_cast<int>(get_u32(in));
    c.context = static_cast<int>(get_u32(in));
    c.d_ff = static_cast<int>(get_u32(in));
    c.validate();
    const auto seed = get_u64(in);
    const auto alen = get_u32(in);
    if (alen > 256) throw FormatError("alphabet too long");
    std::string alphabet(alen, '\0');
    if (!in.read(alphabet.data(), alen)) throw FormatError("truncated checkpoint");
    const std::size_t expected = ParamLayout::for_config(c).total;
    if (kind == 0) {
        auto params = get_f64s(in, expected);
        return MicroLM(c, Vocab(std::move(alphabet)), seed, std::move(params));
    }
    VisionConfig v;
    v.height = static_cast<int>(get_u32(in));
    v.width = static_cast<int>(get_u32(in));
    v.patch = static_cast<int>(get_u32(in));
    v.validate();
    const auto pseed = get_u64(in);
    auto params = get_f64s(in, expected);
    auto projector = get_f64s(in, static_cast<std::size_t>(v.patch_dim() + 1) * c.d_model);
    return MicroVLM(MicroLM(c, Vocab(std::move(alphabet)), seed, std::move(params)), v, pseed, std::move(projector));
}

void save_checkpoint(const std::string& path, const MicroLM& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    write_checkpoint(out, model);
}

void save_checkpoint(const std::string& path, const MicroVLM& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    write_checkpoint(out, model);
}

AnyModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint '" + path + "'");
    return read_checkpoint(in);
}

}  // namespace rsp::micro
