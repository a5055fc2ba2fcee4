#pragma once

// Tiny character-level transformer language models with hand-written
// reverse-mode gradients, an optional pixel-patch front end, training, and a
// binary checkpoint container.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace rsp::micro {

/// Character vocabulary. Token ids are positions in the alphabet string.
class Vocab {
public:
    explicit Vocab(std::string alphabet);

    /// Newline, space, a-z, A-Z, 0-9 (64 symbols).
    static Vocab default_chars();

    int size() const noexcept { return static_cast<int>(alphabet_.size()); }
    bool contains(char c) const noexcept { return index_[static_cast<unsigned char>(c)] >= 0; }
    int index_of(char c) const noexcept { return index_[static_cast<unsigned char>(c)]; }
    char symbol(int id) const { return alphabet_.at(static_cast<std::size_t>(id)); }
    const std::string& alphabet() const noexcept { return alphabet_; }

    /// Throws PreconditionError naming the first character outside the vocabulary.
    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    bool operator==(const Vocab& other) const noexcept { return alphabet_ == other.alphabet_; }

private:
    std::string alphabet_;
    int index_[256];
};

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int context = 128;
    int d_ff = 128;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct VisionConfig {
    int height = 16;
    int width = 16;
    int patch = 4;

    int num_patches() const noexcept { return (height / patch) * (width / patch); }
    int patch_dim() const noexcept { return patch * patch * 3; }
    void validate() const;
    bool operator==(const VisionConfig&) const = default;
};

/// Integer H x W x 3 image, row-major (row, column, channel), values 0..255.
struct PixelGrid {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    PixelGrid() = default;
    PixelGrid(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

    std::size_t size() const noexcept { return data.size(); }
    std::uint8_t& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
    std::uint8_t at(int r, int c, int ch) const { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
    bool operator==(const PixelGrid&) const = default;
};

/// Dense row-major real matrix.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const double> row(int r) const {
        return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
};

/// L x |V| {0,1} matrix with exactly one 1 per row.
class TokenOneHot {
public:
    TokenOneHot(std::span<const int> tokens, int vocab_size);

    const Matrix& matrix() const noexcept { return m_; }
    int length() const noexcept { return m_.rows; }
    std::vector<int> tokens() const;

private:
    Matrix m_;
};

struct TrainCorpus {
    std::string text;
    std::string name;
    std::uint64_t seed = 0;

    /// Throws PreconditionError if empty or if a character is not in vocab.
    void validate(const Vocab& vocab) const;
};

class MicroLM {
public:
    /// Randomly initialised model.
    MicroLM(ModelConfig config, Vocab vocab, std::uint64_t seed);
    /// Model with explicit parameters (checkpoint load).
    MicroLM(ModelConfig config, Vocab vocab, std::uint64_t seed, std::vector<double> params);

    const ModelConfig& config() const noexcept { return config_; }
    const Vocab& vocab() const noexcept { return vocab_; }
    std::uint64_t seed() const noexcept { return seed_; }

    std::span<const double> params() const noexcept { return params_; }
    std::span<double> mutable_params() noexcept { return params_; }

    /// Offset and length of the token embedding table inside params().
    std::size_t token_embedding_offset() const noexcept;

private:
    ModelConfig config_;
    Vocab vocab_;
    std::uint64_t seed_;
    std::vector<double> params_;
};

/// Language model with a linear patch projector in front of the token stream.
class MicroVLM {
public:
    MicroVLM(MicroLM base, VisionConfig vision, std::uint64_t projector_seed);
    MicroVLM(MicroLM base, VisionConfig vision, std::uint64_t projector_seed, std::vector<double> projector);

    const MicroLM& base() const noexcept { return base_; }
    const VisionConfig& vision() const noexcept { return vision_; }
    std::uint64_t projector_seed() const noexcept { return projector_seed_; }

    /// patch_dim x d_model weights followed by d_model biases.
    std::span<const double> projector() const noexcept { return projector_; }
    std::span<double> mutable_projector() noexcept { return projector_; }

private:
    MicroLM base_;
    VisionConfig vision_;
    std::uint64_t projector_seed_;
    std::vector<double> projector_;
};

// ----------------------------------------------------------------------------
// Inference and input gradients

/// Next-token logits after the full token sequence.
std::vector<double> forward_logits(const MicroLM& model, std::span<const int> tokens);
/// Next-token logits after the patch sequence of `pixels` followed by `tokens`.
std::vector<double> forward_logits(const MicroVLM& model, const PixelGrid& pixels, std::span<const int> tokens);

/// Last-position logits for sequences sharing leading tokens with a fixed
/// anchor. Shared positions are evaluated once, at construction. The model
/// must outlive the scorer.
class AnchoredScorer {
public:
    AnchoredScorer(const MicroLM& model, std::span<const int> anchor);
    ~AnchoredScorer();
    AnchoredScorer(AnchoredScorer&&) noexcept;
    AnchoredScorer& operator=(AnchoredScorer&&) noexcept;

    const std::vector<double>& anchor_logits() const noexcept { return anchor_logits_; }
    /// Equal to forward_logits(model, tokens). Safe to call concurrently.
    std::vector<double> logits(std::span<const int> tokens) const;

private:
    struct State;
    const MicroLM* model_;
    std::vector<int> anchor_;
    std::unique_ptr<State> state_;
    std::vector<double> anchor_logits_;
};

/// log of the target's probability renormalised over the candidate tokens,
/// for a relaxed (real-valued) prefix encoding followed by the prompt.
double log_target_prob_relaxed(const MicroLM& model, const Matrix& prefix_weights, std::span<const int> prompt,
                               std::span<const int> candidates, int target);

/// Gradient of log_target_prob_relaxed with respect to the one-hot matrix.
Matrix grad_onehot(const MicroLM& model, const TokenOneHot& prefix, std::span<const int> prompt,
                   std::span<const int> candidates, int target);

/// Same objective for a VLM fed real-valued pixel intensities (0..255 scale).
double log_target_prob_pixels(const MicroVLM& model, std::span<const double> pixels, std::span<const int> prompt,
                              std::span<const int> candidates, int target);

/// Gradient of the renormalised target log-probability with respect to the
/// pixel values (0..255 scale), laid out like PixelGrid::data.
std::vector<double> grad_pixels(const MicroVLM& model, const PixelGrid& pixels, std::span<const int> prompt,
                                std::span<const int> candidates, int target);

/// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> logits);

// ----------------------------------------------------------------------------
// Training

struct TrainOptions {
    int steps = 2000;
    double lr = 3e-3;
    int batch = 2;
    int seq_len = 0;  ///< 0 means the model context length
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double holdout_fraction = 0.1;
    int eval_windows = 16;
};

struct TrainLog {
    std::vector<double> heldout_loss;  ///< loss before step 0, then every eval_every steps
    int eval_every = 0;
};

MicroLM train(std::uint64_t init_seed, const TrainCorpus& corpus, const TrainOptions& options,
              const ModelConfig& config = {}, const Vocab& vocab = Vocab::default_chars(), TrainLog* log = nullptr);

MicroLM finetune(const MicroLM& model, const TrainCorpus& corpus, const TrainOptions& options, TrainLog* log = nullptr);

/// Mean next-token cross-entropy on fixed windows of the held-out tail.
double heldout_loss(const MicroLM& model, const TrainCorpus& corpus, const TrainOptions& options);

/// Euclidean distance between the parameter vectors of two same-shape models.
double param_distance(const MicroLM& a, const MicroLM& b);

// ----------------------------------------------------------------------------
// Checkpoints (layout documented in docs/checkpoint_format.md)

using AnyModel = std::variant<MicroLM, MicroVLM>;

void write_checkpoint(std::ostream& out, const MicroLM& model);
void write_checkpoint(std::ostream& out, const MicroVLM& model);
AnyModel read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const MicroLM& model);
void save_checkpoint(const std::string& path, const MicroVLM& model);
AnyModel load_checkpoint(const std::string& path);

}  // namespace rsp::micro
