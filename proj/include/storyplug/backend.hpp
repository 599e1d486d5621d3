#pragma once

#include "storyplug/autodiff.hpp"
#include "storyplug/error.hpp"
#include "storyplug/image.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace storyplug {

using Matrix = Eigen::MatrixXd;

struct SpecialTokens {
    int bos = 0;
    int eos = 0;
    int pad = 0;

    bool operator==(const SpecialTokens&) const = default;
};

// Shape contract shared by every backend. L is the token-sequence length,
// H the embedding width. Plugins carry L - 2 rows.
struct BackendDescriptor {
    std::string backend_id;
    int L = 0;
    int H = 0;
    int latent_side = 0;
    int latent_channels = 0;
    std::vector<int> attention_sides;
    SpecialTokens token_ids;
    int vocab_size = 0;
    // Pixel side of a decoded image is latent_side * image_scale.
    int image_scale = 8;

    int plugin_rows() const { return L - 2; }
    int image_side() const { return latent_side * image_scale; }
    // Throws InvalidConfig on the first violated invariant.
    void validate() const;

    bool operator==(const BackendDescriptor&) const = default;
};

// 2-block causal text encoder and 2-block cross-attention denoiser at desk scale.
BackendDescriptor toy_descriptor();
// Shape-only descriptor matching a Stable Diffusion v2.1 text encoder
// (OpenCLIP ViT-H: 77 tokens, width 1024).
BackendDescriptor sd21_descriptor();

struct WordPositions {
    std::string word;
    std::vector<int> positions;
};

struct TokenizedText {
    std::vector<int> ids;  // exactly L entries
    std::vector<WordPositions> words;
    int content_length = 0;

    // Positions (in 1..L-2) of the given single-piece word, left to right.
    std::vector<int> positions_of(std::string_view word) const;
};

// Lowercases, splits on whitespace, strips surrounding punctuation, then
// splits each word on '-', '\'' and '/' into pieces; one token per piece.
std::vector<std::string> word_pieces(std::string_view word);
int piece_token_id(const BackendDescriptor& d, std::string_view piece);
TokenizedText tokenize(const BackendDescriptor& d, std::string_view text, bool truncate = false);
// [bos, eos, pad, ...]: the empty-prompt sequence used for unconditional guidance.
std::vector<int> empty_sequence(const BackendDescriptor& d);
// Throws UnknownClassNoun / MultiTokenNoun unless the noun is exactly one piece.
int class_noun_token(const BackendDescriptor& d, std::string_view class_noun,
                     ErrorCode multi_token_error);

struct NamedMatrix {
    std::string name;
    Matrix value;
};

class ParameterSet {
public:
    void add(std::string name, Matrix value);
    const Matrix& get(std::string_view name) const;
    Matrix& get(std::string_view name);
    int index_of(std::string_view name) const;
    size_t size() const { return entries_.size(); }
    const NamedMatrix& operator[](size_t i) const { return entries_[i]; }
    NamedMatrix& operator[](size_t i) { return entries_[i]; }
    size_t scalar_count() const;
    bool operator==(const ParameterSet& other) const;

private:
    std::vector<NamedMatrix> entries_;
};

enum class EncoderKind { frozen, finetuned };

struct EncoderState {
    EncoderKind kind = EncoderKind::frozen;
    std::shared_ptr<const ParameterSet> parameters;
    BackendDescriptor descriptor;
};

// Graph-mode view of an encoder: one Var per ParameterSet entry, same order.
struct EncoderBinding {
    std::vector<ad::Var> vars;
    const ParameterSet* source = nullptr;
};
EncoderBinding bind_parameters(const ParameterSet& params, bool requires_grad);

struct AttentionSite {
    int layer = 0;
    int side = 0;
};

// Receives pre-softmax cross-attention scores: side*side rows (row-major
// cells), L columns (token positions). Whatever it leaves in `scores` is what
// the softmax consumes.
using AttentionEditor = std::function<void(const AttentionSite&, Matrix& scores)>;

struct AttentionMap {
    AttentionSite site;
    Matrix probs;  // post-softmax, cells x L
};

struct NoisePrediction {
    Matrix predicted_noise;  // cells x latent_channels
    std::vector<AttentionMap> cross_attention_maps;
};

struct PredictionGraph {
    ad::Var predicted_noise;
    std::vector<AttentionMap> cross_attention_maps;
};

// Linear-in-sqrt beta schedule over the training timesteps.
struct NoiseSchedule {
    int train_timesteps = 1000;
    std::vector<double> alphas_cumprod;

    static NoiseSchedule scaled_linear(int train_timesteps, double beta_start, double beta_end);
    // Leading-spaced DDIM timesteps, descending.
    std::vector<int> ddim_timesteps(int steps) const;
};

class Backend {
public:
    virtual ~Backend() = default;

    virtual const BackendDescriptor& descriptor() const = 0;
    virtual const EncoderState& frozen_encoder() const = 0;
    virtual const NoiseSchedule& schedule() const = 0;

    virtual TokenizedText tokenize(std::string_view text) const { return storyplug::tokenize(descriptor(), text); }
    // L x H contextual embeddings; rows are token positions.
    virtual Matrix encode_tokens(const EncoderState& state, std::span<const int> tokens) const = 0;
    virtual NoisePrediction predict_noise(const Matrix& latent, const Matrix& embeddings, int t,
                                          const AttentionEditor* editor = nullptr) const = 0;
    virtual Image decode_latent(const Matrix& latent) const = 0;
    virtual Matrix encode_image(const Image& image) const = 0;

    // Differentiable routes used by text-encoder fine-tuning.
    virtual ad::Var encode_tokens_graph(const EncoderBinding& encoder, std::span<const int> tokens) const = 0;
    virtual PredictionGraph predict_noise_graph(const Matrix& latent, const ad::Var& embeddings, int t,
                                                const AttentionEditor* editor = nullptr) const = 0;
};

struct ToyBackendOptions {
    std::uint64_t seed = 20240601;
    int mlp_width = 64;
};

class ToyBackend final : public Backend {
public:
    explicit ToyBackend(ToyBackendOptions options = {});

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    const EncoderState& frozen_encoder() const override { return frozen_; }
    const NoiseSchedule& schedule() const override { return schedule_; }

    Matrix encode_tokens(const EncoderState& state, std::span<const int> tokens) const override;
    NoisePrediction predict_noise(const Matrix& latent, const Matrix& embeddings, int t,
                                  const AttentionEditor* editor = nullptr) const override;
    Image decode_latent(const Matrix& latent) const override;
    Matrix encode_image(const Image& image) const override;

    ad::Var encode_tokens_graph(const EncoderBinding& encoder, std::span<const int> tokens) const override;
    PredictionGraph predict_noise_graph(const Matrix& latent, const ad::Var& embeddings, int t,
                                        const AttentionEditor* editor = nullptr) const override;

    const ParameterSet& denoiser_parameters() const { return denoiser_; }
    // Encoder parameters drawn from a different seed; used by tests to get
    // independent random encoders with the same architecture.
    EncoderState random_encoder(std::uint64_t seed, EncoderKind kind = EncoderKind::finetuned) const;

private:
    ParameterSet make_encoder_parameters(std::uint64_t seed) const;
    void check_latent(const Matrix& latent) const;

    ToyBackendOptions options_;
    BackendDescriptor descriptor_;
    EncoderState frozen_;
    ParameterSet denoiser_;
    std::vector<ad::Var> denoiser_vars_;
    NoiseSchedule schedule_;
    Matrix color_map_;          // latent_channels x 3
    Matrix color_map_inverse_;  // 3 x latent_channels
    Matrix pool_;               // (side/2)^2 x side^2 average pooling
    Matrix upsample_;           // side^2 x (side/2)^2 nearest upsampling
};

Matrix sinusoidal_embedding(int t, int width);

// Plain DDIM with classifier-free guidance. `editor` (optional) is applied to
// the conditional pass only. `on_step` observes each conditional prediction.
struct SamplerOptions {
    int steps = 100;
    double guidance_scale = 7.5;
    std::uint64_t seed = 0;
};

struct SamplerStep {
    int index = 0;     // 0 .. steps-1
    int timestep = 0;  // training timestep
};

using StepEditorFactory = std::function<const AttentionEditor*(const SamplerStep&)>;
using StepObserver = std::function<void(const SamplerStep&, const NoisePrediction&)>;

Matrix initial_latent(const BackendDescriptor& d, std::uint64_t seed);
Matrix ddim_sample(const Backend& backend, const Matrix& cond, const Matrix& uncond, const SamplerOptions& options,
                   const StepEditorFactory& editor_for_step = {}, const StepObserver& observer = {});

}  // namespace storyplug
