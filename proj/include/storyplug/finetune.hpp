#pragma once

// Text-encoder fine-tuning on a labelled training set.
//
//   l_sub   = mean ||eps - eps_theta(x_t, E(c), t)||^2,  x_t = sqrt(ab_t) x + sqrt(1 - ab_t) eps
//   l_reg   = sum over non-character positions of ||E(c)_l - E_frozen(c)_l||^2
//   l_total = l_sub + lambda * l_reg
//
// c is the bare class noun. Only encoder weights move; of the token table,
// only the class-noun row is trainable.

#include "storyplug/augmentation.hpp"
#include "storyplug/backend.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace storyplug {

struct FineTuneConfig {
    double lambda = 0.01;
    double learning_rate = 5e-6;
    int steps = 2000;
    int batch_size = 1;
    std::uint64_t seed = 0;
    // Regularise pad positions too (bos and eos always are).
    bool regularize_pads = true;

    // Throws InvalidConfig.
    void validate() const;
    nlohmann::json to_json() const;
    static FineTuneConfig from_json(const nlohmann::json& j);
};

// The default learning rate (5e-6) barely moves a 32-wide toy encoder in a few
// thousand steps; the toy preset uses a larger SGD step.
FineTuneConfig toy_finetune_config(std::uint64_t seed, int steps = 2000);

struct LossBreakdown {
    double l_sub = 0.0;
    double l_reg = 0.0;
    double l_total = 0.0;
};

double total_loss(double l_sub, double l_reg, double lambda);

// Tokenised class noun and the positions regularised toward the frozen encoder.
struct ConditioningText {
    std::vector<int> ids;
    int character_position = 1;
    std::vector<int> nct_positions;
};
ConditioningText conditioning_text(const BackendDescriptor& d, std::string_view class_noun, bool include_pads = true);

double subject_loss(const Backend& backend, const EncoderState& encoder, const Matrix& image_latent,
                    std::string_view class_noun, int t, const Matrix& noise);
double regularization_loss(const Backend& backend, const EncoderState& finetuned, const EncoderState& frozen,
                           std::string_view class_noun, bool include_pads = true);

// x_t for a clean latent, a training timestep and a noise draw.
Matrix forward_noise(const NoiseSchedule& schedule, const Matrix& latent, int t, const Matrix& noise);

// One (image, t, eps) triple.
struct TrainingSample {
    int item = 0;
    int t = 0;
    Matrix noise;
};

// The samples a training step draws; a pure function of (seed, step).
std::vector<TrainingSample> draw_step_samples(const Backend& backend, size_t dataset_size, std::uint64_t seed,
                                              int step, int batch_size);

struct LossAndGradient {
    LossBreakdown loss;
    std::vector<Matrix> gradient;  // one per encoder parameter, same order
};

// Losses averaged over the samples (l_sub) plus lambda * l_reg; gradients with
// respect to every encoder parameter, trainable mask applied.
LossAndGradient loss_and_gradient(const Backend& backend, const ParameterSet& params, const EncoderState& frozen,
                                  std::span<const Matrix> latents, std::span<const TrainingSample> samples,
                                  std::string_view class_noun, double lambda, bool include_pads = true);
LossBreakdown evaluate_loss(const Backend& backend, const EncoderState& encoder, const EncoderState& frozen,
                            std::span<const Matrix> latents, std::span<const TrainingSample> samples,
                            std::string_view class_noun, double lambda, bool include_pads = true);

// 1 where a coordinate may be updated.
std::vector<Matrix> trainable_mask(const ParameterSet& params, int class_token);

// Dataset images mapped to latents (resized to the backend image side first).
std::vector<Matrix> encode_dataset(const Backend& backend, const TrainingDataset& dataset);

struct TrainingCheckpoint {
    FineTuneConfig config;
    std::string class_noun;
    std::string descriptor_id;
    int step = 0;  // number of completed steps
    ParameterSet parameters;
    std::vector<LossBreakdown> history;
};

void save_checkpoint(const TrainingCheckpoint& ckpt, const std::filesystem::path& path);
TrainingCheckpoint load_checkpoint(const std::filesystem::path& path);
EncoderState checkpoint_encoder(const TrainingCheckpoint& ckpt, const BackendDescriptor& descriptor);

void write_loss_csv(const std::vector<LossBreakdown>& history, const std::filesystem::path& path);

struct TrainOptions {
    std::optional<TrainingCheckpoint> resume;
    // Written every `checkpoint_every` steps (0 = only at the end) and on a non-finite loss.
    std::filesystem::path checkpoint_path;
    int checkpoint_every = 0;
    std::function<void(int step, const LossBreakdown&)> on_step;
};

struct TrainResult {
    EncoderState encoder;  // kind = finetuned
    TrainingCheckpoint checkpoint;
};

TrainResult train_text_encoder(const TrainingDataset& dataset, const FineTuneConfig& config, const Backend& backend,
                               const TrainOptions& options = {});

}  // namespace storyplug
