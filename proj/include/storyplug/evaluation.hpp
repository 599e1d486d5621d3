#pragma once

// Text alignment (prompt vs generated image) and image alignment (character
// references vs generated image), both as mean cosine similarity under an
// embedder, plus the manual scoring sheet for human evaluation.

#include "storyplug/image.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace storyplug {

using Embedding = Eigen::VectorXd;

class Embedder {
public:
    virtual ~Embedder() = default;
    // Unit L2 norm, deterministic.
    virtual Embedding embed_text(std::string_view text) const = 0;
    virtual Embedding embed_image(const Image& image) const = 0;
};

// Deterministic stand-in: text = normalised sum of per-word hashed Gaussian
// vectors; image = fixed random projection of an 8x8 mean-colour grid.
class HashEmbedder final : public Embedder {
public:
    explicit HashEmbedder(int dim = 64, std::uint64_t seed = 1);
    Embedding embed_text(std::string_view text) const override;
    Embedding embed_image(const Image& image) const override;

private:
    int dim_;
    std::uint64_t seed_;
    Eigen::MatrixXd projection_;  // dim x 192
};

double cosine(const Embedding& a, const Embedding& b);

double text_alignment(std::span<const Embedding> images, const Embedding& prompt);
// refs[c] holds the reference embeddings of character c.
double image_alignment(std::span<const Embedding> images, std::span<const std::vector<Embedding>> refs);

double text_alignment(std::span<const Image> images, std::string_view prompt, const Embedder& embedder);
double image_alignment(std::span<const Image> images, std::span<const std::vector<Image>> refs,
                       const Embedder& embedder);

struct EvalQuestion {
    std::string key;
    std::string text;
};

// Correspondence, coherence, quality.
std::vector<EvalQuestion> default_questions();

inline constexpr int kMinScore = 0;
inline constexpr int kMaxScore = 3;
// Throws InvalidScore outside [0, 3].
void validate_score(int score);

// One row per (image, question) with an empty score column. `manifest` is a
// story manifest (frames[].path) or an array of image paths.
std::string human_eval_sheet(const nlohmann::json& manifest, std::span<const EvalQuestion> questions);
void export_human_eval_sheet(const nlohmann::json& manifest, std::span<const EvalQuestion> questions,
                             const std::filesystem::path& path);

struct SheetScore {
    std::string image;
    std::string question;
    int score = 0;
};
// Parses a filled sheet; blank scores are skipped, out-of-range ones throw InvalidScore.
std::vector<SheetScore> read_scored_sheet(std::string_view csv);

struct StoryScores {
    std::string story;
    double ta = 0.0;
    double ia = 0.0;
};
// story,TA,IA
std::string scores_csv(std::span<const StoryScores> rows);

}  // namespace storyplug
