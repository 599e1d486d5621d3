#pragma once

// Training-set construction: synthesized backgrounds, centred copy-paste of
// character cut-outs, and the union of originals with the pasted images.

#include "storyplug/backend.hpp"
#include "storyplug/image.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace storyplug {

struct CharacterImage {
    Image rgba;  // alpha is the character mask
    std::string source_path;

    // Throws InvalidCharacterImage if alpha is missing or fully transparent.
    void validate() const;
};

struct SceneDescriptionList {
    std::vector<std::string> scenes;

    static SceneDescriptionList from_text(std::string_view text);
    static SceneDescriptionList load(const std::filesystem::path& path);
};

struct BackgroundImage {
    Image image;
    int scene_index = 0;
    std::uint64_t seed = 0;
};

struct BackgroundOptions {
    int steps = 50;
    double guidance_scale = 7.5;
    int workers = 1;
};

std::vector<BackgroundImage> generate_backgrounds(const SceneDescriptionList& scenes, const Backend& backend, int count,
                                                  std::uint64_t seed, const BackgroundOptions& options = {});

struct ScaleRange {
    double lo = 0.4;
    double hi = 0.7;
};

struct PasteResult {
    Image image;
    double scale = 1.0;
    int left = 0;
    int top = 0;
    int width = 0;
    int height = 0;
};

// Resizes the character by a factor drawn uniformly from `scale` (nearest
// neighbour) and alpha-composites it with its centre on the background centre.
PasteResult copy_paste(const CharacterImage& character, const Image& background, ScaleRange scale, std::uint64_t seed);

enum class SampleKind { character, augmented };

struct TrainingItem {
    SampleKind kind = SampleKind::character;
    Image image;  // RGB, backend image side
    int character_index = 0;
    int background_index = -1;
    int scene_index = -1;
    std::uint64_t seed = 0;
    double scale = 1.0;
    std::string path;  // set when the dataset lives on disk
};

struct TrainingDataset {
    std::string label;  // class noun shared by every item
    std::uint64_t seed = 0;
    int m = 0;
    int n = 0;
    std::vector<TrainingItem> items;

    size_t size() const { return items.size(); }
};

struct BuildOptions {
    ScaleRange scale;
    int image_side = 64;
    int workers = 1;
};

std::vector<CharacterImage> load_character_dir(const std::filesystem::path& dir);

// Characters are first fitted to the background's shorter side, so the paste
// scale is a fraction of that side.
TrainingDataset build_training_set(std::span<const CharacterImage> characters,
                                   std::span<const BackgroundImage> backgrounds, int n, const std::string& class_noun,
                                   std::uint64_t seed, const BuildOptions& options = {});
TrainingDataset build_training_set(const std::filesystem::path& char_dir, std::span<const BackgroundImage> backgrounds,
                                   int n, const std::string& class_noun, std::uint64_t seed,
                                   const BuildOptions& options = {});

// Backgrounds + copy-paste in one call; what the CLI and service run.
struct AugmentPlan {
    std::filesystem::path characters_dir;
    SceneDescriptionList scenes;
    int n = 300;
    int background_count = 0;  // 0: one per scene, at least one
    std::string class_noun;  // may be left empty and set at training time
    std::uint64_t seed = 0;
    BackgroundOptions backgrounds;
    BuildOptions build;
};
TrainingDataset run_augmentation(const AugmentPlan& plan, const Backend& backend);

nlohmann::json dataset_manifest(const TrainingDataset& dataset);
// Writes images/<index>.png and manifest.json under dir.
void write_dataset(TrainingDataset& dataset, const std::filesystem::path& dir);
TrainingDataset read_dataset(const std::filesystem::path& dir);

}  // namespace storyplug
