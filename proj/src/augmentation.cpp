#include "storyplug/augmentation.hpp"

#include "storyplug/error.hpp"
#include "storyplug/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace storyplug {

namespace fs = std::filesystem;

void CharacterImage::validate() const {
    if (rgba.channels != 4) fail(ErrorCode::InvalidCharacterImage, "character image has no alpha channel: " + source_path);
    for (size_t i = 3; i < rgba.pixels.size(); i += 4) {
        if (rgba.pixels[i] != 0) return;
    }
    fail(ErrorCode::InvalidCharacterImage, "character image is fully transparent: " + source_path);
}

SceneDescriptionList SceneDescriptionList::from_text(std::string_view text) {
    SceneDescriptionList list;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        list.scenes.push_back(line.substr(b, e - b + 1));
    }
    return list;
}

SceneDescriptionList SceneDescriptionList::load(const fs::path& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorCode::IoError, "cannot read " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str());
}

std::vector<BackgroundImage> generate_backgrounds(const SceneDescriptionList& scenes, const Backend& backend, int count,
                                                  std::uint64_t seed, const BackgroundOptions& options) {
    if (scenes.scenes.empty()) fail(ErrorCode::EmptySceneList, "scene list is empty");
    if (count < 1) fail(ErrorCode::InvalidConfig, "background count must be >= 1");
    const auto& d = backend.descriptor();
    const auto& frozen = backend.frozen_encoder();
    const Matrix uncond = backend.encode_tokens(frozen, empty_sequence(d));
    std::vector<Matrix> scene_embeddings;
    for (const auto& s : scenes.scenes) {
        // Scene sentences longer than the context are cut rather than rejected.
        scene_embeddings.push_back(backend.encode_tokens(frozen, tokenize(d, s, true).ids));
    }
    std::vector<BackgroundImage> out(static_cast<size_t>(count));
    parallel_for(out.size(), options.workers, [&](size_t k) {
        auto& bg = out[k];
        bg.scene_index = static_cast<int>(k % scenes.scenes.size());
        bg.seed = derive_seed(seed, k);
        SamplerOptions so;
        so.steps = options.steps;
        so.guidance_scale = options.guidance_scale;
        so.seed = bg.seed;
        const Matrix latent = ddim_sample(backend, scene_embeddings[static_cast<size_t>(bg.scene_index)], uncond, so);
        bg.image = backend.decode_latent(latent);
    });
    return out;
}

namespace {

struct Rect {
    int left = 0;
    int top = 0;
    int width = 0;
    int height = 0;
};

Rect opaque_bounds(const Image& rgba) {
    int x0 = rgba.width;
    int y0 = rgba.height;
    int x1 = -1;
    int y1 = -1;
    for (int y = 0; y < rgba.height; ++y) {
        for (int x = 0; x < rgba.width; ++x) {
            if (rgba.at(x, y, 3) == 0) continue;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
    }
    if (x1 < 0) fail(ErrorCode::InvalidCharacterImage, "character image is fully transparent");
    return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

Image crop(const Image& src, const Rect& r) {
    Image out(r.width, r.height, src.channels);
    for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x)
            for (int c = 0; c < src.channels; ++c) out.at(x, y, c) = src.at(r.left + x, r.top + y, c);
    return out;
}

// Centre-aligned nearest neighbour so shrinking drops pixels symmetrically.
Image resize_centered(const Image& src, int width, int height) {
    Image out(width, height, src.channels);
    for (int y = 0; y < height; ++y) {
        const int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) * src.height / height));
        for (int x = 0; x < width; ++x) {
            const int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) * src.width / width));
            for (int c = 0; c < src.channels; ++c) out.at(x, y, c) = src.at(sx, sy, c);
        }
    }
    return out;
}

// Cropped to its opaque bounds, longer side scaled to `side`.
CharacterImage fit_character(const CharacterImage& character, int side) {
    character.validate();
    const Image cropped = crop(character.rgba, opaque_bounds(character.rgba));
    const double f = static_cast<double>(side) / std::max(cropped.width, cropped.height);
    const int w = std::clamp(static_cast<int>(std::lround(cropped.width * f)), 1, side);
    const int h = std::clamp(static_cast<int>(std::lround(cropped.height * f)), 1, side);
    return {resize_centered(cropped, w, h), character.source_path};
}

Image to_rgb_side(const Image& img, int side) {
    Image rgb = flatten_alpha(img);
    if (rgb.width != side || rgb.height != side) rgb = resize_nearest(rgb, side, side);
    return rgb;
}

}  // namespace

PasteResult copy_paste(const CharacterImage& character, const Image& background, ScaleRange scale, std::uint64_t seed) {
    character.validate();
    if (!(scale.lo > 0.0) || scale.hi < scale.lo) fail(ErrorCode::InvalidConfig, "scale range must satisfy 0 < lo <= hi");
    const Image cut = crop(character.rgba, opaque_bounds(character.rgba));

    PasteResult out;
    if (scale.lo == scale.hi) {
        out.scale = scale.lo;
    } else {
        std::mt19937_64 rng(seed);
        out.scale = std::uniform_real_distribution<double>(scale.lo, scale.hi)(rng);
    }
    out.width = std::max(1, static_cast<int>(std::lround(cut.width * out.scale)));
    out.height = std::max(1, static_cast<int>(std::lround(cut.height * out.scale)));
    if (out.width > background.width || out.height > background.height) {
        fail(ErrorCode::CharacterTooLarge, "scaled character " + std::to_string(out.width) + "x" +
                                               std::to_string(out.height) + " exceeds the background");
    }
    const Image scaled = (out.width == cut.width && out.height == cut.height) ? cut : resize_centered(cut, out.width, out.height);
    out.left = (background.width - out.width) / 2;
    out.top = (background.height - out.height) / 2;

    out.image = background;
    const int bg_channels = std::min(background.channels, 3);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const int a = scaled.at(x, y, 3);
            if (a == 0) continue;
            for (int c = 0; c < bg_channels; ++c) {
                auto& dst = out.image.at(out.left + x, out.top + y, c);
                dst = static_cast<std::uint8_t>((scaled.at(x, y, c) * a + dst * (255 - a) + 127) / 255);
            }
            if (background.channels == 4) out.image.at(out.left + x, out.top + y, 3) = 255;
        }
    }
    return out;
}

std::vector<CharacterImage> load_character_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    if (fs::is_directory(dir)) {
        for (const auto& e : fs::directory_iterator(dir)) {
            auto ext = e.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
            if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
        }
    }
    if (files.empty()) fail(ErrorCode::EmptyCharacterDir, "no PNG character images in " + dir.string());
    std::sort(files.begin(), files.end());
    std::vector<CharacterImage> out;
    for (const auto& f : files) {
        CharacterImage c{load_png(f, true), f.string()};
        c.validate();
        out.push_back(std::move(c));
    }
    return out;
}

TrainingDataset build_training_set(std::span<const CharacterImage> characters,
                                   std::span<const BackgroundImage> backgrounds, int n, const std::string& class_noun,
                                   std::uint64_t seed, const BuildOptions& options) {
    if (characters.empty()) fail(ErrorCode::EmptyCharacterDir, "no character images");
    if (n < 0) fail(ErrorCode::InvalidConfig, "augmented count must be >= 0");
    if (n > 0 && backgrounds.empty()) fail(ErrorCode::InvalidConfig, "augmentation needs at least one background");
    const int side = options.image_side;

    std::vector<CharacterImage> fitted(characters.size());
    for (size_t i = 0; i < characters.size(); ++i) fitted[i] = fit_character(characters[i], side);
    std::vector<Image> bgs;
    bgs.reserve(backgrounds.size());
    for (const auto& b : backgrounds) bgs.push_back(to_rgb_side(b.image, side));

    TrainingDataset ds;
    ds.label = class_noun;
    ds.seed = seed;
    ds.m = static_cast<int>(characters.size());
    ds.n = n;
    ds.items.resize(characters.size() + static_cast<size_t>(n));

    const Image white(side, side, 3, 255);
    parallel_for(ds.items.size(), options.workers, [&](size_t k) {
        auto& item = ds.items[k];
        if (k < characters.size()) {
            item.kind = SampleKind::character;
            item.character_index = static_cast<int>(k);
            item.image = copy_paste(fitted[k], white, {1.0, 1.0}, 0).image;
            return;
        }
        const size_t j = k - characters.size();
        std::mt19937_64 rng(derive_seed(seed, j, 1));
        item.kind = SampleKind::augmented;
        item.character_index = std::uniform_int_distribution<int>(0, ds.m - 1)(rng);
        item.background_index = std::uniform_int_distribution<int>(0, static_cast<int>(bgs.size()) - 1)(rng);
        item.scene_index = backgrounds[static_cast<size_t>(item.background_index)].scene_index;
        item.seed = derive_seed(seed, j, 2);
        const auto paste = copy_paste(fitted[static_cast<size_t>(item.character_index)],
                                      bgs[static_cast<size_t>(item.background_index)], options.scale, item.seed);
        item.image = paste.image;
        item.scale = paste.scale;
    });
    return ds;
}

TrainingDataset build_training_set(const fs::path& char_dir, std::span<const BackgroundImage> backgrounds, int n,
                                   const std::string& class_noun, std::uint64_t seed, const BuildOptions& options) {
    const auto characters = load_character_dir(char_dir);
    return build_training_set(characters, backgrounds, n, class_noun, seed, options);
}

TrainingDataset run_augmentation(const AugmentPlan& plan, const Backend& backend) {
    if (!plan.class_noun.empty()) class_noun_token(backend.descriptor(), plan.class_noun, ErrorCode::UnknownClassNoun);
    const auto characters = load_character_dir(plan.characters_dir);
    std::vector<BackgroundImage> backgrounds;
    if (plan.n > 0) {
        const int count = plan.background_count > 0 ? plan.background_count
                                                    : std::max<int>(1, static_cast<int>(plan.scenes.scenes.size()));
        backgrounds = generate_backgrounds(plan.scenes, backend, count, derive_seed(plan.seed, 0, 0xb6), plan.backgrounds);
    }
    BuildOptions build = plan.build;
    build.image_side = backend.descriptor().image_side();
    return build_training_set(characters, backgrounds, plan.n, plan.class_noun, plan.seed, build);
}

nlohmann::json dataset_manifest(const TrainingDataset& dataset) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : dataset.items) {
        items.push_back({
            {"path", it.path},
            {"kind", it.kind == SampleKind::character ? "character" : "augmented"},
            {"character_index", it.character_index},
            {"background_index", it.background_index},
            {"scene_index", it.scene_index},
            {"seed", it.seed},
            {"scale", it.scale},
        });
    }
    return {{"label", dataset.label}, {"seed", dataset.seed}, {"m", dataset.m}, {"n", dataset.n},
            {"q", dataset.items.size()}, {"items", items}};
}

void write_dataset(TrainingDataset& dataset, const fs::path& dir) {
    fs::create_directories(dir / "images");
    for (size_t i = 0; i < dataset.items.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%05zu.png", i);
        auto& item = dataset.items[i];
        item.path = (fs::path("images") / name).string();
        save_png(item.image, dir / item.path);
    }
    std::ofstream f(dir / "manifest.json");
    if (!f) fail(ErrorCode::IoError, "cannot write " + (dir / "manifest.json").string());
    f << dataset_manifest(dataset).dump(2) << "\n";
}

TrainingDataset read_dataset(const fs::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) fail(ErrorCode::IoError, "no manifest.json in " + dir.string());
    TrainingDataset ds;
    try {
        const auto j = nlohmann::json::parse(f);
        ds.label = j.at("label").get<std::string>();
        ds.seed = j.value("seed", std::uint64_t{0});
        ds.m = j.at("m").get<int>();
        ds.n = j.at("n").get<int>();
        for (const auto& e : j.at("items")) {
            TrainingItem it;
            it.path = e.at("path").get<std::string>();
            it.kind = e.at("kind").get<std::string>() == "character" ? SampleKind::character : SampleKind::augmented;
            it.character_index = e.value("character_index", 0);
            it.background_index = e.value("background_index", -1);
            it.scene_index = e.value("scene_index", -1);
            it.seed = e.value("seed", std::uint64_t{0});
            it.scale = e.value("scale", 1.0);
            it.image = flatten_alpha(load_png(dir / it.path));
            ds.items.push_back(std::move(it));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::SchemaViolation, std::string("dataset manifest: ") + e.what());
    }
    if (static_cast<int>(ds.items.size()) != ds.m + ds.n) {
        fail(ErrorCode::SchemaViolation, "dataset manifest lists " + std::to_string(ds.items.size()) + " items, m + n = " +
                                             std::to_string(ds.m + ds.n));
    }
    return ds;
}

}  // namespace storyplug
