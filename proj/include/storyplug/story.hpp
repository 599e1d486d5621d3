#pragma once

// Story scripts and multi-frame rendering.
//
// Script (JSON, schema_version 1):
//   {
//     "schema_version": 1,
//     "title": "...",
//     "style_suffix": "cartoon style",          // optional, appended to every prompt
//     "frames": [
//       {"id": "f1", "prompt": "a girl and a dog", "characters": ["alice", "rex"],
//        "layout": {"boxes": {"alice": [0, 0, 0.5, 1], "rex": [0.5, 0.3, 1, 1]}},
//        "seed": 7, "steps": 100, "guidance_scale": 7.5,
//        "schedule": {"kind": "linear_decay", "active_fraction": 0.5, "base_scale": 1}}
//     ]
//   }
// Boxes are [x0, y0, x1, y1] in normalized image coordinates, y down.
//
// Output directory: frames/<id>.png, diagnostics/<id>.json, manifest.json.

#include "storyplug/backend.hpp"
#include "storyplug/inference.hpp"
#include "storyplug/plugin.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace storyplug {

inline constexpr int kScriptSchemaVersion = 1;
inline constexpr size_t kSuggestedMaxCharacters = 3;

struct FrameSpec {
    std::string id;
    std::string prompt;
    std::vector<std::string> characters;
    LayoutSpec layout;
    std::uint64_t seed = 0;
    int steps = 100;
    double guidance_scale = 7.5;
    EditSchedule schedule;
};

struct StoryScript {
    int schema_version = kScriptSchemaVersion;
    std::string title;
    std::string style_suffix;
    std::vector<FrameSpec> frames;
    // Soft findings, e.g. frames with more than three characters.
    std::vector<std::string> warnings;
};

// Throws SchemaViolation naming the offending field (and line/column for
// malformed JSON).
StoryScript parse_script(std::string_view text);
StoryScript parse_script(const nlohmann::json& j);
inline StoryScript parse_script(const std::string& text) { return parse_script(std::string_view(text)); }
inline StoryScript parse_script(const char* text) { return parse_script(std::string_view(text)); }
StoryScript load_script(const std::filesystem::path& path);
nlohmann::json script_to_json(const StoryScript& script);

// Prompt actually rendered: the frame prompt plus the style suffix, if any.
std::string frame_prompt(const StoryScript& script, const FrameSpec& frame);

class PluginStore {
public:
    // Names are unique; adding a known name throws InvalidConfig.
    void add(CharacterPlugin plugin);
    const CharacterPlugin* find(const std::string& name) const;
    std::vector<std::string> names() const;
    size_t size() const { return plugins_.size(); }

    // Every *.cgcp file in the directory.
    static PluginStore load_dir(const std::filesystem::path& dir);

private:
    std::map<std::string, CharacterPlugin> plugins_;
};

// Throws MissingPlugin naming the frame and the character.
GenerationRequest frame_request(const StoryScript& script, const FrameSpec& frame, const PluginStore& store);

struct RenderedFrame {
    std::string id;
    std::string path;  // relative to the output directory
    std::uint64_t seed = 0;
    std::string request_hash;
    std::string image_sha256;
};

struct StoryResult {
    std::vector<RenderedFrame> frames;  // script order
    nlohmann::json manifest;
};

// One backend session per worker; sessions.size() bounds the parallelism.
StoryResult render_story(const StoryScript& script, const PluginStore& store,
                         std::span<const Backend* const> sessions, const std::filesystem::path& out_dir);
StoryResult render_story(const StoryScript& script, const PluginStore& store, const Backend& backend,
                         const std::filesystem::path& out_dir);

}  // namespace storyplug
