#include "storyplug/story.hpp"

#include "storyplug/error.hpp"
#include "storyplug/hashing.hpp"
#include "storyplug/parallel.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace storyplug {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void schema(const std::string& where, const std::string& what) {
    fail(ErrorCode::SchemaViolation, where + ": " + what);
}

template <typename T>
T field(const json& obj, const char* key, const std::string& where) {
    if (!obj.contains(key)) schema(where + "." + key, "missing");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        schema(where + "." + key, "has the wrong type");
    }
}

template <typename T>
T optional_field(const json& obj, const char* key, const std::string& where, T fallback) {
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    return field<T>(obj, key, where);
}

FrameSpec parse_frame(const json& j, const std::string& where) {
    if (!j.is_object()) schema(where, "must be an object");
    FrameSpec f;
    f.id = field<std::string>(j, "id", where);
    if (f.id.empty()) schema(where + ".id", "must not be empty");
    f.prompt = field<std::string>(j, "prompt", where);
    f.characters = optional_field<std::vector<std::string>>(j, "characters", where, {});
    f.seed = field<std::uint64_t>(j, "seed", where);
    f.steps = optional_field<int>(j, "steps", where, f.steps);
    f.guidance_scale = optional_field<double>(j, "guidance_scale", where, f.guidance_scale);
    if (f.steps < 1) schema(where + ".steps", "must be >= 1");
    try {
        if (j.contains("layout")) f.layout = layout_from_json(j.at("layout"));
        if (j.contains("schedule")) f.schedule = schedule_from_json(j.at("schedule"));
    } catch (const Error& e) {
        schema(where, e.what());
    }
    std::set<std::string> seen;
    for (const auto& c : f.characters) {
        if (!seen.insert(c).second) schema(where + ".characters", "lists '" + c + "' twice");
        if (!f.layout.boxes.count(c)) schema(where + ".layout.boxes", "has no box for character '" + c + "'");
    }
    return f;
}

}  // namespace

StoryScript parse_script(const json& j) {
    if (!j.is_object()) schema("script", "must be a JSON object");
    StoryScript s;
    s.schema_version = optional_field<int>(j, "schema_version", "script", kScriptSchemaVersion);
    if (s.schema_version != kScriptSchemaVersion) {
        schema("script.schema_version", "unsupported version " + std::to_string(s.schema_version));
    }
    s.title = optional_field<std::string>(j, "title", "script", "");
    s.style_suffix = optional_field<std::string>(j, "style_suffix", "script", "");
    if (!j.contains("frames") || !j.at("frames").is_array()) schema("script.frames", "must be an array");
    const auto& frames = j.at("frames");
    if (frames.empty()) schema("script.frames", "must contain at least one frame");
    std::set<std::string> ids;
    for (size_t i = 0; i < frames.size(); ++i) {
        const std::string where = "frames[" + std::to_string(i) + "]";
        auto f = parse_frame(frames[i], where);
        if (!ids.insert(f.id).second) schema(where + ".id", "duplicate frame id '" + f.id + "'");
        if (f.characters.size() > kSuggestedMaxCharacters) {
            s.warnings.push_back(where + ": " + std::to_string(f.characters.size()) +
                                 " characters; layouts beyond three characters are untested");
        }
        s.frames.push_back(std::move(f));
    }
    return s;
}

StoryScript parse_script(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        size_t line = 1;
        size_t col = 1;
        for (size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        schema("script", "malformed JSON at line " + std::to_string(line) + ", column " + std::to_string(col));
    }
    return parse_script(j);
}

StoryScript load_script(const fs::path& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorCode::IoError, "cannot read " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_script(std::string_view(ss.str()));
}

json script_to_json(const StoryScript& script) {
    json frames = json::array();
    for (const auto& f : script.frames) {
        frames.push_back({{"id", f.id},
                          {"prompt", f.prompt},
                          {"characters", f.characters},
                          {"layout", layout_to_json(f.layout)},
                          {"seed", f.seed},
                          {"steps", f.steps},
                          {"guidance_scale", f.guidance_scale},
                          {"schedule", schedule_to_json(f.schedule)}});
    }
    json j = {{"schema_version", script.schema_version}, {"title", script.title}, {"frames", frames}};
    if (!script.style_suffix.empty()) j["style_suffix"] = script.style_suffix;
    return j;
}

std::string frame_prompt(const StoryScript& script, const FrameSpec& frame) {
    if (script.style_suffix.empty()) return frame.prompt;
    return frame.prompt + " " + script.style_suffix;
}

void PluginStore::add(CharacterPlugin plugin) {
    if (plugins_.count(plugin.name)) fail(ErrorCode::InvalidConfig, "plugin '" + plugin.name + "' is already loaded");
    auto name = plugin.name;
    plugins_.emplace(std::move(name), std::move(plugin));
}

const CharacterPlugin* PluginStore::find(const std::string& name) const {
    const auto it = plugins_.find(name);
    return it == plugins_.end() ? nullptr : &it->second;
}

std::vector<std::string> PluginStore::names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : plugins_) out.push_back(n);
    return out;
}

PluginStore PluginStore::load_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) fail(ErrorCode::IoError, dir.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".cgcp") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    PluginStore store;
    for (const auto& f : files) store.add(load_plugin(f));
    return store;
}

GenerationRequest frame_request(const StoryScript& script, const FrameSpec& frame, const PluginStore& store) {
    GenerationRequest r;
    r.prompt = frame_prompt(script, frame);
    for (const auto& c : frame.characters) {
        const auto* p = store.find(c);
        if (!p) fail(ErrorCode::MissingPlugin, "frame '" + frame.id + "' uses character '" + c + "' with no plugin");
        r.plugins.push_back(*p);
    }
    r.layout = frame.layout;
    r.schedule = frame.schedule;
    r.seed = frame.seed;
    r.steps = frame.steps;
    r.guidance_scale = frame.guidance_scale;
    return r;
}

StoryResult render_story(const StoryScript& script, const PluginStore& store, std::span<const Backend* const> sessions,
                         const fs::path& out_dir) {
    if (sessions.empty()) fail(ErrorCode::InvalidConfig, "no backend sessions");
    if (script.frames.empty()) fail(ErrorCode::SchemaViolation, "script has no frames");
    const auto& d = sessions.front()->descriptor();
    // Resolve everything up front so a missing plugin fails before any rendering.
    std::vector<GenerationRequest> requests;
    for (const auto& f : script.frames) requests.push_back(frame_request(script, f, store));

    fs::create_directories(out_dir / "frames");
    fs::create_directories(out_dir / "diagnostics");
    StoryResult result;
    result.frames.resize(script.frames.size());
    parallel_for_workers(requests.size(), static_cast<int>(sessions.size()), [&](size_t i, size_t worker) {
        const auto& backend = *sessions[worker];
        const auto& frame = script.frames[i];
        const auto out = generate_frame(requests[i], backend);
        const auto png = encode_png(out.image);
        auto& rf = result.frames[i];
        rf.id = frame.id;
        rf.path = (fs::path("frames") / (frame.id + ".png")).string();
        rf.seed = frame.seed;
        rf.request_hash = request_hash(requests[i], backend.descriptor());
        rf.image_sha256 = sha256_hex(std::span<const std::uint8_t>(png));
        std::ofstream img(out_dir / rf.path, std::ios::binary);
        img.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
        if (!img) fail(ErrorCode::IoError, "cannot write " + (out_dir / rf.path).string());
        std::ofstream diag(out_dir / "diagnostics" / (frame.id + ".json"));
        diag << out.diagnostics.to_json().dump(2) << "\n";
    });

    json frames = json::array();
    for (const auto& rf : result.frames) {
        frames.push_back({{"id", rf.id},
                          {"path", rf.path},
                          {"seed", rf.seed},
                          {"request_hash", rf.request_hash},
                          {"image_sha256", rf.image_sha256},
                          {"diagnostics", "diagnostics/" + rf.id + ".json"}});
    }
    result.manifest = {{"schema_version", kScriptSchemaVersion},
                       {"title", script.title},
                       {"backend_id", d.backend_id},
                       {"frames", frames}};
    std::ofstream m(out_dir / "manifest.json");
    if (!m) fail(ErrorCode::IoError, "cannot write manifest.json");
    m << result.manifest.dump(2) << "\n";
    return result;
}

StoryResult render_story(const StoryScript& script, const PluginStore& store, const Backend& backend,
                         const fs::path& out_dir) {
    const Backend* one[] = {&backend};
    return render_story(script, store, std::span<const Backend* const>(one), out_dir);
}

}  // namespace storyplug
