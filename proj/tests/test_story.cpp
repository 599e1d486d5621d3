#include "storyplug/story.hpp"

#include "storyplug/extraction.hpp"
#include "storyplug/hashing.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <fstream>

using namespace storyplug;
using namespace storyplug::testing;
using nlohmann::json;

namespace {

json frame_json(const std::string& id, const std::string& prompt, std::vector<std::string> chars,
                std::uint64_t seed) {
    json boxes = json::object();
    for (size_t i = 0; i < chars.size(); ++i) {
        const double x0 = static_cast<double>(i) / static_cast<double>(chars.size());
        boxes[chars[i]] = {x0, 0.1, x0 + 1.0 / static_cast<double>(chars.size()), 0.9};
    }
    return {{"id", id}, {"prompt", prompt}, {"characters", chars}, {"layout", {{"boxes", boxes}}},
            {"seed", seed}, {"steps", 8}};
}

json three_frame_script() {
    return {{"schema_version", 1},
            {"title", "park day"},
            {"style_suffix", "cartoon style"},
            {"frames",
             {frame_json("f1", "a girl in a park", {"alice"}, 1),
              frame_json("f2", "a girl and a boy play", {"alice", "bob"}, 2),
              frame_json("f3", "a boy waves", {"bob"}, 3)}}};
}

PluginStore toy_store(const ToyBackend& backend) {
    PluginStore store;
    store.add(create_plugin(backend, backend.random_encoder(31), "girl", "alice"));
    store.add(create_plugin(backend, backend.random_encoder(32), "boy", "bob"));
    return store;
}

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::IoError;
}

std::string error_message(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return {};
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("a 24-frame script parses") {
    json frames = json::array();
    for (int i = 0; i < 24; ++i)
        frames.push_back(frame_json("frame-" + std::to_string(i), "a girl and a boy", {"alice", "bob"},
                                    static_cast<std::uint64_t>(i)));
    const json j = {{"schema_version", 1}, {"title", "long story"}, {"frames", frames}};
    const auto script = parse_script(j.dump());
    CHECK(script.frames.size() == 24u);
    CHECK(script.frames[23].id == "frame-23");
    CHECK(script.frames[5].layout.boxes.size() == 2u);
    CHECK(script_to_json(parse_script(script_to_json(script))) == script_to_json(script));
}

TEST_CASE("script schema violations") {
    auto j = three_frame_script();
    j["frames"] = json::array();
    CHECK(code_of([&] { parse_script(j); }) == ErrorCode::SchemaViolation);

    j = three_frame_script();
    j["frames"][2]["id"] = "f1";
    CHECK(code_of([&] { parse_script(j); }) == ErrorCode::SchemaViolation);
    CHECK(error_message([&] { parse_script(j); }).find("frames[2].id") != std::string::npos);

    j = three_frame_script();
    j["frames"][1]["characters"] = {"alice", "alice"};
    CHECK(code_of([&] { parse_script(j); }) == ErrorCode::SchemaViolation);

    j = three_frame_script();
    j["frames"][0]["characters"] = {"alice", "carol"};
    CHECK(error_message([&] { parse_script(j); }).find("carol") != std::string::npos);

    j = three_frame_script();
    j["schema_version"] = 2;
    CHECK(code_of([&] { parse_script(j); }) == ErrorCode::SchemaViolation);

    const std::string broken = "{\n  \"frames\": [\n    {\"id\": }\n  ]\n}";
    const auto msg = error_message([&] { parse_script(std::string_view(broken)); });
    CHECK(msg.find("line 3") != std::string::npos);

    // More than three characters is allowed with a warning.
    j = three_frame_script();
    j["frames"][0] = frame_json("f1", "a girl and a boy and a dog and a cat", {"a", "b", "c", "d"}, 1);
    const auto s = parse_script(j);
    CHECK(s.warnings.size() == 1u);
}

TEST_CASE("style suffix is the only prompt transformation") {
    const auto script = parse_script(three_frame_script());
    CHECK(frame_prompt(script, script.frames[0]) == "a girl in a park cartoon style");
    auto plain = script;
    plain.style_suffix.clear();
    CHECK(frame_prompt(plain, plain.frames[0]) == "a girl in a park");

    const ToyBackend backend;
    const auto store = toy_store(backend);
    const auto req = frame_request(script, script.frames[1], store);
    CHECK(req.prompt == "a girl and a boy play cartoon style");
    CHECK(req.plugins.size() == 2u);
    CHECK(req.seed == 2u);
    CHECK(req.steps == 8);
}

TEST_CASE("missing plugin names the frame and the character") {
    const ToyBackend backend;
    PluginStore store;
    store.add(create_plugin(backend, backend.random_encoder(31), "girl", "alice"));
    const auto script = parse_script(three_frame_script());
    CHECK(code_of([&] { frame_request(script, script.frames[1], store); }) == ErrorCode::MissingPlugin);
    const auto msg = error_message([&] { frame_request(script, script.frames[1], store); });
    CHECK(msg.find("f2") != std::string::npos);
    CHECK(msg.find("bob") != std::string::npos);

    TempDir dir("story-missing");
    CHECK(code_of([&] { render_story(script, store, backend, dir.path()); }) == ErrorCode::MissingPlugin);
    CHECK_THROWS_AS(store.add(create_plugin(backend, backend.random_encoder(1), "girl", "alice")), Error);
}

TEST_CASE("three-frame render: files, manifest, parallel = serial") {
    const ToyBackend backend;
    const auto store = toy_store(backend);
    const auto script = parse_script(three_frame_script());
    TempDir dir("story");

    const auto serial = render_story(script, store, backend, dir / "serial");
    REQUIRE(serial.frames.size() == 3u);
    for (const auto& f : serial.frames) {
        CHECK(std::filesystem::exists(dir / "serial" / f.path));
        CHECK(std::filesystem::exists(dir / "serial" / "diagnostics" / (f.id + ".json")));
        CHECK(sha256_hex(read_bytes(dir / "serial" / f.path)) == f.image_sha256);
    }
    CHECK(std::filesystem::exists(dir / "serial" / "manifest.json"));
    CHECK(serial.manifest["frames"].size() == 3u);
    CHECK(serial.manifest["frames"][1]["id"] == "f2");

    const ToyBackend b2;
    const ToyBackend b3;
    const std::vector<const Backend*> sessions = {&backend, &b2, &b3};
    const auto parallel = render_story(script, store, sessions, dir / "parallel");
    CHECK(parallel.manifest == serial.manifest);

    const auto again = render_story(script, store, backend, dir / "again");
    CHECK(again.manifest == serial.manifest);
}

TEST_CASE("permuting frames permutes outputs without changing images") {
    const ToyBackend backend;
    const auto store = toy_store(backend);
    const auto script = parse_script(three_frame_script());
    auto reversed = script;
    std::reverse(reversed.frames.begin(), reversed.frames.end());
    TempDir dir("story-perm");
    const auto a = render_story(script, store, backend, dir / "a");
    const auto b = render_story(reversed, store, backend, dir / "b");
    REQUIRE(b.frames.size() == 3u);
    for (size_t i = 0; i < 3; ++i) {
        const auto& fa = a.frames[i];
        const auto& fb = b.frames[2 - i];
        CHECK(fa.id == fb.id);
        CHECK(fa.image_sha256 == fb.image_sha256);
        CHECK(fa.request_hash == fb.request_hash);
    }
}

TEST_CASE("plugin store loads a directory") {
    const ToyBackend backend;
    TempDir dir("store");
    save_plugin(create_plugin(backend, backend.random_encoder(31), "girl", "alice"), dir / "alice.cgcp");
    save_plugin(create_plugin(backend, backend.random_encoder(32), "boy", "bob"), dir / "bob.cgcp");
    std::ofstream(dir / "notes.txt") << "ignored";
    const auto store = PluginStore::load_dir(dir.path());
    CHECK(store.size() == 2u);
    CHECK(store.names() == std::vector<std::string>{"alice", "bob"});
    CHECK(store.find("carol") == nullptr);
}
