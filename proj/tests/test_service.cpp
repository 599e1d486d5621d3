#include "storyplug/service.hpp"

#include "storyplug/extraction.hpp"
#include "storyplug/plugin.hpp"

#include "test_support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <fstream>

using namespace storyplug;
using namespace storyplug::testing;
using nlohmann::json;

namespace {

struct Running {
    explicit Running(const std::filesystem::path& dir, int workers = 1) : service(ServiceOptions{dir, workers, {}}) {
        port = service.start("127.0.0.1", 0);
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        client->set_read_timeout(300, 0);
    }

    httplib::Result post(const std::string& path, const json& body) {
        return client->Post(path, body.dump(), "application/json");
    }
    json get_json(const std::string& path) {
        auto r = client->Get(path);
        REQUIRE(r);
        return json::parse(r->body);
    }
    std::string submit(const std::string& path, const json& body) {
        auto r = post(path, body);
        REQUIRE(r);
        INFO(r->body);
        REQUIRE(r->status == 202);
        return json::parse(r->body).at("job_id").get<std::string>();
    }
    json finish(const std::string& id) {
        service.wait_for_job(id);
        return get_json("/jobs/" + id);
    }

    Service service;
    int port = 0;
    std::unique_ptr<httplib::Client> client;
};

std::string plugin_bytes(const CharacterPlugin& p) {
    const auto b = serialize(p);
    return {b.begin(), b.end()};
}

CharacterPlugin toy_plugin(const std::string& name, const std::string& noun, std::uint64_t seed) {
    const ToyBackend backend;
    return create_plugin(backend, backend.random_encoder(seed), noun, name);
}

json frame_body(std::uint64_t seed) {
    return {{"prompt", "a girl and a boy in a park"},
            {"plugins", {"alice", "bob"}},
            {"layout", {{"boxes", {{"alice", {0.0, 0.0, 0.5, 1.0}}, {"bob", {0.5, 0.0, 1.0, 1.0}}}}}},
            {"seed", seed},
            {"steps", 6}};
}

}  // namespace

TEST_CASE("plugin upload, listing and errors") {
    TempDir dir("svc-plugins");
    Running s(dir.path());
    const auto alice = toy_plugin("alice", "girl", 1);

    httplib::MultipartFormDataItems items = {{"file", plugin_bytes(alice), "alice.cgcp", "application/octet-stream"}};
    auto r = s.client->Post("/plugins", items);
    REQUIRE(r);
    CHECK(r->status == 201);
    const auto meta = json::parse(r->body);
    CHECK(meta["name"] == "alice");
    CHECK(meta["class_noun"] == "girl");

    const auto fetched = s.get_json("/plugins/alice");
    CHECK(fetched["name"] == "alice");
    CHECK(fetched["descriptor_id"] == "toy-v1");
    CHECK(fetched["row_norms"].size() == 14u);
    CHECK(s.get_json("/plugins")["plugins"].size() == 1u);

    r = s.client->Post("/plugins", plugin_bytes(alice), "application/octet-stream");
    REQUIRE(r);
    CHECK(r->status == 409);

    auto bad = toy_plugin("carol", "girl", 2);
    bad.descriptor_id = "sd21-shape";
    r = s.client->Post("/plugins", plugin_bytes(bad), "application/octet-stream");
    REQUIRE(r);
    CHECK(r->status == 400);
    r = s.client->Post("/plugins", "not a plugin", "application/octet-stream");
    REQUIRE(r);
    CHECK(r->status == 400);

    r = s.client->Get("/plugins/nobody");
    REQUIRE(r);
    CHECK(r->status == 404);
    r = s.client->Get("/jobs/job-999999");
    REQUIRE(r);
    CHECK(r->status == 404);
    r = s.client->Get("/stories/0000/frames");
    REQUIRE(r);
    CHECK(r->status == 404);
    r = s.client->Post("/jobs/frame", "{broken", "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);
}

TEST_CASE("frame job reaches done with a PNG; malformed box is 422") {
    TempDir dir("svc-frame");
    Running s(dir.path());
    for (const auto& p : {toy_plugin("alice", "girl", 1), toy_plugin("bob", "boy", 2)})
        REQUIRE(s.client->Post("/plugins", plugin_bytes(p), "application/octet-stream")->status == 201);

    auto r = s.post("/jobs/frame", frame_body(3));
    REQUIRE(r);
    REQUIRE(r->status == 202);
    const auto id = json::parse(r->body)["job_id"].get<std::string>();
    const auto job = s.finish(id);
    CHECK(job["state"] == "done");
    CHECK(job["progress"] == 1.0);
    CHECK(job["request_hash_verified"] == true);
    auto img = s.client->Get("/jobs/" + id + "/image");
    REQUIRE(img);
    CHECK(img->status == 200);
    CHECK(img->get_header_value("Content-Type") == "image/png");
    const std::vector<std::uint8_t> png(img->body.begin(), img->body.end());
    const auto decoded = decode_png(png);
    CHECK(decoded.width == 64);
    CHECK(s.service.verify_request_hash(id));

    auto body = frame_body(3);
    body["layout"]["boxes"]["alice"] = {0.6, 0.0, 0.5, 1.0};
    r = s.post("/jobs/frame", body);
    REQUIRE(r);
    CHECK(r->status == 422);

    body = frame_body(3);
    body["plugins"] = {"alice", "zed"};
    r = s.post("/jobs/frame", body);
    REQUIRE(r);
    CHECK(r->status == 404);

    body = frame_body(3);
    body.erase("seed");
    r = s.post("/jobs/frame", body);
    REQUIRE(r);
    CHECK(r->status == 422);
}

TEST_CASE("story flow over HTTP") {
    TempDir dir("svc-story");
    Running s(dir.path(), 2);
    for (const auto& p : {toy_plugin("alice", "girl", 1), toy_plugin("bob", "boy", 2)})
        REQUIRE(s.client->Post("/plugins", plugin_bytes(p), "application/octet-stream")->status == 201);
    const json script = {
        {"schema_version", 1},
        {"title", "two frames"},
        {"frames",
         {{{"id", "a"}, {"prompt", "a girl waves"}, {"characters", {"alice"}},
           {"layout", {{"boxes", {{"alice", {0.2, 0.2, 0.8, 0.8}}}}}}, {"seed", 1}, {"steps", 5}},
          {{"id", "b"}, {"prompt", "a boy runs"}, {"characters", {"bob"}},
           {"layout", {{"boxes", {{"bob", {0.0, 0.0, 0.5, 0.5}}}}}}, {"seed", 2}, {"steps", 5}}}}};
    auto r = s.client->Post("/stories", script.dump(), "application/json");
    REQUIRE(r);
    REQUIRE(r->status == 201);
    const auto story_id = json::parse(r->body)["story_id"].get<std::string>();
    CHECK(story_id.size() == 16u);

    r = s.client->Get("/stories/" + story_id + "/frames");
    REQUIRE(r);
    CHECK(r->status == 404);

    const auto job = s.finish(s.submit("/jobs/story", {{"story_id", story_id}}));
    CHECK(job["state"] == "done");
    const auto manifest = s.get_json("/stories/" + story_id + "/frames");
    CHECK(manifest["frames"].size() == 2u);
    CHECK(manifest["frames"][0]["id"] == "a");

    auto bad = script;
    bad["frames"][1]["id"] = "a";
    r = s.client->Post("/stories", bad.dump(), "application/json");
    REQUIRE(r);
    CHECK(r->status == 422);
}

TEST_CASE("tampering with a stored frame request is detected") {
    TempDir dir("svc-tamper");
    std::string id;
    {
        Running s(dir.path());
        for (const auto& p : {toy_plugin("alice", "girl", 1), toy_plugin("bob", "boy", 2)})
            REQUIRE(s.client->Post("/plugins", plugin_bytes(p), "application/octet-stream")->status == 201);
        id = s.submit("/jobs/frame", frame_body(5));
        CHECK(s.finish(id)["request_hash_verified"] == true);
        s.service.stop();
    }
    json index;
    std::ifstream(dir / "index.json") >> index;
    for (auto& j : index["jobs"])
        if (j["id"] == id) j["request"]["seed"] = 6;
    std::ofstream(dir / "index.json") << index.dump();

    Running s(dir.path());
    CHECK_FALSE(s.service.verify_request_hash(id));
    CHECK(s.get_json("/jobs/" + id)["request_hash_verified"] == false);
    auto img = s.client->Get("/jobs/" + id + "/image");
    REQUIRE(img);
    CHECK(img->status == 409);
}

TEST_CASE("augment -> train -> extract through jobs") {
    TempDir dir("svc-pipeline");
    std::filesystem::create_directories(dir / "chars");
    for (int i = 0; i < 2; ++i) {
        const auto png = encode_png(blob_character(30 + 4 * i, 40, 200, 50, static_cast<std::uint8_t>(80 * i)).rgba);
        std::ofstream(dir / "chars" / ("c" + std::to_string(i) + ".png"), std::ios::binary)
            .write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
    }
    Running s(dir / "data");
    const auto aug = s.finish(s.submit("/jobs/augment", {{"characters_dir", (dir / "chars").string()},
                                                          {"scenes", {"a park", "a beach"}},
                                                          {"n", 4},
                                                          {"seed", 1},
                                                          {"background_steps", 3}}));
    INFO(aug.dump());
    REQUIRE(aug["state"] == "done");
    CHECK(aug["result"]["q"] == 6);

    auto r = s.post("/jobs/train", {{"dataset", aug["id"]}, {"class_noun", "girl"}, {"preset", "toy"},
                                    {"config", {{"steps", 20}}}});
    REQUIRE(r);
    CHECK(r->status == 422);  // config without a seed

    const auto train = s.finish(s.submit("/jobs/train", {{"dataset", aug["id"]}, {"class_noun", "girl"},
                                                         {"preset", "toy"}, {"config", {{"steps", 20}, {"seed", 3}}}}));
    INFO(train.dump());
    REQUIRE(train["state"] == "done");
    CHECK(train["progress"] == 1.0);

    const auto ext = s.finish(s.submit("/jobs/extract", {{"checkpoint", train["id"]}, {"name", "alice"}}));
    INFO(ext.dump());
    REQUIRE(ext["state"] == "done");
    const auto meta = s.get_json("/plugins/alice");
    CHECK(meta["class_noun"] == "girl");
    CHECK(meta["rows"] == 14);

    r = s.post("/jobs/extract", {{"checkpoint", train["id"]}, {"name", "alice"}});
    REQUIRE(r);
    CHECK(r->status == 409);
}

TEST_CASE("job state machine") {
    Job j;
    CHECK_THROWS_AS(j.transition(JobState::done), Error);
    j.transition(JobState::running);
    j.advance(0.5);
    j.advance(0.2);
    CHECK(j.progress == 0.5);
    j.transition(JobState::failed);
    CHECK_THROWS_AS(j.transition(JobState::running), Error);
}
