#include "storyplug/plugin.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>
#include <limits>

using namespace storyplug;
using storyplug::testing::random_plugin;
using storyplug::testing::TempDir;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::IoError;
}

}  // namespace

TEST_CASE("plugin round-trips bitwise through bytes and files") {
    const auto d = toy_descriptor();
    auto p = random_plugin(d, "alice", "girl", 1);
    p.created_at = 1700000000;
    const auto bytes = serialize(p);
    CHECK(bitwise_equal(deserialize(bytes), p));
    CHECK(bytes.size() == plugin_header_size(p) + 4u * 14u * 32u);

    TempDir dir("plugin");
    save_plugin(p, dir / "sub/alice.cgcp");
    CHECK(bitwise_equal(load_plugin(dir / "sub/alice.cgcp"), p));
}

TEST_CASE("payload size for the real descriptor shape") {
    const auto d = sd21_descriptor();
    const auto p = random_plugin(d, "alice", "girl", 2);
    const auto bytes = serialize(p);
    const size_t payload = bytes.size() - plugin_header_size(p);
    CHECK(payload == 307200u);
    CHECK(payload == 4u * 75u * 1024u);
    CHECK(bytes.size() <= 316u * 1024u);
    CHECK(validate(p, d).empty());
}

TEST_CASE("plugin file errors") {
    const auto d = toy_descriptor();
    const auto p = random_plugin(d, "alice", "girl", 3);
    auto bytes = serialize(p);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK(code_of([&] { deserialize(bad_magic); }) == ErrorCode::BadMagic);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK(code_of([&] { deserialize(bad_version); }) == ErrorCode::VersionUnsupported);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 4);
    CHECK(code_of([&] { deserialize(truncated); }) == ErrorCode::DimMismatch);
    auto very_short = std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10);
    CHECK(code_of([&] { deserialize(very_short); }) == ErrorCode::DimMismatch);

    auto nan = p;
    nan.rows(3, 4) = std::numeric_limits<float>::quiet_NaN();
    CHECK(code_of([&] { deserialize(serialize(nan)); }) == ErrorCode::NonFiniteEntry);
}

TEST_CASE("validate reports descriptor mismatches") {
    const auto d = toy_descriptor();
    auto p = random_plugin(d, "alice", "girl", 4);
    CHECK(validate(p, d).empty());
    CHECK_FALSE(validate(p, sd21_descriptor()).empty());
    p.descriptor_id = "other";
    CHECK(validate(p, d).size() == 1u);
    p = random_plugin(d, "alice", "teddy-bear", 4);
    CHECK(validate(p, d).size() == 1u);
    p = random_plugin(d, "", "girl", 4);
    CHECK(validate(p, d).size() == 1u);
}

TEST_CASE("content digest ignores creation time only") {
    const auto d = toy_descriptor();
    auto a = random_plugin(d, "alice", "girl", 5);
    auto b = a;
    b.created_at = 123;
    CHECK(plugin_content_digest(a) == plugin_content_digest(b));
    b.rows(0, 0) += 1.0f;
    CHECK(plugin_content_digest(a) != plugin_content_digest(b));
    b = a;
    b.name = "alicia";
    CHECK(plugin_content_digest(a) != plugin_content_digest(b));
}
