#include "storyplug/evaluation.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

using namespace storyplug;
using namespace storyplug::testing;

namespace {

Embedding axis(int i, int dim = 4) {
    Embedding e = Embedding::Zero(dim);
    e(i) = 1.0;
    return e;
}

// Image -> axis given by its first red value; text -> axis 0.
class StubEmbedder final : public Embedder {
public:
    Embedding embed_text(std::string_view) const override { return axis(0); }
    Embedding embed_image(const Image& image) const override { return axis(image.pixels[0] % 4); }
};

Image tagged(int axis_index) { return Image(4, 4, 3, static_cast<std::uint8_t>(axis_index)); }

Embedding random_unit(std::mt19937_64& rng, int dim) {
    std::normal_distribution<double> n(0.0, 1.0);
    Embedding e(dim);
    for (int i = 0; i < dim; ++i) e(i) = n(rng);
    return e / e.norm();
}

}  // namespace

TEST_CASE("text alignment fixtures") {
    const auto p = axis(0);
    const std::vector<Embedding> same = {axis(0)};
    const std::vector<Embedding> ortho = {axis(1)};
    const std::vector<Embedding> mixed = {axis(0), axis(1)};
    CHECK(std::abs(text_alignment(same, p) - 1.0) <= 1e-9);
    CHECK(std::abs(text_alignment(ortho, p) - 0.0) <= 1e-9);
    CHECK(std::abs(text_alignment(mixed, p) - 0.5) <= 1e-9);

    const StubEmbedder stub;
    const std::vector<Image> imgs = {tagged(0), tagged(1)};
    CHECK(std::abs(text_alignment(imgs, "anything", stub) - 0.5) <= 1e-9);
}

TEST_CASE("image alignment fixtures") {
    const std::vector<Embedding> images = {axis(0)};
    const std::vector<std::vector<Embedding>> one = {{axis(0)}};
    CHECK(std::abs(image_alignment(images, one) - 1.0) <= 1e-9);
    const std::vector<std::vector<Embedding>> two = {{axis(0)}, {axis(1)}};
    CHECK(std::abs(image_alignment(images, two) - 0.5) <= 1e-9);

    const StubEmbedder stub;
    const std::vector<Image> imgs = {tagged(0)};
    const std::vector<std::vector<Image>> refs = {{tagged(0)}, {tagged(2)}};
    CHECK(std::abs(image_alignment(imgs, refs, stub) - 0.5) <= 1e-9);
}

TEST_CASE("image alignment equals the nested-mean oracle") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        const int dim = 16;
        std::vector<Embedding> images;
        for (int i = 0; i < 3 + trial; ++i) images.push_back(random_unit(rng, dim));
        std::vector<std::vector<Embedding>> refs(static_cast<size_t>(1 + trial % 3));
        for (auto& r : refs)
            for (int k = 0; k < 2 + trial; ++k) r.push_back(random_unit(rng, dim));

        double outer = 0.0;
        for (const auto& r : refs) {
            double inner = 0.0;
            for (const auto& ref : r)
                for (const auto& img : images) inner += ref.dot(img) / (ref.norm() * img.norm());
            outer += inner / static_cast<double>(r.size() * images.size());
        }
        outer /= static_cast<double>(refs.size());
        CHECK(std::abs(image_alignment(images, refs) - outer) <= 1e-9);

        // Single character: same shape as text alignment against each reference.
        if (refs.size() == 1 && refs[0].size() >= 1) {
            double ta_mean = 0.0;
            for (const auto& ref : refs[0]) ta_mean += text_alignment(images, ref);
            ta_mean /= static_cast<double>(refs[0].size());
            CHECK(std::abs(image_alignment(images, refs) - ta_mean) <= 1e-9);
        }

        auto shuffled = images;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(std::abs(image_alignment(shuffled, refs) - image_alignment(images, refs)) <= 1e-12);
        CHECK(std::abs(text_alignment(shuffled, refs[0][0]) - text_alignment(images, refs[0][0])) <= 1e-12);
    }
}

TEST_CASE("hash embedder is unit-norm and deterministic") {
    const HashEmbedder e;
    const auto a = e.embed_text("a girl in a park");
    CHECK(std::abs(a.norm() - 1.0) <= 1e-12);
    CHECK(a == e.embed_text("a girl in a park"));
    CHECK(cosine(a, e.embed_text("a boy on a boat")) < 0.999);
    const auto img = noise_image(64, 64, 3);
    CHECK(std::abs(e.embed_image(img).norm() - 1.0) <= 1e-12);
    CHECK(e.embed_image(img) == e.embed_image(img));
}

TEST_CASE("human evaluation sheet") {
    nlohmann::json manifest = {{"frames", nlohmann::json::array()}};
    for (int i = 0; i < 7; ++i) manifest["frames"].push_back({{"id", "f" + std::to_string(i)}, {"path", "frames/f" + std::to_string(i) + ".png"}});
    const auto q = default_questions();
    REQUIRE(q.size() == 3u);
    const auto sheet = human_eval_sheet(manifest, q);
    std::istringstream in(sheet);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    REQUIRE(lines.size() == 2u + 21u);
    CHECK(lines[0].rfind("#", 0) == 0);
    CHECK(lines[0].find("0-3") != std::string::npos);
    CHECK(lines[1] == "image,question,prompt,score");
    CHECK(lines[2].rfind("frames/f0.png,COR,", 0) == 0);
    CHECK(lines[2].back() == ',');

    const auto empty = human_eval_sheet(nlohmann::json::array(), q);
    CHECK(std::count(empty.begin(), empty.end(), '\n') == 2);

    CHECK_NOTHROW(validate_score(0));
    CHECK_NOTHROW(validate_score(3));
    try {
        validate_score(4);
        FAIL("expected InvalidScore");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvalidScore);
    }
    CHECK_THROWS_AS(validate_score(-1), Error);

    std::string filled = sheet;
    const auto pos = filled.find("COR,");
    filled.replace(filled.find('\n', pos) - 0, 0, "2");
    const auto scores = read_scored_sheet(filled);
    REQUIRE(scores.size() == 1u);
    CHECK(scores[0].score == 2);
    CHECK(scores[0].question == "COR");

    std::string bad = sheet;
    bad.replace(bad.find('\n', bad.find("COR,")), 0, "4");
    CHECK_THROWS_AS(read_scored_sheet(bad), Error);
}

TEST_CASE("scores csv mirrors the story x metric layout") {
    const std::vector<StoryScores> rows = {{"story1", 0.25, 0.75}, {"story2", 0.5, 1.0}};
    const auto csv = scores_csv(rows);
    CHECK(csv.rfind("story,TA,IA\n", 0) == 0);
    CHECK(csv.find("story1,0.25") != std::string::npos);
}
