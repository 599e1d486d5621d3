// Writes character PNGs, a scenes file and a story script for the CLI test.
#include "storyplug/image.hpp"

#include "../test_support.hpp"

#include <fstream>
#include <iostream>

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_fixtures DIR\n";
        return 2;
    }
    const std::filesystem::path dir = argv[1];
    std::filesystem::create_directories(dir / "chars");
    for (int i = 0; i < 3; ++i) {
        const auto c = storyplug::testing::blob_character(28 + 4 * i, 40, 220, static_cast<std::uint8_t>(60 * i), 90);
        const auto png = storyplug::encode_png(c.rgba);
        std::ofstream(dir / "chars" / ("girl_" + std::to_string(i) + ".png"), std::ios::binary)
            .write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
    }
    std::ofstream(dir / "scenes.txt") << "a quiet park\na sunny beach\na busy street\n";
    std::ofstream(dir / "story.json") << R"({
  "schema_version": 1,
  "title": "cli story",
  "frames": [
    {"id": "one", "prompt": "a girl in a park", "characters": ["alice"],
     "layout": {"boxes": {"alice": [0.0, 0.0, 0.5, 1.0]}}, "seed": 1, "steps": 5},
    {"id": "two", "prompt": "a girl on a beach", "characters": ["alice"],
     "layout": {"boxes": {"alice": [0.5, 0.0, 1.0, 1.0]}}, "seed": 2, "steps": 5}
  ]
}
)";
    return 0;
}
