#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace storyplug {

// Interleaved 8-bit image, row-major. channels is 3 (RGB) or 4 (RGBA).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(static_cast<size_t>(w) * h * c, fill) {}

    std::uint8_t& at(int x, int y, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }

    bool operator==(const Image&) const = default;
};

Image resize_nearest(const Image& src, int width, int height);
// Drops alpha by compositing over a solid background colour.
Image flatten_alpha(const Image& rgba, std::uint8_t background = 255);

std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(const std::vector<std::uint8_t>& bytes);
void save_png(const Image& image, const std::filesystem::path& path);
// RGB inputs get an opaque alpha channel when force_rgba is set.
Image load_png(const std::filesystem::path& path, bool force_rgba = false);

}  // namespace storyplug
