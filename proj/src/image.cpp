#include "storyplug/image.hpp"

#include "storyplug/error.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

namespace storyplug {

Image resize_nearest(const Image& src, int width, int height) {
    Image out(width, height, src.channels);
    for (int y = 0; y < height; ++y) {
        const int sy = static_cast<int>((static_cast<long long>(y) * src.height) / height);
        for (int x = 0; x < width; ++x) {
            const int sx = static_cast<int>((static_cast<long long>(x) * src.width) / width);
            for (int c = 0; c < src.channels; ++c) out.at(x, y, c) = src.at(sx, sy, c);
        }
    }
    return out;
}

Image flatten_alpha(const Image& rgba, std::uint8_t background) {
    if (rgba.channels == 3) return rgba;
    Image out(rgba.width, rgba.height, 3);
    for (int y = 0; y < rgba.height; ++y) {
        for (int x = 0; x < rgba.width; ++x) {
            const int a = rgba.at(x, y, 3);
            for (int c = 0; c < 3; ++c) {
                out.at(x, y, c) = static_cast<std::uint8_t>((rgba.at(x, y, c) * a + background * (255 - a) + 127) / 255);
            }
        }
    }
    return out;
}

namespace {

struct WriteBuffer {
    std::vector<std::uint8_t> bytes;
};

void write_to_buffer(png_structp png, png_bytep data, png_size_t length) {
    auto* buf = static_cast<WriteBuffer*>(png_get_io_ptr(png));
    buf->bytes.insert(buf->bytes.end(), data, data + length);
}

void flush_noop(png_structp) {}

struct ReadBuffer {
    const std::vector<std::uint8_t>* bytes;
    size_t offset = 0;
};

void read_from_buffer(png_structp png, png_bytep out, png_size_t length) {
    auto* buf = static_cast<ReadBuffer*>(png_get_io_ptr(png));
    if (buf->offset + length > buf->bytes->size()) png_error(png, "truncated PNG");
    std::memcpy(out, buf->bytes->data() + buf->offset, length);
    buf->offset += length;
}

void png_error_fn(png_structp png, png_const_charp msg) {
    auto* text = static_cast<std::string*>(png_get_error_ptr(png));
    if (text) *text = msg;
    png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
    if (image.channels != 3 && image.channels != 4) fail(ErrorCode::ShapeMismatch, "PNG encode needs 3 or 4 channels");
    std::string message;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
    png_infop info = png_create_info_struct(png);
    WriteBuffer buf;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(ErrorCode::IoError, "PNG encode failed: " + message);
    }
    png_set_write_fn(png, &buf, write_to_buffer, flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 image.channels == 4 ? PNG_COLOR_TYPE_RGBA : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const size_t stride = static_cast<size_t>(image.width) * image.channels;
    for (int y = 0; y < image.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(image.pixels.data() + stride * y));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return std::move(buf.bytes);
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) fail(ErrorCode::IoError, "not a PNG file");
    std::string message;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
    png_infop info = png_create_info_struct(png);
    ReadBuffer buf{&bytes, 0};
    Image out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(ErrorCode::IoError, "PNG decode failed: " + message);
    }
    png_set_read_fn(png, &buf, read_from_buffer);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int channels = png_get_channels(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = channels;
    out.pixels.assign(static_cast<size_t>(out.width) * out.height * channels, 0);
    std::vector<png_bytep> rows(static_cast<size_t>(out.height));
    for (int y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + static_cast<size_t>(y) * out.width * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void save_png(const Image& image, const std::filesystem::path& path) {
    const auto bytes = encode_png(image);
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoError, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image load_png(const std::filesystem::path& path, bool force_rgba) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoError, "cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Image img = decode_png(bytes);
    if (force_rgba && img.channels == 3) {
        Image rgba(img.width, img.height, 4, 255);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c) rgba.at(x, y, c) = img.at(x, y, c);
        return rgba;
    }
    return img;
}

}  // namespace storyplug
