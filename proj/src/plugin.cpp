#include "storyplug/plugin.hpp"

#include "storyplug/error.hpp"
#include "storyplug/hashing.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace storyplug {

namespace {

constexpr char kMagic[4] = {'C', 'G', 'C', 'P'};

static_assert(std::endian::native == std::endian::little, "plugin IO assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    std::uint8_t b[4];
    std::memcpy(b, &v, 4);
    out.insert(out.end(), b, b + 4);
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    bool has(size_t n) const { return pos_ + n <= bytes_.size(); }
    size_t remaining() const { return bytes_.size() - pos_; }

    std::uint32_t u32(const char* what) {
        if (!has(4)) fail(ErrorCode::DimMismatch, std::string("file truncated while reading ") + what);
        std::uint32_t v;
        std::memcpy(&v, bytes_.data() + pos_, 4);
        pos_ += 4;
        return v;
    }

    std::span<const std::uint8_t> take(size_t n, const char* what) {
        if (!has(n)) fail(ErrorCode::DimMismatch, std::string("file truncated while reading ") + what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> bytes_;
    size_t pos_ = 0;
};

std::string metadata_json(const CharacterPlugin& p) {
    nlohmann::json meta = {
        {"name", p.name},
        {"class_noun", p.class_noun},
        {"descriptor_id", p.descriptor_id},
        {"created_at", p.created_at},
    };
    return meta.dump();
}

}  // namespace

bool bitwise_equal(const CharacterPlugin& a, const CharacterPlugin& b) {
    if (a.name != b.name || a.class_noun != b.class_noun || a.descriptor_id != b.descriptor_id ||
        a.created_at != b.created_at || a.format_version != b.format_version || a.rows.rows() != b.rows.rows() ||
        a.rows.cols() != b.rows.cols()) {
        return false;
    }
    return std::memcmp(a.rows.data(), b.rows.data(), sizeof(float) * static_cast<size_t>(a.rows.size())) == 0;
}

size_t plugin_header_size(const CharacterPlugin& plugin) {
    return 4 + 4 + 4 + metadata_json(plugin).size() + 8;
}

std::vector<std::uint8_t> serialize(const CharacterPlugin& plugin) {
    const std::string meta = metadata_json(plugin);
    std::vector<std::uint8_t> out;
    out.reserve(plugin_header_size(plugin) + sizeof(float) * static_cast<size_t>(plugin.rows.size()));
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, plugin.format_version);
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out.insert(out.end(), meta.begin(), meta.end());
    put_u32(out, static_cast<std::uint32_t>(plugin.rows.rows()));
    put_u32(out, static_cast<std::uint32_t>(plugin.rows.cols()));
    const auto* payload = reinterpret_cast<const std::uint8_t*>(plugin.rows.data());
    out.insert(out.end(), payload, payload + sizeof(float) * static_cast<size_t>(plugin.rows.size()));
    return out;
}

CharacterPlugin deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) fail(ErrorCode::BadMagic, "not a .cgcp plugin");
    Reader r(bytes.subspan(4));
    CharacterPlugin p;
    p.format_version = r.u32("version");
    if (p.format_version != kPluginFormatVersion) {
        fail(ErrorCode::VersionUnsupported, "plugin format version " + std::to_string(p.format_version) + " is not supported");
    }
    const std::uint32_t meta_len = r.u32("metadata length");
    const auto meta_bytes = r.take(meta_len, "metadata");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
        p.name = meta.at("name").get<std::string>();
        p.class_noun = meta.at("class_noun").get<std::string>();
        p.descriptor_id = meta.at("descriptor_id").get<std::string>();
        p.created_at = meta.value("created_at", std::int64_t{0});
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::SchemaViolation, std::string("bad plugin metadata: ") + e.what());
    }
    const std::uint32_t rows = r.u32("rows");
    const std::uint32_t cols = r.u32("cols");
    const size_t payload = sizeof(float) * static_cast<size_t>(rows) * cols;
    if (r.remaining() != payload) {
        fail(ErrorCode::DimMismatch, "payload holds " + std::to_string(r.remaining()) + " bytes; dims " +
                                         std::to_string(rows) + "x" + std::to_string(cols) + " need " +
                                         std::to_string(payload));
    }
    const auto data = r.take(payload, "payload");
    p.rows.resize(rows, cols);
    std::memcpy(p.rows.data(), data.data(), payload);
    for (Eigen::Index i = 0; i < p.rows.size(); ++i) {
        if (!std::isfinite(p.rows.data()[i])) fail(ErrorCode::NonFiniteEntry, "plugin holds a non-finite entry");
    }
    return p;
}

void save_plugin(const CharacterPlugin& plugin, const std::filesystem::path& path) {
    const auto bytes = serialize(plugin);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoError, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

CharacterPlugin load_plugin(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoError, "cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

std::vector<std::string> validate(const CharacterPlugin& plugin, const BackendDescriptor& descriptor) {
    std::vector<std::string> v;
    if (plugin.name.empty()) v.push_back("name is empty");
    if (plugin.descriptor_id != descriptor.backend_id) {
        v.push_back("descriptor id '" + plugin.descriptor_id + "' does not match '" + descriptor.backend_id + "'");
    }
    if (plugin.rows.rows() != descriptor.plugin_rows() || plugin.rows.cols() != descriptor.H) {
        v.push_back("rows are " + std::to_string(plugin.rows.rows()) + "x" + std::to_string(plugin.rows.cols()) +
                    ", expected " + std::to_string(descriptor.plugin_rows()) + "x" + std::to_string(descriptor.H));
    }
    for (Eigen::Index i = 0; i < plugin.rows.size(); ++i) {
        if (!std::isfinite(plugin.rows.data()[i])) {
            v.push_back("non-finite entry at flat index " + std::to_string(i));
            break;
        }
    }
    try {
        class_noun_token(descriptor, plugin.class_noun, ErrorCode::MultiTokenNoun);
    } catch (const Error& e) {
        v.push_back(e.what());
    }
    return v;
}

std::string plugin_content_digest(const CharacterPlugin& plugin) {
    std::vector<std::uint8_t> buf;
    auto put_str = [&](const std::string& s) {
        put_u32(buf, static_cast<std::uint32_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    };
    put_str(plugin.name);
    put_str(plugin.class_noun);
    put_str(plugin.descriptor_id);
    put_u32(buf, static_cast<std::uint32_t>(plugin.rows.rows()));
    put_u32(buf, static_cast<std::uint32_t>(plugin.rows.cols()));
    const auto* payload = reinterpret_cast<const std::uint8_t*>(plugin.rows.data());
    buf.insert(buf.end(), payload, payload + sizeof(float) * static_cast<size_t>(plugin.rows.size()));
    return sha256_hex(buf);
}

}  // namespace storyplug
