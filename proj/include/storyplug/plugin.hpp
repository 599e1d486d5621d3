#pragma once

// Character plugins: the (L-2) x H matrix of per-position character-token
// embeddings plus enough metadata to be self-describing.
//
// On-disk layout (.cgcp, little endian):
//   "CGCP"                      4 bytes magic
//   u32 format_version          currently 1
//   u32 metadata_length         followed by that many bytes of UTF-8 JSON
//   u32 rows, u32 cols          rows = L - 2, cols = H
//   f32[rows * cols]            row-major payload

#include "storyplug/backend.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace storyplug {

using PluginMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::uint32_t kPluginFormatVersion = 1;

struct CharacterPlugin {
    std::string name;
    std::string class_noun;
    std::string descriptor_id;
    std::int64_t created_at = 0;  // unix seconds
    std::uint32_t format_version = kPluginFormatVersion;
    PluginMatrix rows;

    // Embedding distilled for sequence position p (1 <= p <= L-2).
    Eigen::RowVectorXd row_for_position(int position) const {
        return rows.row(position - 1).cast<double>();
    }
};

bool bitwise_equal(const CharacterPlugin& a, const CharacterPlugin& b);

std::vector<std::uint8_t> serialize(const CharacterPlugin& plugin);
CharacterPlugin deserialize(std::span<const std::uint8_t> bytes);
// Bytes preceding the float payload for this plugin's metadata.
size_t plugin_header_size(const CharacterPlugin& plugin);

void save_plugin(const CharacterPlugin& plugin, const std::filesystem::path& path);
CharacterPlugin load_plugin(const std::filesystem::path& path);

// Empty result means the plugin is usable with the descriptor.
std::vector<std::string> validate(const CharacterPlugin& plugin, const BackendDescriptor& descriptor);

// SHA-256 over everything that affects generation (name, class noun,
// descriptor id, rows); creation time is excluded.
std::string plugin_content_digest(const CharacterPlugin& plugin);

}  // namespace storyplug
