#pragma once

#include "storyplug/backend.hpp"
#include "storyplug/plugin.hpp"

#include <span>
#include <string>
#include <vector>

namespace storyplug {

// Q = L - 2 token sequences; row q is [pad]*q + [bos, ct, eos] + pads.
struct TokenMatrix {
    int rows = 0;
    int cols = 0;
    int character_token = 0;
    std::vector<int> ids;  // row-major rows x cols

    int at(int q, int l) const { return ids[static_cast<size_t>(q) * cols + l]; }
    std::span<const int> row(int q) const {
        return {ids.data() + static_cast<size_t>(q) * cols, static_cast<size_t>(cols)};
    }
    // Column holding the character token in row q.
    int character_column(int q) const;
};

TokenMatrix build_token_matrix(const BackendDescriptor& descriptor, std::string_view class_noun);

// Q x L x H: one encoded sequence per token-matrix row.
struct EmbeddingMatrix {
    std::vector<Matrix> rows;
    std::vector<int> character_columns;  // taken from the token matrix

    int Q() const { return static_cast<int>(rows.size()); }
};

// Rows are encoded independently; `workers` > 1 spreads them over threads.
EmbeddingMatrix encode_token_matrix(const Backend& backend, const EncoderState& encoder, const TokenMatrix& tm,
                                    int workers = 1);

struct PluginMetadata {
    std::string name;
    std::string class_noun;
    std::string descriptor_id;
    std::int64_t created_at = 0;
};

// Row r of the plugin is rows[r] at character_columns[r].
CharacterPlugin extract_plugin(const EmbeddingMatrix& em, const PluginMetadata& metadata);

// build -> encode -> extract.
CharacterPlugin create_plugin(const Backend& backend, const EncoderState& finetuned, const std::string& class_noun,
                              const std::string& name, std::int64_t created_at = 0);

}  // namespace storyplug
