#include "storyplug/extraction.hpp"

#include "storyplug/error.hpp"
#include "storyplug/parallel.hpp"

namespace storyplug {

int TokenMatrix::character_column(int q) const {
    for (int l = 0; l < cols; ++l)
        if (at(q, l) == character_token) return l;
    fail(ErrorCode::ShapeMismatch, "token matrix row " + std::to_string(q) + " has no character token");
}

TokenMatrix build_token_matrix(const BackendDescriptor& descriptor, std::string_view class_noun) {
    descriptor.validate();
    const int ct = class_noun_token(descriptor, class_noun, ErrorCode::MultiTokenNoun);
    TokenMatrix tm;
    tm.cols = descriptor.L;
    tm.rows = descriptor.L - 2;
    tm.character_token = ct;
    tm.ids.assign(static_cast<size_t>(tm.rows) * tm.cols, descriptor.token_ids.pad);
    for (int q = 0; q < tm.rows; ++q) {
        auto* row = tm.ids.data() + static_cast<size_t>(q) * tm.cols;
        row[q] = descriptor.token_ids.bos;
        row[q + 1] = ct;
        row[q + 2] = descriptor.token_ids.eos;
    }
    return tm;
}

EmbeddingMatrix encode_token_matrix(const Backend& backend, const EncoderState& encoder, const TokenMatrix& tm,
                                    int workers) {
    const auto& d = backend.descriptor();
    if (tm.cols != d.L || tm.rows != d.L - 2) fail(ErrorCode::ShapeMismatch, "token matrix does not match the backend");
    EmbeddingMatrix em;
    em.rows.resize(static_cast<size_t>(tm.rows));
    em.character_columns.resize(static_cast<size_t>(tm.rows));
    parallel_for(static_cast<size_t>(tm.rows), workers, [&](size_t q) {
        em.rows[q] = backend.encode_tokens(encoder, tm.row(static_cast<int>(q)));
        em.character_columns[q] = tm.character_column(static_cast<int>(q));
    });
    return em;
}

CharacterPlugin extract_plugin(const EmbeddingMatrix& em, const PluginMetadata& metadata) {
    if (em.rows.empty() || em.character_columns.size() != em.rows.size()) {
        fail(ErrorCode::ShapeMismatch, "embedding matrix is empty or lacks character columns");
    }
    const auto H = em.rows.front().cols();
    CharacterPlugin p;
    p.name = metadata.name;
    p.class_noun = metadata.class_noun;
    p.descriptor_id = metadata.descriptor_id;
    p.created_at = metadata.created_at;
    p.rows.resize(em.Q(), H);
    for (int q = 0; q < em.Q(); ++q) {
        const auto& m = em.rows[static_cast<size_t>(q)];
        const int col = em.character_columns[static_cast<size_t>(q)];
        if (m.cols() != H || col < 0 || col >= m.rows()) fail(ErrorCode::ShapeMismatch, "ragged embedding matrix");
        p.rows.row(q) = m.row(col).cast<float>();
    }
    return p;
}

CharacterPlugin create_plugin(const Backend& backend, const EncoderState& finetuned, const std::string& class_noun,
                              const std::string& name, std::int64_t created_at) {
    const auto tm = build_token_matrix(backend.descriptor(), class_noun);
    const auto em = encode_token_matrix(backend, finetuned, tm);
    return extract_plugin(em, {name, class_noun, backend.descriptor().backend_id, created_at});
}

}  // namespace storyplug
