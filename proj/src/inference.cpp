#include "storyplug/inference.hpp"

#include "storyplug/error.hpp"
#include "storyplug/hashing.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace storyplug {

void LayoutSpec::validate() const {
    for (const auto& [name, b] : boxes) {
        if (name.empty()) fail(ErrorCode::InvalidLayout, "box with an empty character name");
        const bool finite = std::isfinite(b.x0) && std::isfinite(b.y0) && std::isfinite(b.x1) && std::isfinite(b.y1);
        if (!finite || !(0.0 <= b.x0 && b.x0 < b.x1 && b.x1 <= 1.0) || !(0.0 <= b.y0 && b.y0 < b.y1 && b.y1 <= 1.0)) {
            fail(ErrorCode::InvalidLayout, "box for '" + name + "' must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1");
        }
    }
    if (!(positive_value > 0.0)) fail(ErrorCode::InvalidLayout, "positive_value must be > 0");
    if (!(negative_value < 0.0)) fail(ErrorCode::InvalidLayout, "negative_value must be < 0");
}

void EditSchedule::validate() const {
    if (!(active_fraction > 0.0 && active_fraction <= 1.0)) fail(ErrorCode::InvalidConfig, "active_fraction must be in (0, 1]");
    if (!(base_scale >= 0.0) || !std::isfinite(base_scale)) fail(ErrorCode::InvalidConfig, "base_scale must be >= 0");
}

double xi(const EditSchedule& schedule, int step, int total_steps) {
    const double window = schedule.active_fraction * total_steps;
    switch (schedule.kind) {
        case ScheduleKind::linear_decay:
            return schedule.base_scale * std::max(0.0, 1.0 - step / window);
        case ScheduleKind::constant_window:
            return step < window ? schedule.base_scale : 0.0;
    }
    return 0.0;
}

Eigen::VectorXd rasterize_layout(const LayoutSpec& layout, const std::string& character, int side) {
    const auto it = layout.boxes.find(character);
    if (it == layout.boxes.end()) fail(ErrorCode::UnknownCharacter, "layout has no box for '" + character + "'");
    if (side < 1) fail(ErrorCode::ShapeMismatch, "side must be positive");
    const Box& b = it->second;
    // Cell i is inside when its centre (i + 0.5) / side lies in [lo, hi).
    auto first_cell = [side](double edge) {
        return std::clamp(static_cast<int>(std::ceil(edge * side - 0.5)), 0, side);
    };
    const int cx0 = first_cell(b.x0);
    const int cx1 = first_cell(b.x1);
    const int cy0 = first_cell(b.y0);
    const int cy1 = first_cell(b.y1);
    Eigen::VectorXd map = Eigen::VectorXd::Constant(side * side, layout.negative_value);
    for (int y = cy0; y < cy1; ++y)
        for (int x = cx0; x < cx1; ++x) map(y * side + x) = layout.positive_value;
    return map;
}

Eigen::VectorXd edit_cross_attention(const Eigen::VectorXd& scores, const Eigen::VectorXd& bias, double xi_value) {
    if (scores.size() != bias.size()) {
        fail(ErrorCode::ShapeMismatch, "bias map has " + std::to_string(bias.size()) + " cells, scores have " +
                                           std::to_string(scores.size()));
    }
    if (xi_value == 0.0) return scores;
    return scores + xi_value * bias;
}

Matrix fuse_embeddings(const Matrix& embeddings, std::span<const int> prompt_tokens,
                       std::span<const CharacterPlugin> plugins, const BackendDescriptor& descriptor) {
    const int L = descriptor.L;
    if (embeddings.rows() != L || embeddings.cols() != descriptor.H || static_cast<int>(prompt_tokens.size()) != L) {
        fail(ErrorCode::ShapeMismatch, "fusion needs L x H embeddings and L prompt tokens");
    }
    Matrix fused = embeddings;
    std::set<int> seen_tokens;
    for (const auto& plugin : plugins) {
        if (plugin.rows.rows() != descriptor.plugin_rows() || plugin.rows.cols() != descriptor.H) {
            fail(ErrorCode::ShapeMismatch, "plugin '" + plugin.name + "' has the wrong shape");
        }
        const int ct = class_noun_token(descriptor, plugin.class_noun, ErrorCode::UnknownClassNoun);
        if (!seen_tokens.insert(ct).second) {
            fail(ErrorCode::DuplicateClassNoun, "two plugins share the class noun '" + plugin.class_noun + "'");
        }
        bool found = false;
        for (int p = 0; p < L; ++p) {
            if (prompt_tokens[static_cast<size_t>(p)] != ct) continue;
            found = true;
            if (p < 1 || p > L - 2) {
                fail(ErrorCode::PositionOutOfRange, "class noun '" + plugin.class_noun + "' sits at position " +
                                                        std::to_string(p));
            }
            fused.row(p) = plugin.row_for_position(p);
        }
        if (!found) fail(ErrorCode::CharacterNotInPrompt, "class noun '" + plugin.class_noun + "' is not in the prompt");
    }
    return fused;
}

std::vector<int> character_positions(const std::string& name, const TokenizedText& tokens,
                                     std::span<const CharacterPlugin> plugins, const BackendDescriptor& descriptor) {
    int token = -1;
    for (const auto& p : plugins) {
        if (p.name == name) token = class_noun_token(descriptor, p.class_noun, ErrorCode::UnknownClassNoun);
    }
    if (token < 0) {
        const auto pieces = word_pieces(name);
        if (pieces.size() == 1) token = piece_token_id(descriptor, pieces.front());
    }
    std::vector<int> positions;
    if (token >= 0) {
        for (int p = 1; p <= tokens.content_length; ++p)
            if (tokens.ids[static_cast<size_t>(p)] == token) positions.push_back(p);
    }
    if (positions.empty()) {
        fail(ErrorCode::UnknownCharacter, "layout character '" + name + "' matches no plugin or prompt word");
    }
    return positions;
}

double in_box_mass(const Matrix& probs, int position, const Eigen::VectorXd& bias) {
    double inside = 0.0;
    double total = 0.0;
    for (Eigen::Index cell = 0; cell < probs.rows(); ++cell) {
        const double a = probs(cell, position);
        total += a;
        if (bias(cell) > 0.0) inside += a;
    }
    return total > 0.0 ? inside / total : 0.0;
}

nlohmann::json FrameDiagnostics::to_json() const {
    nlohmann::json chars = nlohmann::json::object();
    for (const auto& c : characters) {
        chars[c.name] = {{"positions", c.positions}, {"in_box_mass", c.in_box_mass}};
    }
    return {{"seed", seed}, {"xi", xi_per_step}, {"characters", chars}};
}

FrameResult generate_frame(const GenerationRequest& request, const Backend& backend) {
    const auto& d = backend.descriptor();
    for (const auto& p : request.plugins) {
        if (p.descriptor_id != d.backend_id) {
            fail(ErrorCode::DescriptorMismatch, "plugin '" + p.name + "' was built for '" + p.descriptor_id + "'");
        }
    }
    request.layout.validate();
    request.schedule.validate();
    if (request.steps < 1) fail(ErrorCode::InvalidConfig, "steps must be >= 1");

    const auto tokens = backend.tokenize(request.prompt);
    const auto& frozen = backend.frozen_encoder();
    const Matrix cond = fuse_embeddings(backend.encode_tokens(frozen, tokens.ids), tokens.ids, request.plugins, d);
    const auto empty = empty_sequence(d);
    const Matrix uncond = backend.encode_tokens(frozen, empty);

    struct Steered {
        std::vector<int> positions;
        std::vector<Eigen::VectorXd> bias_by_layer;
    };
    std::vector<Steered> steered;
    FrameResult result;
    result.diagnostics.seed = request.seed;
    for (const auto& [name, box] : request.layout.boxes) {
        Steered s;
        s.positions = character_positions(name, tokens, request.plugins, d);
        for (int side : d.attention_sides) s.bias_by_layer.push_back(rasterize_layout(request.layout, name, side));
        steered.push_back(std::move(s));
        result.diagnostics.characters.push_back({name, steered.back().positions, {}, {}});
    }
    auto layer_edited = [&](int layer) {
        return request.edit_layers.empty() ||
               std::find(request.edit_layers.begin(), request.edit_layers.end(), layer) != request.edit_layers.end();
    };

    double current_xi = 0.0;
    const AttentionEditor editor = [&](const AttentionSite& site, Matrix& scores) {
        if (!layer_edited(site.layer)) return;
        for (const auto& s : steered) {
            const auto& bias = s.bias_by_layer[static_cast<size_t>(site.layer)];
            for (int p : s.positions) {
                scores.col(p) = edit_cross_attention(scores.col(p), bias, current_xi);
            }
        }
    };
    const StepEditorFactory editor_for_step = [&](const SamplerStep& step) -> const AttentionEditor* {
        current_xi = xi(request.schedule, step.index, request.steps);
        result.diagnostics.xi_per_step.push_back(current_xi);
        if (steered.empty() || current_xi == 0.0) return nullptr;
        return &editor;
    };
    const StepObserver observer = [&](const SamplerStep& step, const NoisePrediction& pred) {
        for (size_t c = 0; c < steered.size(); ++c) {
            double mass = 0.0;
            int count = 0;
            for (const auto& map : pred.cross_attention_maps) {
                for (int p : steered[c].positions) {
                    mass += in_box_mass(map.probs, p, steered[c].bias_by_layer[static_cast<size_t>(map.site.layer)]);
                    ++count;
                }
            }
            auto& trace = result.diagnostics.characters[c];
            trace.in_box_mass.push_back(count ? mass / count : 0.0);
            if (step.index == request.steps - 1) trace.final_maps = pred.cross_attention_maps;
        }
    };

    SamplerOptions options;
    options.steps = request.steps;
    options.guidance_scale = request.guidance_scale;
    options.seed = request.seed;
    result.latent = ddim_sample(backend, cond, uncond, options, editor_for_step, observer);
    result.image = backend.decode_latent(result.latent);
    return result;
}

nlohmann::json layout_to_json(const LayoutSpec& layout) {
    nlohmann::json boxes = nlohmann::json::object();
    for (const auto& [name, b] : layout.boxes) boxes[name] = {b.x0, b.y0, b.x1, b.y1};
    return {{"boxes", boxes}, {"positive_value", layout.positive_value}, {"negative_value", layout.negative_value}};
}

LayoutSpec layout_from_json(const nlohmann::json& j) {
    LayoutSpec layout;
    try {
        if (j.contains("boxes")) {
            for (const auto& [name, v] : j.at("boxes").items()) {
                Box b;
                if (v.is_array()) {
                    if (v.size() != 4) fail(ErrorCode::SchemaViolation, "box '" + name + "' needs 4 numbers");
                    b = {v[0].get<double>(), v[1].get<double>(), v[2].get<double>(), v[3].get<double>()};
                } else {
                    b = {v.at("x0").get<double>(), v.at("y0").get<double>(), v.at("x1").get<double>(), v.at("y1").get<double>()};
                }
                layout.boxes[name] = b;
            }
        }
        layout.positive_value = j.value("positive_value", layout.positive_value);
        layout.negative_value = j.value("negative_value", layout.negative_value);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::SchemaViolation, std::string("layout: ") + e.what());
    }
    layout.validate();
    return layout;
}

nlohmann::json schedule_to_json(const EditSchedule& s) {
    return {{"kind", s.kind == ScheduleKind::linear_decay ? "linear_decay" : "constant_window"},
            {"active_fraction", s.active_fraction},
            {"base_scale", s.base_scale}};
}

EditSchedule schedule_from_json(const nlohmann::json& j) {
    EditSchedule s;
    try {
        const auto kind = j.value("kind", std::string("linear_decay"));
        if (kind == "linear_decay") {
            s.kind = ScheduleKind::linear_decay;
        } else if (kind == "constant_window") {
            s.kind = ScheduleKind::constant_window;
        } else {
            fail(ErrorCode::SchemaViolation, "unknown schedule kind '" + kind + "'");
        }
        s.active_fraction = j.value("active_fraction", s.active_fraction);
        s.base_scale = j.value("base_scale", s.base_scale);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::SchemaViolation, std::string("schedule: ") + e.what());
    }
    s.validate();
    return s;
}

nlohmann::json canonical_request(const GenerationRequest& request, const BackendDescriptor& descriptor) {
    nlohmann::json plugins = nlohmann::json::array();
    // Fusion does not depend on plugin order, so neither does the hash.
    std::vector<std::pair<std::string, std::string>> named;
    for (const auto& p : request.plugins) named.emplace_back(p.name, plugin_content_digest(p));
    std::sort(named.begin(), named.end());
    for (const auto& [name, digest] : named) plugins.push_back({{"name", name}, {"digest", digest}});
    return {
        {"descriptor", descriptor.backend_id},
        {"prompt", request.prompt},
        {"plugins", plugins},
        {"layout", layout_to_json(request.layout)},
        {"schedule", schedule_to_json(request.schedule)},
        {"seed", request.seed},
        {"steps", request.steps},
        {"guidance_scale", request.guidance_scale},
        {"edit_layers", request.edit_layers},
    };
}

std::string request_hash(const GenerationRequest& request, const BackendDescriptor& descriptor) {
    return sha256_hex(canonical_request(request, descriptor).dump());
}

}  // namespace storyplug
