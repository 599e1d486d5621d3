#pragma once

// Plugin-guided and layout-guided generation.
//
// Prompt embeddings come from the frozen encoder; rows sitting at a plugin's
// class-noun positions are swapped for the plugin row distilled for that
// position. During sampling, each character's pre-softmax cross-attention
// scores get xi(step) * bias added, where the bias is positive inside the
// character's box and strongly negative outside it.

#include "storyplug/backend.hpp"
#include "storyplug/plugin.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace storyplug {

struct Box {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 1.0;
    double y1 = 1.0;

    bool operator==(const Box&) const = default;
};

struct LayoutSpec {
    std::map<std::string, Box> boxes;  // character name -> normalized box
    double positive_value = 2.5;
    double negative_value = -1e8;

    // Throws InvalidLayout.
    void validate() const;
    bool empty() const { return boxes.empty(); }
};

enum class ScheduleKind { linear_decay, constant_window };

struct EditSchedule {
    ScheduleKind kind = ScheduleKind::linear_decay;
    double active_fraction = 0.5;
    double base_scale = 1.0;

    void validate() const;
};

double xi(const EditSchedule& schedule, int step, int total_steps);

// One row-major side x side map, flattened to match attention-score rows.
Eigen::VectorXd rasterize_layout(const LayoutSpec& layout, const std::string& character, int side);

Eigen::VectorXd edit_cross_attention(const Eigen::VectorXd& scores, const Eigen::VectorXd& bias, double xi_value);

// Replaces every class-noun occurrence row p with plugin row p-1.
Matrix fuse_embeddings(const Matrix& embeddings, std::span<const int> prompt_tokens,
                       std::span<const CharacterPlugin> plugins, const BackendDescriptor& descriptor);

struct GenerationRequest {
    std::string prompt;
    std::vector<CharacterPlugin> plugins;
    LayoutSpec layout;
    EditSchedule schedule;
    std::uint64_t seed = 0;
    int steps = 100;
    double guidance_scale = 7.5;
    // Attention layers that receive edits; empty means all.
    std::vector<int> edit_layers;
};

struct CharacterTrace {
    std::string name;
    std::vector<int> positions;
    std::vector<double> in_box_mass;  // one entry per step
    // Final-step attention mass per cell for each layer (cells row-major).
    std::vector<AttentionMap> final_maps;
};

struct FrameDiagnostics {
    std::uint64_t seed = 0;
    std::vector<double> xi_per_step;
    std::vector<CharacterTrace> characters;

    nlohmann::json to_json() const;
};

struct FrameResult {
    Image image;
    Matrix latent;
    FrameDiagnostics diagnostics;
};

// Token positions the layout box of `name` steers: the plugin's class noun if a
// plugin with that name is present, otherwise the word itself.
std::vector<int> character_positions(const std::string& name, const TokenizedText& tokens,
                                     std::span<const CharacterPlugin> plugins, const BackendDescriptor& descriptor);

// Fraction of the attention a token position receives that lands inside the map's positive cells.
double in_box_mass(const Matrix& probs, int position, const Eigen::VectorXd& bias);

FrameResult generate_frame(const GenerationRequest& request, const Backend& backend);

// Canonical, order-stable description of a request; plugins contribute their content digests.
nlohmann::json canonical_request(const GenerationRequest& request, const BackendDescriptor& descriptor);
std::string request_hash(const GenerationRequest& request, const BackendDescriptor& descriptor);

nlohmann::json layout_to_json(const LayoutSpec& layout);
LayoutSpec layout_from_json(const nlohmann::json& j);
nlohmann::json schedule_to_json(const EditSchedule& schedule);
EditSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace storyplug
