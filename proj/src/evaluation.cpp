#include "storyplug/evaluation.hpp"

#include "storyplug/error.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace storyplug {

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Embedding normalized(Embedding v) {
    const double n = v.norm();
    if (n == 0.0) {
        v.setZero();
        v(0) = 1.0;
        return v;
    }
    return v / n;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out(1);
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                out.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                out.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.emplace_back();
        } else if (c != '\r') {
            out.back() += c;
        }
    }
    return out;
}

}  // namespace

HashEmbedder::HashEmbedder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) fail(ErrorCode::InvalidConfig, "embedding dimension must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    projection_.resize(dim, 192);
    for (Eigen::Index i = 0; i < projection_.size(); ++i) projection_.data()[i] = n(rng);
}

Embedding HashEmbedder::embed_text(std::string_view text) const {
    Embedding v = Embedding::Zero(dim_);
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        std::mt19937_64 rng(fnv1a(word) ^ seed_);
        std::normal_distribution<double> n(0.0, 1.0);
        for (int i = 0; i < dim_; ++i) v(i) += n(rng);
    }
    return normalized(v);
}

Embedding HashEmbedder::embed_image(const Image& image) const {
    const Image rgb = flatten_alpha(image);
    Eigen::VectorXd grid = Eigen::VectorXd::Zero(192);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(64);
    for (int y = 0; y < rgb.height; ++y) {
        for (int x = 0; x < rgb.width; ++x) {
            const int cell = (y * 8 / rgb.height) * 8 + (x * 8 / rgb.width);
            counts(cell) += 1.0;
            for (int c = 0; c < 3; ++c) grid(cell * 3 + c) += rgb.at(x, y, c) / 255.0;
        }
    }
    for (int cell = 0; cell < 64; ++cell)
        if (counts(cell) > 0) grid.segment(cell * 3, 3) /= counts(cell);
    grid.array() -= 0.5;
    return normalized(projection_ * grid);
}

double cosine(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "embeddings differ in dimension");
    const double d = a.norm() * b.norm();
    if (d == 0.0) fail(ErrorCode::ShapeMismatch, "zero embedding");
    return a.dot(b) / d;
}

double text_alignment(std::span<const Embedding> images, const Embedding& prompt) {
    if (images.empty()) fail(ErrorCode::InvalidConfig, "no images to score");
    double sum = 0.0;
    for (const auto& e : images) sum += cosine(e, prompt);
    return sum / static_cast<double>(images.size());
}

double image_alignment(std::span<const Embedding> images, std::span<const std::vector<Embedding>> refs) {
    if (images.empty()) fail(ErrorCode::InvalidConfig, "no images to score");
    if (refs.empty()) fail(ErrorCode::InvalidConfig, "no character references");
    double total = 0.0;
    for (const auto& character : refs) {
        if (character.empty()) fail(ErrorCode::InvalidConfig, "character with no reference images");
        double sum = 0.0;
        for (const auto& r : character)
            for (const auto& e : images) sum += cosine(r, e);
        total += sum / static_cast<double>(character.size() * images.size());
    }
    return total / static_cast<double>(refs.size());
}

namespace {

std::vector<Embedding> embed_all(std::span<const Image> images, const Embedder& embedder) {
    std::vector<Embedding> out(images.size());
    for (size_t i = 0; i < images.size(); ++i) out[i] = embedder.embed_image(images[i]);
    return out;
}

}  // namespace

double text_alignment(std::span<const Image> images, std::string_view prompt, const Embedder& embedder) {
    const auto e = embed_all(images, embedder);
    return text_alignment(e, embedder.embed_text(prompt));
}

double image_alignment(std::span<const Image> images, std::span<const std::vector<Image>> refs,
                       const Embedder& embedder) {
    const auto e = embed_all(images, embedder);
    std::vector<std::vector<Embedding>> r;
    for (const auto& set : refs) r.push_back(embed_all(set, embedder));
    return image_alignment(e, r);
}

std::vector<EvalQuestion> default_questions() {
    return {
        {"COR", "Correspondence: does the image match the frame's text description?"},
        {"COH", "Coherence: are the characters consistent with their references and across frames?"},
        {"QUA", "Quality: is the image visually sound and free of artifacts?"},
    };
}

void validate_score(int score) {
    if (score < kMinScore || score > kMaxScore) {
        fail(ErrorCode::InvalidScore,
             "score " + std::to_string(score) + " outside " + std::to_string(kMinScore) + ".." + std::to_string(kMaxScore));
    }
}

std::string human_eval_sheet(const nlohmann::json& manifest, std::span<const EvalQuestion> questions) {
    std::vector<std::string> images;
    const nlohmann::json* list = &manifest;
    if (manifest.is_object()) {
        if (!manifest.contains("frames")) fail(ErrorCode::SchemaViolation, "manifest has no frames");
        list = &manifest.at("frames");
    }
    if (!list->is_array()) fail(ErrorCode::SchemaViolation, "manifest frames must be an array");
    for (const auto& f : *list) {
        if (f.is_string()) {
            images.push_back(f.get<std::string>());
        } else if (f.is_object() && f.contains("path")) {
            images.push_back(f.at("path").get<std::string>());
        } else {
            fail(ErrorCode::SchemaViolation, "manifest frame has no path");
        }
    }
    std::ostringstream o;
    o << "# score: integer " << kMinScore << "-" << kMaxScore << " (" << kMinScore << " worst, " << kMaxScore
      << " best); leave blank if unrated\n";
    o << "image,question,prompt,score\n";
    for (const auto& img : images)
        for (const auto& q : questions) o << csv_field(img) << ',' << csv_field(q.key) << ',' << csv_field(q.text) << ",\n";
    return o.str();
}

void export_human_eval_sheet(const nlohmann::json& manifest, std::span<const EvalQuestion> questions,
                             const std::filesystem::path& path) {
    const auto text = human_eval_sheet(manifest, questions);
    std::ofstream f(path);
    if (!f) fail(ErrorCode::IoError, "cannot write " + path.string());
    f << text;
}

std::vector<SheetScore> read_scored_sheet(std::string_view csv) {
    std::istringstream in{std::string(csv)};
    std::string line;
    std::vector<SheetScore> out;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            header = false;
            continue;
        }
        const auto f = split_csv_line(line);
        if (f.size() < 4) fail(ErrorCode::SchemaViolation, "sheet row has " + std::to_string(f.size()) + " fields");
        const auto& s = f[3];
        if (s.find_first_not_of(" \t") == std::string::npos) continue;
        int score = 0;
        try {
            size_t used = 0;
            score = std::stoi(s, &used);
            if (s.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            fail(ErrorCode::InvalidScore, "score '" + s + "' is not an integer");
        }
        validate_score(score);
        out.push_back({f[0], f[1], score});
    }
    return out;
}

std::string scores_csv(std::span<const StoryScores> rows) {
    std::ostringstream o;
    o.precision(6);
    o << std::fixed;
    o << "story,TA,IA\n";
    for (const auto& r : rows) o << csv_field(r.story) << ',' << r.ta << ',' << r.ia << '\n';
    return o.str();
}

}  // namespace storyplug
