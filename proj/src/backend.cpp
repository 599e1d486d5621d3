#include "storyplug/backend.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

namespace storyplug {

// ---------------------------------------------------------------------------
// Descriptors

void BackendDescriptor::validate() const {
    if (L < 4) fail(ErrorCode::InvalidConfig, "descriptor L must be >= 4");
    if (H < 1) fail(ErrorCode::InvalidConfig, "descriptor H must be >= 1");
    if (latent_side < 1 || latent_channels < 1) fail(ErrorCode::InvalidConfig, "descriptor latent shape must be positive");
    for (int side : attention_sides) {
        if (side < 1 || latent_side % side != 0) {
            fail(ErrorCode::InvalidConfig, "attention side " + std::to_string(side) + " does not divide latent side");
        }
    }
    const auto& t = token_ids;
    if (t.bos == t.eos || t.bos == t.pad || t.eos == t.pad) fail(ErrorCode::InvalidConfig, "bos/eos/pad ids must be distinct");
    for (int id : {t.bos, t.eos, t.pad}) {
        if (id < 0 || id >= vocab_size) fail(ErrorCode::InvalidConfig, "special token id outside vocabulary");
    }
    if (vocab_size < 4) fail(ErrorCode::InvalidConfig, "vocabulary too small");
}

BackendDescriptor toy_descriptor() {
    BackendDescriptor d;
    d.backend_id = "toy-v1";
    d.L = 16;
    d.H = 32;
    d.latent_side = 8;
    d.latent_channels = 4;
    d.attention_sides = {8, 4};
    d.token_ids = {1, 2, 0};
    d.vocab_size = 1024;
    return d;
}

BackendDescriptor sd21_descriptor() {
    BackendDescriptor d;
    d.backend_id = "sd-2.1";
    d.L = 77;
    d.H = 1024;
    d.latent_side = 96;
    d.latent_channels = 4;
    d.attention_sides = {96, 48, 24, 12};
    d.token_ids = {49406, 49407, 0};
    d.vocab_size = 49408;
    return d;
}

// ---------------------------------------------------------------------------
// Tokenizer

namespace {

std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string strip_punct(std::string_view s) {
    size_t b = 0;
    size_t e = s.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

std::vector<std::string> word_pieces(std::string_view word) {
    const std::string w = strip_punct(lowercase(word));
    std::vector<std::string> pieces;
    std::string cur;
    for (char c : w) {
        if (c == '-' || c == '\'' || c == '/') {
            auto p = strip_punct(cur);
            if (!p.empty()) pieces.push_back(std::move(p));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    auto p = strip_punct(cur);
    if (!p.empty()) pieces.push_back(std::move(p));
    return pieces;
}

int piece_token_id(const BackendDescriptor& d, std::string_view piece) {
    const auto& t = d.token_ids;
    auto id = static_cast<int>(fnv1a(piece) % static_cast<std::uint64_t>(d.vocab_size));
    while (id == t.bos || id == t.eos || id == t.pad) id = (id + 1) % d.vocab_size;
    return id;
}

std::vector<int> TokenizedText::positions_of(std::string_view word) const {
    for (const auto& w : words) {
        if (w.word == word) return w.positions;
    }
    return {};
}

TokenizedText tokenize(const BackendDescriptor& d, std::string_view text, bool truncate) {
    TokenizedText out;
    std::vector<int> content;
    for (const auto& raw : split_whitespace(text)) {
        const auto pieces = word_pieces(raw);
        for (const auto& piece : pieces) {
            const int pos = static_cast<int>(content.size()) + 1;
            content.push_back(piece_token_id(d, piece));
            auto it = std::find_if(out.words.begin(), out.words.end(), [&](const WordPositions& w) { return w.word == piece; });
            if (it == out.words.end()) {
                out.words.push_back({piece, {pos}});
            } else {
                it->positions.push_back(pos);
            }
        }
    }
    if (content.empty()) fail(ErrorCode::EmptyText, "prompt is empty");
    const size_t cap = static_cast<size_t>(d.L - 2);
    if (content.size() > cap) {
        if (!truncate) {
            fail(ErrorCode::TextTooLong, "prompt has " + std::to_string(content.size()) + " tokens; at most " +
                                             std::to_string(cap) + " fit");
        }
        content.resize(cap);
        for (auto& w : out.words) {
            std::erase_if(w.positions, [&](int p) { return p > static_cast<int>(cap); });
        }
        std::erase_if(out.words, [](const WordPositions& w) { return w.positions.empty(); });
    }
    out.content_length = static_cast<int>(content.size());
    out.ids.assign(static_cast<size_t>(d.L), d.token_ids.pad);
    out.ids[0] = d.token_ids.bos;
    std::copy(content.begin(), content.end(), out.ids.begin() + 1);
    out.ids[content.size() + 1] = d.token_ids.eos;
    return out;
}

std::vector<int> empty_sequence(const BackendDescriptor& d) {
    std::vector<int> ids(static_cast<size_t>(d.L), d.token_ids.pad);
    ids[0] = d.token_ids.bos;
    ids[1] = d.token_ids.eos;
    return ids;
}

int class_noun_token(const BackendDescriptor& d, std::string_view class_noun, ErrorCode multi_token_error) {
    const auto words = split_whitespace(class_noun);
    std::vector<std::string> pieces;
    for (const auto& w : words) {
        auto p = word_pieces(w);
        pieces.insert(pieces.end(), p.begin(), p.end());
    }
    if (pieces.empty()) fail(ErrorCode::UnknownClassNoun, "class noun is empty");
    if (pieces.size() != 1) {
        fail(multi_token_error, "class noun '" + std::string(class_noun) + "' spans " + std::to_string(pieces.size()) +
                                    " tokens; exactly one is required");
    }
    return piece_token_id(d, pieces.front());
}

// ---------------------------------------------------------------------------
// Parameters

void ParameterSet::add(std::string name, Matrix value) {
    entries_.push_back({std::move(name), std::move(value)});
}

int ParameterSet::index_of(std::string_view name) const {
    for (size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].name == name) return static_cast<int>(i);
    return -1;
}

const Matrix& ParameterSet::get(std::string_view name) const {
    const int i = index_of(name);
    if (i < 0) fail(ErrorCode::ShapeMismatch, "missing parameter " + std::string(name));
    return entries_[static_cast<size_t>(i)].value;
}

Matrix& ParameterSet::get(std::string_view name) {
    const int i = index_of(name);
    if (i < 0) fail(ErrorCode::ShapeMismatch, "missing parameter " + std::string(name));
    return entries_[static_cast<size_t>(i)].value;
}

size_t ParameterSet::scalar_count() const {
    size_t n = 0;
    for (const auto& e : entries_) n += static_cast<size_t>(e.value.size());
    return n;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (size_t i = 0; i < entries_.size(); ++i) {
        const auto& a = entries_[i];
        const auto& b = other.entries_[i];
        if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
        if (std::memcmp(a.value.data(), b.value.data(), sizeof(double) * static_cast<size_t>(a.value.size())) != 0) {
            return false;
        }
    }
    return true;
}

EncoderBinding bind_parameters(const ParameterSet& params, bool requires_grad) {
    EncoderBinding b;
    b.source = &params;
    b.vars.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) b.vars.push_back(ad::leaf(params[i].value, requires_grad));
    return b;
}

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule NoiseSchedule::scaled_linear(int train_timesteps, double beta_start, double beta_end) {
    NoiseSchedule s;
    s.train_timesteps = train_timesteps;
    s.alphas_cumprod.resize(static_cast<size_t>(train_timesteps));
    const double a = std::sqrt(beta_start);
    const double b = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < train_timesteps; ++i) {
        const double r = train_timesteps == 1 ? 0.0 : static_cast<double>(i) / (train_timesteps - 1);
        const double beta = std::pow(a + (b - a) * r, 2);
        prod *= 1.0 - beta;
        s.alphas_cumprod[static_cast<size_t>(i)] = prod;
    }
    return s;
}

std::vector<int> NoiseSchedule::ddim_timesteps(int steps) const {
    if (steps < 1 || steps > train_timesteps) fail(ErrorCode::InvalidConfig, "DDIM steps must be in [1, train_timesteps]");
    const int ratio = train_timesteps / steps;
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i) ts[static_cast<size_t>(i)] = std::min((steps - 1 - i) * ratio + 1, train_timesteps - 1);
    return ts;
}

Matrix sinusoidal_embedding(int t, int width) {
    Matrix out(1, width);
    const int half = width / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out(0, i) = std::sin(t * freq);
        out(0, i + half) = std::cos(t * freq);
    }
    if (width % 2 == 1) out(0, width - 1) = 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Toy backend

namespace {

Matrix gaussian(std::mt19937_64& rng, int rows, int cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

constexpr int kEncoderBlocks = 2;
constexpr int kDenoiserWidth = 32;

// Coupling constants of the structured denoiser initialisation.
constexpr double kQueryScale = 1.0;
constexpr double kWriteGain = 1.0;

}  // namespace

ToyBackend::ToyBackend(ToyBackendOptions options) : options_(options), descriptor_(toy_descriptor()) {
    descriptor_.validate();
    const int H = descriptor_.H;
    const int C = descriptor_.latent_channels;
    const int D = kDenoiserWidth;
    const int F = options_.mlp_width;

    frozen_.kind = EncoderKind::frozen;
    frozen_.descriptor = descriptor_;
    frozen_.parameters = std::make_shared<const ParameterSet>(make_encoder_parameters(options_.seed));

    // Denoiser. The read-in map has orthonormal rows and the read-out map is
    // its negated transpose plus a unit skip, so the prediction is roughly the
    // latent itself, and whatever cross-attention writes into a cell is fed
    // back into that cell's latent in the direction its own queries match.
    std::mt19937_64 rng(options_.seed ^ 0x9e3779b97f4a7c15ULL);
    Matrix w_in = gaussian(rng, C, D, 1.0);
    for (int r = 0; r < C; ++r) {
        for (int p = 0; p < r; ++p) w_in.row(r) -= w_in.row(r).dot(w_in.row(p)) * w_in.row(p);
        w_in.row(r).normalize();
    }
    denoiser_.add("in.w", w_in);
    denoiser_.add("in.b", gaussian(rng, 1, D, 0.1));
    denoiser_.add("time.w", gaussian(rng, D, D, 0.1 / std::sqrt(D)));
    for (int b = 0; b < static_cast<int>(descriptor_.attention_sides.size()); ++b) {
        const std::string p = "x" + std::to_string(b) + ".";
        denoiser_.add(p + "ln_g", Matrix::Ones(1, D));
        denoiser_.add(p + "ln_b", Matrix::Zero(1, D));
        denoiser_.add(p + "wq", kQueryScale * Matrix::Identity(D, D) + gaussian(rng, D, D, 0.1 / std::sqrt(D)));
        Matrix wv = gaussian(rng, H, D, 1.0 / std::sqrt(H));
        Matrix wo = gaussian(rng, D, D, 1.0 / std::sqrt(D));
        denoiser_.add(p + "wk", wv * wo + gaussian(rng, H, D, 0.1 / std::sqrt(H)));
        denoiser_.add(p + "wv", wv);
        denoiser_.add(p + "wo", wo);
        denoiser_.add(p + "mln_g", Matrix::Ones(1, D));
        denoiser_.add(p + "mln_b", Matrix::Zero(1, D));
        denoiser_.add(p + "w1", gaussian(rng, D, F, 1.0 / std::sqrt(D)));
        denoiser_.add(p + "w2", gaussian(rng, F, D, 0.1 / std::sqrt(F)));
    }
    denoiser_.add("out.w", -kWriteGain * w_in.transpose() + gaussian(rng, D, C, 0.02));
    Matrix skip(1, 1);
    skip(0, 0) = 1.0 + kWriteGain;
    denoiser_.add("out.skip", skip);
    for (size_t i = 0; i < denoiser_.size(); ++i) denoiser_vars_.push_back(ad::constant(denoiser_[i].value));

    schedule_ = NoiseSchedule::scaled_linear(1000, 0.00085, 0.012);

    color_map_ = gaussian(rng, C, 3, 1.0 / std::sqrt(C));
    color_map_inverse_ = color_map_.completeOrthogonalDecomposition().pseudoInverse();

    const int side = descriptor_.latent_side;
    const int half = side / 2;
    pool_ = Matrix::Zero(half * half, side * side);
    upsample_ = Matrix::Zero(side * side, half * half);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const int fine = y * side + x;
            const int coarse = (y / 2) * half + (x / 2);
            pool_(coarse, fine) = 0.25;
            upsample_(fine, coarse) = 1.0;
        }
    }
}

ParameterSet ToyBackend::make_encoder_parameters(std::uint64_t seed) const {
    const int H = descriptor_.H;
    const int F = options_.mlp_width;
    std::mt19937_64 rng(seed);
    ParameterSet p;
    p.add("tok_emb", gaussian(rng, descriptor_.vocab_size, H, 1.0));
    p.add("pos_emb", gaussian(rng, descriptor_.L, H, 0.5));
    for (int b = 0; b < kEncoderBlocks; ++b) {
        const std::string n = "b" + std::to_string(b) + ".";
        p.add(n + "ln1_g", Matrix::Ones(1, H) + gaussian(rng, 1, H, 0.05));
        p.add(n + "ln1_b", gaussian(rng, 1, H, 0.05));
        p.add(n + "wq", gaussian(rng, H, H, 1.0 / std::sqrt(H)));
        p.add(n + "wk", gaussian(rng, H, H, 1.0 / std::sqrt(H)));
        p.add(n + "wv", gaussian(rng, H, H, 1.0 / std::sqrt(H)));
        p.add(n + "wo", gaussian(rng, H, H, 1.0 / std::sqrt(H)));
        p.add(n + "ln2_g", Matrix::Ones(1, H) + gaussian(rng, 1, H, 0.05));
        p.add(n + "ln2_b", gaussian(rng, 1, H, 0.05));
        p.add(n + "w1", gaussian(rng, H, F, 1.0 / std::sqrt(H)));
        p.add(n + "b1", gaussian(rng, 1, F, 0.05));
        p.add(n + "w2", gaussian(rng, F, H, 1.0 / std::sqrt(F)));
        p.add(n + "b2", gaussian(rng, 1, H, 0.05));
    }
    p.add("lnf_g", Matrix::Ones(1, H) + gaussian(rng, 1, H, 0.05));
    p.add("lnf_b", gaussian(rng, 1, H, 0.05));
    return p;
}

EncoderState ToyBackend::random_encoder(std::uint64_t seed, EncoderKind kind) const {
    EncoderState s;
    s.kind = kind;
    s.descriptor = descriptor_;
    s.parameters = std::make_shared<const ParameterSet>(make_encoder_parameters(seed));
    return s;
}

ad::Var ToyBackend::encode_tokens_graph(const EncoderBinding& enc, std::span<const int> tokens) const {
    if (static_cast<int>(tokens.size()) != descriptor_.L) {
        fail(ErrorCode::ShapeMismatch, "token sequence has length " + std::to_string(tokens.size()) + ", expected " +
                                           std::to_string(descriptor_.L));
    }
    for (int id : tokens) {
        if (id < 0 || id >= descriptor_.vocab_size) fail(ErrorCode::ShapeMismatch, "token id outside vocabulary");
    }
    const auto& src = *enc.source;
    auto var = [&](std::string_view name) -> const ad::Var& {
        const int i = src.index_of(name);
        if (i < 0) fail(ErrorCode::ShapeMismatch, "encoder is missing parameter " + std::string(name));
        return enc.vars[static_cast<size_t>(i)];
    };
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(descriptor_.H));

    const auto& table = var("tok_emb");
    ad::Var x = table->requires_grad ? ad::gather_rows(table, tokens) : ad::gather_rows_const(table->value, tokens);
    x = ad::add(x, var("pos_emb"));
    for (int b = 0; b < kEncoderBlocks; ++b) {
        const std::string n = "b" + std::to_string(b) + ".";
        auto h = ad::layer_norm_rows(x, var(n + "ln1_g"), var(n + "ln1_b"));
        auto q = ad::matmul(h, var(n + "wq"));
        auto k = ad::matmul(h, var(n + "wk"));
        auto v = ad::matmul(h, var(n + "wv"));
        auto scores = ad::causal_mask(ad::scale(ad::matmul_nt(q, k), inv_sqrt_h));
        auto attn = ad::softmax_rows(scores);
        x = ad::add(x, ad::matmul(ad::matmul(attn, v), var(n + "wo")));
        auto h2 = ad::layer_norm_rows(x, var(n + "ln2_g"), var(n + "ln2_b"));
        auto m = ad::tanh(ad::add_row(ad::matmul(h2, var(n + "w1")), var(n + "b1")));
        x = ad::add(x, ad::add_row(ad::matmul(m, var(n + "w2")), var(n + "b2")));
    }
    return ad::layer_norm_rows(x, var("lnf_g"), var("lnf_b"));
}

Matrix ToyBackend::encode_tokens(const EncoderState& state, std::span<const int> tokens) const {
    if (!(state.descriptor == descriptor_)) fail(ErrorCode::DescriptorMismatch, "encoder belongs to another backend");
    if (!state.parameters) fail(ErrorCode::ShapeMismatch, "encoder has no parameters");
    const auto binding = bind_parameters(*state.parameters, false);
    return encode_tokens_graph(binding, tokens)->value;
}

void ToyBackend::check_latent(const Matrix& latent) const {
    const int cells = descriptor_.latent_side * descriptor_.latent_side;
    if (latent.rows() != cells || latent.cols() != descriptor_.latent_channels) {
        fail(ErrorCode::ShapeMismatch, "latent must be " + std::to_string(cells) + "x" +
                                           std::to_string(descriptor_.latent_channels));
    }
}

PredictionGraph ToyBackend::predict_noise_graph(const Matrix& latent, const ad::Var& embeddings, int t,
                                                const AttentionEditor* editor) const {
    check_latent(latent);
    if (embeddings->value.rows() != descriptor_.L || embeddings->value.cols() != descriptor_.H) {
        fail(ErrorCode::ShapeMismatch, "embeddings must be L x H");
    }
    if (t < 0 || t >= schedule_.train_timesteps) fail(ErrorCode::InvalidConfig, "timestep out of range");

    auto var = [&](std::string_view name) -> const ad::Var& {
        return denoiser_vars_[static_cast<size_t>(denoiser_.index_of(name))];
    };
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(kDenoiserWidth));
    PredictionGraph out;

    auto cross = [&](const ad::Var& h, int layer) {
        const std::string n = "x" + std::to_string(layer) + ".";
        auto hn = ad::layer_norm_rows(h, var(n + "ln_g"), var(n + "ln_b"));
        auto q = ad::matmul(hn, var(n + "wq"));
        auto k = ad::matmul(embeddings, var(n + "wk"));
        auto v = ad::matmul(embeddings, var(n + "wv"));
        auto scores = ad::scale(ad::matmul_nt(q, k), inv_sqrt_d);
        const AttentionSite site{layer, descriptor_.attention_sides[static_cast<size_t>(layer)]};
        if (editor && *editor) {
            Matrix edited = scores->value;
            (*editor)(site, edited);
            const bool unchanged = edited.size() == scores->value.size() &&
                                   std::memcmp(edited.data(), scores->value.data(),
                                               sizeof(double) * static_cast<size_t>(edited.size())) == 0;
            if (!unchanged) scores = ad::override_value(scores, std::move(edited));
        }
        auto attn = ad::softmax_rows(scores);
        out.cross_attention_maps.push_back({site, attn->value});
        auto mixed = ad::matmul(ad::matmul(attn, v), var(n + "wo"));
        auto h1 = ad::add(h, mixed);
        auto hm = ad::layer_norm_rows(h1, var(n + "mln_g"), var(n + "mln_b"));
        auto mlp = ad::matmul(ad::tanh(ad::matmul(hm, var(n + "w1"))), var(n + "w2"));
        return ad::add(h1, mlp);
    };

    auto x = ad::constant(latent);
    const Matrix temb = sinusoidal_embedding(t, kDenoiserWidth) * denoiser_.get("time.w");
    auto h = ad::add_row(ad::matmul(x, var("in.w")), var("in.b"));
    h = ad::add_row(h, ad::constant(temb));
    h = cross(h, 0);
    auto coarse = ad::matmul(ad::constant(pool_), h);
    auto coarse_out = cross(coarse, 1);
    h = ad::add(h, ad::matmul(ad::constant(upsample_), ad::sub(coarse_out, coarse)));
    auto eps = ad::add(ad::matmul(h, var("out.w")), ad::scale(x, denoiser_.get("out.skip")(0, 0)));
    out.predicted_noise = eps;
    return out;
}

NoisePrediction ToyBackend::predict_noise(const Matrix& latent, const Matrix& embeddings, int t,
                                          const AttentionEditor* editor) const {
    auto g = predict_noise_graph(latent, ad::constant(embeddings), t, editor);
    return {g.predicted_noise->value, std::move(g.cross_attention_maps)};
}

Image ToyBackend::decode_latent(const Matrix& latent) const {
    const int C = descriptor_.latent_channels;
    const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(latent.rows()))));
    if (latent.cols() != C || side * side != latent.rows() || side == 0) {
        fail(ErrorCode::ShapeMismatch, "latent must be a square grid with " + std::to_string(C) + " channels");
    }
    const int s = descriptor_.image_scale;
    Image img(side * s, side * s, 3);
    const Matrix rgb = latent * color_map_;
    for (int cy = 0; cy < side; ++cy) {
        for (int cx = 0; cx < side; ++cx) {
            std::uint8_t px[3];
            for (int c = 0; c < 3; ++c) {
                const double v = 127.5 * (1.0 + std::tanh(rgb(cy * side + cx, c)));
                px[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
            for (int y = cy * s; y < (cy + 1) * s; ++y)
                for (int x = cx * s; x < (cx + 1) * s; ++x)
                    for (int c = 0; c < 3; ++c) img.at(x, y, c) = px[c];
        }
    }
    return img;
}

Matrix ToyBackend::encode_image(const Image& image) const {
    const int s = descriptor_.image_scale;
    if (image.width != image.height || image.width % s != 0 || image.width == 0) {
        fail(ErrorCode::ShapeMismatch, "image must be square with a side divisible by " + std::to_string(s));
    }
    const Image rgb = flatten_alpha(image);
    const int side = image.width / s;
    Matrix means(side * side, 3);
    for (int cy = 0; cy < side; ++cy) {
        for (int cx = 0; cx < side; ++cx) {
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int y = cy * s; y < (cy + 1) * s; ++y)
                    for (int x = cx * s; x < (cx + 1) * s; ++x) acc += rgb.at(x, y, c);
                const double v = std::clamp(acc / (s * s) / 127.5 - 1.0, -0.999, 0.999);
                means(cy * side + cx, c) = std::atanh(v);
            }
        }
    }
    return means * color_map_inverse_;
}

// ---------------------------------------------------------------------------
// Sampler

Matrix initial_latent(const BackendDescriptor& d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return gaussian(rng, d.latent_side * d.latent_side, d.latent_channels, 1.0);
}

Matrix ddim_sample(const Backend& backend, const Matrix& cond, const Matrix& uncond, const SamplerOptions& options,
                   const StepEditorFactory& editor_for_step, const StepObserver& observer) {
    const auto& schedule = backend.schedule();
    const auto timesteps = schedule.ddim_timesteps(options.steps);
    const int ratio = schedule.train_timesteps / options.steps;
    Matrix x = initial_latent(backend.descriptor(), options.seed);
    for (int i = 0; i < options.steps; ++i) {
        const int t = timesteps[static_cast<size_t>(i)];
        const SamplerStep step{i, t};
        const AttentionEditor* editor = editor_for_step ? editor_for_step(step) : nullptr;
        const auto uncond_pred = backend.predict_noise(x, uncond, t);
        auto cond_pred = backend.predict_noise(x, cond, t, editor);
        if (observer) observer(step, cond_pred);
        const Matrix eps =
            uncond_pred.predicted_noise + options.guidance_scale * (cond_pred.predicted_noise - uncond_pred.predicted_noise);
        const double a = schedule.alphas_cumprod[static_cast<size_t>(t)];
        const int prev = t - ratio;
        const double a_prev = prev >= 0 ? schedule.alphas_cumprod[static_cast<size_t>(prev)] : schedule.alphas_cumprod[0];
        const Matrix x0 = (x - std::sqrt(1.0 - a) * eps) / std::sqrt(a);
        x = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps;
    }
    return x;
}

}  // namespace storyplug
