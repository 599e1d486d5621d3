#include "storyplug/finetune.hpp"

#include "storyplug/error.hpp"
#include "storyplug/parallel.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace storyplug {

namespace fs = std::filesystem;

void FineTuneConfig::validate() const {
    if (steps < 1) fail(ErrorCode::InvalidConfig, "steps must be >= 1");
    if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch_size must be >= 1");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail(ErrorCode::InvalidConfig, "lambda must be finite and >= 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        fail(ErrorCode::InvalidConfig, "learning_rate must be finite and > 0");
    }
}

nlohmann::json FineTuneConfig::to_json() const {
    return {{"lambda", lambda},         {"learning_rate", learning_rate}, {"steps", steps},
            {"batch_size", batch_size}, {"seed", seed},                   {"regularize_pads", regularize_pads}};
}

FineTuneConfig FineTuneConfig::from_json(const nlohmann::json& j) {
    FineTuneConfig c;
    try {
        c.lambda = j.value("lambda", c.lambda);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.steps = j.value("steps", c.steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.regularize_pads = j.value("regularize_pads", c.regularize_pads);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidConfig, std::string("fine-tune config: ") + e.what());
    }
    return c;
}

FineTuneConfig toy_finetune_config(std::uint64_t seed, int steps) {
    FineTuneConfig c;
    c.learning_rate = 5e-3;
    c.steps = steps;
    c.seed = seed;
    return c;
}

double total_loss(double l_sub, double l_reg, double lambda) { return l_sub + lambda * l_reg; }

ConditioningText conditioning_text(const BackendDescriptor& d, std::string_view class_noun, bool include_pads) {
    class_noun_token(d, class_noun, ErrorCode::UnknownClassNoun);
    ConditioningText c;
    const auto tok = tokenize(d, class_noun);
    c.ids = tok.ids;
    c.character_position = 1;
    for (int l = 0; l < d.L; ++l) {
        if (l == c.character_position) continue;
        if (!include_pads && c.ids[static_cast<size_t>(l)] == d.token_ids.pad) continue;
        c.nct_positions.push_back(l);
    }
    return c;
}

Matrix forward_noise(const NoiseSchedule& schedule, const Matrix& latent, int t, const Matrix& noise) {
    if (t < 0 || t >= schedule.train_timesteps) fail(ErrorCode::InvalidConfig, "timestep out of range");
    if (latent.rows() != noise.rows() || latent.cols() != noise.cols()) {
        fail(ErrorCode::ShapeMismatch, "noise and latent shapes differ");
    }
    const double ab = schedule.alphas_cumprod[static_cast<size_t>(t)];
    return std::sqrt(ab) * latent + std::sqrt(1.0 - ab) * noise;
}

namespace {

struct LossGraph {
    ad::Var l_sub;
    ad::Var l_reg;
    ad::Var l_total;
};

LossGraph build_loss_graph(const Backend& backend, const EncoderBinding& binding, const Matrix& frozen_encoding,
                           const ConditioningText& text, std::span<const Matrix> latents,
                           std::span<const TrainingSample> samples, double lambda) {
    if (samples.empty()) fail(ErrorCode::InvalidConfig, "no training samples");
    const auto emb = backend.encode_tokens_graph(binding, text.ids);
    ad::Var l_sub;
    for (const auto& s : samples) {
        if (s.item < 0 || static_cast<size_t>(s.item) >= latents.size()) {
            fail(ErrorCode::ShapeMismatch, "sample refers to a missing dataset item");
        }
        const Matrix xt = forward_noise(backend.schedule(), latents[static_cast<size_t>(s.item)], s.t, s.noise);
        auto mse = ad::mean_squared_error(backend.predict_noise_graph(xt, emb, s.t).predicted_noise, s.noise);
        l_sub = l_sub ? ad::add(l_sub, mse) : mse;
    }
    if (samples.size() > 1) l_sub = ad::scale(l_sub, 1.0 / static_cast<double>(samples.size()));

    Matrix target(static_cast<Eigen::Index>(text.nct_positions.size()), frozen_encoding.cols());
    for (size_t i = 0; i < text.nct_positions.size(); ++i) {
        target.row(static_cast<Eigen::Index>(i)) = frozen_encoding.row(text.nct_positions[i]);
    }
    auto l_reg = ad::sum_squares(ad::sub(ad::select_rows(emb, text.nct_positions), ad::constant(target)));
    return {l_sub, l_reg, ad::add(l_sub, ad::scale(l_reg, lambda))};
}

void check_pair(const EncoderState& a, const EncoderState& b) {
    if (!(a.descriptor == b.descriptor)) fail(ErrorCode::DescriptorMismatch, "encoders have different descriptors");
}

LossBreakdown breakdown(const LossGraph& g) {
    return {ad::scalar(g.l_sub), ad::scalar(g.l_reg), ad::scalar(g.l_total)};
}

}  // namespace

double subject_loss(const Backend& backend, const EncoderState& encoder, const Matrix& image_latent,
                    std::string_view class_noun, int t, const Matrix& noise) {
    const auto text = conditioning_text(backend.descriptor(), class_noun);
    const Matrix emb = backend.encode_tokens(encoder, text.ids);
    const Matrix xt = forward_noise(backend.schedule(), image_latent, t, noise);
    const auto g = backend.predict_noise_graph(xt, ad::constant(emb), t);
    return ad::scalar(ad::mean_squared_error(g.predicted_noise, noise));
}

double regularization_loss(const Backend& backend, const EncoderState& finetuned, const EncoderState& frozen,
                           std::string_view class_noun, bool include_pads) {
    check_pair(finetuned, frozen);
    const auto text = conditioning_text(finetuned.descriptor, class_noun, include_pads);
    const Matrix a = backend.encode_tokens(finetuned, text.ids);
    const Matrix b = backend.encode_tokens(frozen, text.ids);
    double sum = 0.0;
    for (int l : text.nct_positions) sum += (a.row(l) - b.row(l)).squaredNorm();
    return sum;
}

std::vector<TrainingSample> draw_step_samples(const Backend& backend, size_t dataset_size, std::uint64_t seed,
                                              int step, int batch_size) {
    if (dataset_size == 0) fail(ErrorCode::InvalidConfig, "empty training set");
    const auto& d = backend.descriptor();
    const int cells = d.latent_side * d.latent_side;
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(step), 0x7e57));
    std::uniform_int_distribution<int> pick(0, static_cast<int>(dataset_size) - 1);
    std::uniform_int_distribution<int> time(0, backend.schedule().train_timesteps - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<TrainingSample> out(static_cast<size_t>(batch_size));
    for (auto& s : out) {
        s.item = pick(rng);
        s.t = time(rng);
        s.noise.resize(cells, d.latent_channels);
        for (Eigen::Index i = 0; i < s.noise.size(); ++i) s.noise.data()[i] = normal(rng);
    }
    return out;
}

std::vector<Matrix> trainable_mask(const ParameterSet& params, int class_token) {
    std::vector<Matrix> mask;
    mask.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (p.name == "tok_emb") {
            Matrix m = Matrix::Zero(p.value.rows(), p.value.cols());
            m.row(class_token).setOnes();
            mask.push_back(std::move(m));
        } else {
            mask.push_back(Matrix::Ones(p.value.rows(), p.value.cols()));
        }
    }
    return mask;
}

LossAndGradient loss_and_gradient(const Backend& backend, const ParameterSet& params, const EncoderState& frozen,
                                  std::span<const Matrix> latents, std::span<const TrainingSample> samples,
                                  std::string_view class_noun, double lambda, bool include_pads) {
    const auto& d = backend.descriptor();
    const auto text = conditioning_text(d, class_noun, include_pads);
    const Matrix frozen_encoding = backend.encode_tokens(frozen, text.ids);
    const auto binding = bind_parameters(params, true);
    const auto g = build_loss_graph(backend, binding, frozen_encoding, text, latents, samples, lambda);
    ad::backward(g.l_total);

    LossAndGradient out;
    out.loss = breakdown(g);
    const auto mask = trainable_mask(params, text.ids[static_cast<size_t>(text.character_position)]);
    out.gradient.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& v = binding.vars[i];
        if (v->grad.size() == 0) {
            out.gradient.push_back(Matrix::Zero(v->value.rows(), v->value.cols()));
        } else {
            out.gradient.push_back(v->grad.cwiseProduct(mask[i]));
        }
    }
    return out;
}

LossBreakdown evaluate_loss(const Backend& backend, const EncoderState& encoder, const EncoderState& frozen,
                            std::span<const Matrix> latents, std::span<const TrainingSample> samples,
                            std::string_view class_noun, double lambda, bool include_pads) {
    check_pair(encoder, frozen);
    const auto text = conditioning_text(encoder.descriptor, class_noun, include_pads);
    const Matrix frozen_encoding = backend.encode_tokens(frozen, text.ids);
    const auto binding = bind_parameters(*encoder.parameters, false);
    return breakdown(build_loss_graph(backend, binding, frozen_encoding, text, latents, samples, lambda));
}

std::vector<Matrix> encode_dataset(const Backend& backend, const TrainingDataset& dataset) {
    const int side = backend.descriptor().image_side();
    std::vector<Matrix> out;
    out.reserve(dataset.items.size());
    for (const auto& it : dataset.items) {
        Image img = flatten_alpha(it.image);
        if (img.width != side || img.height != side) img = resize_nearest(img, side, side);
        out.push_back(backend.encode_image(img));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CGCK", u32 version, u32 json length, json, then per parameter
// u32 name length, name, u32 rows, u32 cols, f64 row-major values.

namespace {

constexpr char kCkptMagic[4] = {'C', 'G', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::ostream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& in) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) fail(ErrorCode::DimMismatch, "checkpoint is truncated");
    return v;
}

}  // namespace

void save_checkpoint(const TrainingCheckpoint& ckpt, const fs::path& path) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& h : ckpt.history) history.push_back({h.l_sub, h.l_reg, h.l_total});
    const nlohmann::json meta = {{"config", ckpt.config.to_json()},
                                 {"class_noun", ckpt.class_noun},
                                 {"descriptor_id", ckpt.descriptor_id},
                                 {"step", ckpt.step},
                                 {"history", history}};
    const std::string meta_text = meta.dump();

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream o(tmp, std::ios::binary);
        if (!o) fail(ErrorCode::IoError, "cannot write " + tmp.string());
        o.write(kCkptMagic, 4);
        put_u32(o, kCkptVersion);
        put_u32(o, static_cast<std::uint32_t>(meta_text.size()));
        o.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
        put_u32(o, static_cast<std::uint32_t>(ckpt.parameters.size()));
        for (size_t i = 0; i < ckpt.parameters.size(); ++i) {
            const auto& p = ckpt.parameters[i];
            put_u32(o, static_cast<std::uint32_t>(p.name.size()));
            o.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            put_u32(o, static_cast<std::uint32_t>(p.value.rows()));
            put_u32(o, static_cast<std::uint32_t>(p.value.cols()));
            const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = p.value;
            o.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * 8));
        }
        if (!o) fail(ErrorCode::IoError, "failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

TrainingCheckpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot read " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kCkptMagic, 4) != 0) {
        fail(ErrorCode::BadMagic, path.string() + " is not a training checkpoint");
    }
    if (const auto v = get_u32(in); v != kCkptVersion) {
        fail(ErrorCode::VersionUnsupported, "checkpoint version " + std::to_string(v));
    }
    std::string meta_text(get_u32(in), '\0');
    if (!in.read(meta_text.data(), static_cast<std::streamsize>(meta_text.size()))) {
        fail(ErrorCode::DimMismatch, "checkpoint is truncated");
    }
    TrainingCheckpoint ckpt;
    try {
        const auto meta = nlohmann::json::parse(meta_text);
        ckpt.config = FineTuneConfig::from_json(meta.at("config"));
        ckpt.class_noun = meta.at("class_noun").get<std::string>();
        ckpt.descriptor_id = meta.at("descriptor_id").get<std::string>();
        ckpt.step = meta.at("step").get<int>();
        for (const auto& h : meta.at("history")) ckpt.history.push_back({h.at(0), h.at(1), h.at(2)});
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::SchemaViolation, std::string("checkpoint metadata: ") + e.what());
    }
    const auto count = get_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(get_u32(in), '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) {
            fail(ErrorCode::DimMismatch, "checkpoint is truncated");
        }
        const auto rows = get_u32(in);
        const auto cols = get_u32(in);
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
        if (!in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * 8))) {
            fail(ErrorCode::DimMismatch, "checkpoint is truncated");
        }
        if (!rm.allFinite()) fail(ErrorCode::NonFiniteEntry, "checkpoint parameter " + name + " is not finite");
        ckpt.parameters.add(std::move(name), Matrix(rm));
    }
    return ckpt;
}

EncoderState checkpoint_encoder(const TrainingCheckpoint& ckpt, const BackendDescriptor& descriptor) {
    if (ckpt.descriptor_id != descriptor.backend_id) {
        fail(ErrorCode::DescriptorMismatch,
             "checkpoint is for " + ckpt.descriptor_id + ", backend is " + descriptor.backend_id);
    }
    EncoderState s;
    s.kind = EncoderKind::finetuned;
    s.descriptor = descriptor;
    s.parameters = std::make_shared<const ParameterSet>(ckpt.parameters);
    return s;
}

void write_loss_csv(const std::vector<LossBreakdown>& history, const fs::path& path) {
    std::ofstream o(path);
    if (!o) fail(ErrorCode::IoError, "cannot write " + path.string());
    o.precision(17);
    o << "step,l_sub,l_reg,l_total\n";
    for (size_t i = 0; i < history.size(); ++i) {
        o << i << ',' << history[i].l_sub << ',' << history[i].l_reg << ',' << history[i].l_total << '\n';
    }
}

TrainResult train_text_encoder(const TrainingDataset& dataset, const FineTuneConfig& config, const Backend& backend,
                               const TrainOptions& options) {
    config.validate();
    const auto& d = backend.descriptor();
    const auto& frozen = backend.frozen_encoder();
    if (dataset.items.empty()) fail(ErrorCode::InvalidConfig, "training set is empty");
    const auto text = conditioning_text(d, dataset.label, config.regularize_pads);
    const Matrix frozen_encoding = backend.encode_tokens(frozen, text.ids);
    const auto latents = encode_dataset(backend, dataset);

    TrainingCheckpoint ckpt;
    if (options.resume) {
        ckpt = *options.resume;
        if (ckpt.class_noun != dataset.label) {
            fail(ErrorCode::InvalidConfig, "checkpoint was trained on '" + ckpt.class_noun + "'");
        }
        if (ckpt.descriptor_id != d.backend_id) fail(ErrorCode::DescriptorMismatch, "checkpoint is for another backend");
    } else {
        ckpt.parameters = *frozen.parameters;
        ckpt.class_noun = dataset.label;
        ckpt.descriptor_id = d.backend_id;
    }
    ckpt.config = config;
    const auto mask = trainable_mask(ckpt.parameters, text.ids[static_cast<size_t>(text.character_position)]);

    for (int step = ckpt.step; step < config.steps; ++step) {
        const auto samples = draw_step_samples(backend, latents.size(), config.seed, step, config.batch_size);
        const auto binding = bind_parameters(ckpt.parameters, true);
        const auto g = build_loss_graph(backend, binding, frozen_encoding, text, latents, samples, config.lambda);
        const auto loss = breakdown(g);
        if (!std::isfinite(loss.l_total) || !std::isfinite(loss.l_sub) || !std::isfinite(loss.l_reg)) {
            if (!options.checkpoint_path.empty()) save_checkpoint(ckpt, options.checkpoint_path);
            fail(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(step));
        }
        ad::backward(g.l_total);
        for (size_t i = 0; i < ckpt.parameters.size(); ++i) {
            const auto& grad = binding.vars[i]->grad;
            if (grad.size() == 0) continue;
            ckpt.parameters[i].value -= config.learning_rate * grad.cwiseProduct(mask[i]);
        }
        ckpt.history.push_back(loss);
        ckpt.step = step + 1;
        if (options.on_step) options.on_step(step, loss);
        if (!options.checkpoint_path.empty() && options.checkpoint_every > 0 && ckpt.step % options.checkpoint_every == 0) {
            save_checkpoint(ckpt, options.checkpoint_path);
        }
    }
    if (!options.checkpoint_path.empty()) save_checkpoint(ckpt, options.checkpoint_path);

    TrainResult out;
    out.encoder = checkpoint_encoder(ckpt, d);
    out.checkpoint = std::move(ckpt);
    return out;
}

}  // namespace storyplug
