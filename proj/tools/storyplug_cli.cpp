// storyplug command-line frontend.
//
// Exit codes: 0 ok, 2 usage, 3 validation, 4 runtime. Errors go to stderr as
// {"error": {"code": ..., "message": ...}}.

#include "storyplug/augmentation.hpp"
#include "storyplug/error.hpp"
#include "storyplug/evaluation.hpp"
#include "storyplug/extraction.hpp"
#include "storyplug/finetune.hpp"
#include "storyplug/inference.hpp"
#include "storyplug/plugin.hpp"
#include "storyplug/service.hpp"
#include "storyplug/story.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace storyplug;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitValidation = 3;
constexpr int kExitRuntime = 4;

void print_error(std::string_view code, std::string_view message) {
    std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << std::endl;
}

json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorCode::IoError, "cannot read " + path.string());
    try {
        return json::parse(f);
    } catch (const json::parse_error& e) {
        fail(ErrorCode::SchemaViolation, path.string() + ": " + e.what());
    }
}

// Inline JSON when the argument starts with '{', otherwise a file path.
json json_arg(const std::string& arg) {
    if (arg.find_first_not_of(" \t") != std::string::npos && arg[arg.find_first_not_of(" \t")] == '{') {
        try {
            return json::parse(arg);
        } catch (const json::parse_error& e) {
            fail(ErrorCode::SchemaViolation, std::string("inline JSON: ") + e.what());
        }
    }
    return read_json_file(arg);
}

std::vector<fs::path> png_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) fail(ErrorCode::IoError, dir.string() + " is not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) fail(ErrorCode::InvalidConfig, "no PNG images in " + dir.string());
    return out;
}

std::vector<Image> load_images(const fs::path& dir) {
    std::vector<Image> out;
    for (const auto& p : png_files(dir)) out.push_back(load_png(p));
    return out;
}

struct Args {
    // augment
    std::string chars, scenes, out;
    std::string class_noun;
    int n = 300;
    int background_count = 0;
    int background_steps = 50;
    int workers = 1;
    std::uint64_t seed = 0;
    // train
    std::string dataset, preset = "full", loss_csv, resume;
    int steps = 2000;
    int batch_size = 1;
    double lr = 0.0;
    double lambda = 0.01;
    int checkpoint_every = 0;
    // extract
    std::string ckpt, name;
    std::int64_t created_at = 0;
    // generate
    std::string prompt, layout, diagnostics, schedule_kind = "linear_decay";
    std::vector<std::string> plugins;
    int gen_steps = 100;
    double scale = 7.5;
    double active_fraction = 0.5;
    double xi_scale = 1.0;
    // render-story
    std::string script, plugins_dir;
    // eval
    std::string images, manifest, story_name;
    std::vector<std::string> refs;
    // plugin inspect
    std::string plugin_file;
    // serve
    std::string data_dir, host = "127.0.0.1";
    int port = 8080;
};

int cmd_augment(const Args& a, const Backend& backend) {
    AugmentPlan plan;
    plan.characters_dir = a.chars;
    plan.scenes = SceneDescriptionList::load(a.scenes);
    plan.n = a.n;
    plan.background_count = a.background_count;
    plan.class_noun = a.class_noun;
    plan.seed = a.seed;
    plan.backgrounds.steps = a.background_steps;
    plan.backgrounds.workers = a.workers;
    plan.build.workers = a.workers;
    auto ds = run_augmentation(plan, backend);
    write_dataset(ds, a.out);
    std::cout << json{{"out", a.out}, {"m", ds.m}, {"n", ds.n}, {"q", ds.size()}}.dump() << std::endl;
    return 0;
}

int cmd_train(const Args& a, const Backend& backend, bool lr_given) {
    auto dataset = read_dataset(a.dataset);
    dataset.label = a.class_noun;
    FineTuneConfig config = a.preset == "toy" ? toy_finetune_config(a.seed, a.steps) : FineTuneConfig{};
    config.steps = a.steps;
    config.seed = a.seed;
    config.lambda = a.lambda;
    config.batch_size = a.batch_size;
    if (lr_given) config.learning_rate = a.lr;
    TrainOptions opts;
    opts.checkpoint_path = a.out;
    opts.checkpoint_every = a.checkpoint_every;
    if (!a.resume.empty()) opts.resume = load_checkpoint(a.resume);
    const auto result = train_text_encoder(dataset, config, backend, opts);
    if (!a.loss_csv.empty()) write_loss_csv(result.checkpoint.history, a.loss_csv);
    const auto& last = result.checkpoint.history.back();
    std::cout << json{{"out", a.out},
                      {"steps", result.checkpoint.step},
                      {"final", {{"l_sub", last.l_sub}, {"l_reg", last.l_reg}, {"l_total", last.l_total}}}}
                     .dump()
              << std::endl;
    return 0;
}

int cmd_extract(const Args& a, const Backend& backend) {
    const auto ckpt = load_checkpoint(a.ckpt);
    const auto encoder = checkpoint_encoder(ckpt, backend.descriptor());
    const auto plugin = create_plugin(backend, encoder, ckpt.class_noun, a.name, a.created_at);
    save_plugin(plugin, a.out);
    std::cout << json{{"out", a.out}, {"name", plugin.name}, {"class_noun", plugin.class_noun},
                      {"rows", plugin.rows.rows()}, {"cols", plugin.rows.cols()}}
                     .dump()
              << std::endl;
    return 0;
}

int cmd_generate(const Args& a, const Backend& backend) {
    GenerationRequest r;
    r.prompt = a.prompt;
    for (const auto& p : a.plugins) r.plugins.push_back(load_plugin(p));
    if (!a.layout.empty()) r.layout = layout_from_json(json_arg(a.layout));
    if (a.schedule_kind == "linear_decay") {
        r.schedule.kind = ScheduleKind::linear_decay;
    } else {
        r.schedule.kind = ScheduleKind::constant_window;
    }
    r.schedule.active_fraction = a.active_fraction;
    r.schedule.base_scale = a.xi_scale;
    r.seed = a.seed;
    r.steps = a.gen_steps;
    r.guidance_scale = a.scale;
    const auto out = generate_frame(r, backend);
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    save_png(out.image, a.out);
    if (!a.diagnostics.empty()) {
        std::ofstream d(a.diagnostics);
        d << out.diagnostics.to_json().dump(2) << "\n";
    }
    std::cout << json{{"out", a.out}, {"request_hash", request_hash(r, backend.descriptor())}}.dump() << std::endl;
    return 0;
}

int cmd_render_story(const Args& a) {
    const auto script = load_script(a.script);
    for (const auto& w : script.warnings) print_error("Warning", w);
    const auto store = PluginStore::load_dir(a.plugins_dir);
    std::vector<std::unique_ptr<Backend>> sessions;
    std::vector<const Backend*> ptrs;
    for (int i = 0; i < std::max(1, a.workers); ++i) {
        sessions.push_back(std::make_unique<ToyBackend>());
        ptrs.push_back(sessions.back().get());
    }
    const auto result = render_story(script, store, ptrs, a.out);
    std::cout << json{{"out", a.out}, {"frames", result.frames.size()}}.dump() << std::endl;
    return 0;
}

int cmd_eval_ta(const Args& a) {
    const auto images = load_images(a.images);
    const HashEmbedder embedder;
    const double ta = text_alignment(images, a.prompt, embedder);
    std::cout << json{{"metric", "TA"}, {"images", images.size()}, {"score", ta}}.dump() << std::endl;
    return 0;
}

int cmd_eval_ia(const Args& a) {
    const auto images = load_images(a.images);
    std::vector<std::vector<Image>> refs;
    for (const auto& r : a.refs) refs.push_back(load_images(r));
    const HashEmbedder embedder;
    const double ia = image_alignment(images, refs, embedder);
    std::cout << json{{"metric", "IA"}, {"images", images.size()}, {"characters", refs.size()}, {"score", ia}}.dump()
              << std::endl;
    return 0;
}

int cmd_eval_sheet(const Args& a) {
    const auto manifest = read_json_file(a.manifest);
    const auto questions = default_questions();
    if (a.out.empty()) {
        std::cout << human_eval_sheet(manifest, questions);
    } else {
        export_human_eval_sheet(manifest, questions, a.out);
    }
    return 0;
}

int cmd_plugin_inspect(const Args& a) {
    const auto p = load_plugin(a.plugin_file);
    json norms = json::array();
    for (Eigen::Index r = 0; r < p.rows.rows(); ++r) norms.push_back(p.rows.row(r).norm());
    std::cout << json{{"dims", std::to_string(p.rows.rows()) + "x" + std::to_string(p.rows.cols())},
                      {"rows", p.rows.rows()},
                      {"cols", p.rows.cols()},
                      {"name", p.name},
                      {"class_noun", p.class_noun},
                      {"descriptor_id", p.descriptor_id},
                      {"created_at", p.created_at},
                      {"format_version", p.format_version},
                      {"digest", plugin_content_digest(p)},
                      {"row_norms", norms}}
                     .dump(2)
              << std::endl;
    return 0;
}

int cmd_serve(const Args& a) {
    ServiceOptions o;
    o.data_dir = a.data_dir;
    o.workers = a.workers;
    Service service(o);
    const int port = service.start(a.host, a.port);
    std::cout << json{{"listening", a.host + ":" + std::to_string(port)}}.dump() << std::endl;
    std::signal(SIGINT, [](int) { std::quick_exit(0); });
    std::signal(SIGTERM, [](int) { std::quick_exit(0); });
    service.wait();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"storyplug: character plugins and layout-guided story frames"};
    app.require_subcommand(1);
    Args a;

    auto* augment = app.add_subcommand("augment", "build a training set: characters pasted onto synthesized backgrounds");
    augment->add_option("--chars", a.chars, "directory of RGBA character PNGs")->required();
    augment->add_option("--scenes", a.scenes, "text file, one scene description per line")->required();
    augment->add_option("--n", a.n, "number of augmented images")->capture_default_str();
    augment->add_option("--out", a.out, "output dataset directory")->required();
    augment->add_option("--seed", a.seed)->required();
    augment->add_option("--class-noun", a.class_noun, "label stored with the dataset");
    augment->add_option("--backgrounds", a.background_count, "backgrounds to synthesize (default: one per scene)");
    augment->add_option("--background-steps", a.background_steps)->capture_default_str();
    augment->add_option("--workers", a.workers)->capture_default_str();

    bool lr_given = false;
    auto* train = app.add_subcommand("train", "fine-tune the text encoder on a dataset");
    train->add_option("--dataset", a.dataset)->required();
    train->add_option("--class-noun", a.class_noun)->required();
    train->add_option("--steps", a.steps)->capture_default_str();
    auto* lr_opt = train->add_option("--lr", a.lr, "learning rate (default: 5e-6, or 5e-3 with --preset toy)");
    train->add_option("--lambda", a.lambda)->capture_default_str();
    train->add_option("--batch-size", a.batch_size)->capture_default_str();
    train->add_option("--out", a.out, "checkpoint path")->required();
    train->add_option("--seed", a.seed)->required();
    train->add_option("--preset", a.preset)->check(CLI::IsMember({"full", "toy"}))->capture_default_str();
    train->add_option("--loss-csv", a.loss_csv);
    train->add_option("--resume", a.resume, "continue from this checkpoint");
    train->add_option("--checkpoint-every", a.checkpoint_every)->capture_default_str();

    auto* extract = app.add_subcommand("extract", "distill a character plugin from a checkpoint");
    extract->add_option("--ckpt", a.ckpt)->required();
    extract->add_option("--name", a.name)->required();
    extract->add_option("--out", a.out)->required();
    extract->add_option("--created-at", a.created_at, "unix seconds stored in the plugin")->capture_default_str();

    auto* generate = app.add_subcommand("generate", "render one frame");
    generate->add_option("--prompt", a.prompt)->required();
    generate->add_option("--plugin", a.plugins)->expected(0, -1);
    generate->add_option("--layout", a.layout, "layout file, or inline JSON {\"boxes\": {name: [x0, y0, x1, y1]}}");
    generate->add_option("--seed", a.seed)->required();
    generate->add_option("--steps", a.gen_steps)->capture_default_str();
    generate->add_option("--scale", a.scale)->capture_default_str();
    generate->add_option("--schedule", a.schedule_kind)
        ->check(CLI::IsMember({"linear_decay", "constant_window"}))
        ->capture_default_str();
    generate->add_option("--active-fraction", a.active_fraction)->capture_default_str();
    generate->add_option("--xi-scale", a.xi_scale)->capture_default_str();
    generate->add_option("--out", a.out)->required();
    generate->add_option("--diagnostics", a.diagnostics, "write attention diagnostics JSON here");

    auto* story = app.add_subcommand("render-story", "render every frame of a story script");
    story->add_option("--script", a.script)->required();
    story->add_option("--plugins", a.plugins_dir)->required();
    story->add_option("--out", a.out)->required();
    story->add_option("--workers", a.workers)->capture_default_str();

    auto* eval = app.add_subcommand("eval", "alignment metrics and human-evaluation sheets");
    eval->require_subcommand(1);
    auto* ta = eval->add_subcommand("ta", "text alignment");
    ta->add_option("--images", a.images)->required();
    ta->add_option("--prompt", a.prompt)->required();
    auto* ia = eval->add_subcommand("ia", "image alignment");
    ia->add_option("--images", a.images)->required();
    ia->add_option("--refs", a.refs, "one reference directory per character")->required()->expected(1, -1);
    auto* sheet = eval->add_subcommand("sheet", "export a scoring sheet");
    sheet->add_option("--manifest", a.manifest)->required();
    sheet->add_option("--out", a.out);

    auto* plugin = app.add_subcommand("plugin", "plugin utilities");
    plugin->require_subcommand(1);
    auto* inspect = plugin->add_subcommand("inspect", "print dims, metadata and row norms");
    inspect->add_option("file", a.plugin_file)->required();

    auto* serve = app.add_subcommand("serve", "run the HTTP service");
    serve->add_option("--data", a.data_dir)->required();
    serve->add_option("--host", a.host)->capture_default_str();
    serve->add_option("--port", a.port)->capture_default_str();
    serve->add_option("--workers", a.workers)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("Usage", e.what());
        return kExitUsage;
    }
    lr_given = lr_opt->count() > 0;

    try {
        if (*story) return cmd_render_story(a);
        if (*eval) {
            if (*ta) return cmd_eval_ta(a);
            if (*ia) return cmd_eval_ia(a);
            return cmd_eval_sheet(a);
        }
        if (*plugin) return cmd_plugin_inspect(a);
        if (*serve) return cmd_serve(a);
        const ToyBackend backend;
        if (*augment) return cmd_augment(a, backend);
        if (*train) return cmd_train(a, backend, lr_given);
        if (*extract) return cmd_extract(a, backend);
        if (*generate) return cmd_generate(a, backend);
    } catch (const Error& e) {
        print_error(error_code_name(e.code()), e.what());
        return error_class(e.code()) == ErrorClass::Validation ? kExitValidation : kExitRuntime;
    } catch (const std::exception& e) {
        print_error("Internal", e.what());
        return kExitRuntime;
    }
    return kExitUsage;
}
