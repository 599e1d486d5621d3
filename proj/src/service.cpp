#include "storyplug/service.hpp"

#include "storyplug/augmentation.hpp"
#include "storyplug/error.hpp"
#include "storyplug/extraction.hpp"
#include "storyplug/finetune.hpp"
#include "storyplug/hashing.hpp"
#include "storyplug/inference.hpp"
#include "storyplug/plugin.hpp"
#include "storyplug/story.hpp"

#include <httplib.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace storyplug {

namespace fs = std::filesystem;
using nlohmann::json;

std::string job_kind_name(JobKind kind) {
    switch (kind) {
        case JobKind::augment: return "augment";
        case JobKind::train: return "train";
        case JobKind::extract: return "extract";
        case JobKind::frame: return "frame";
        case JobKind::story: return "story";
    }
    return "?";
}

std::string job_state_name(JobState state) {
    switch (state) {
        case JobState::queued: return "queued";
        case JobState::running: return "running";
        case JobState::done: return "done";
        case JobState::failed: return "failed";
    }
    return "?";
}

namespace {

JobKind parse_kind(const std::string& s) {
    for (auto k : {JobKind::augment, JobKind::train, JobKind::extract, JobKind::frame, JobKind::story})
        if (job_kind_name(k) == s) return k;
    fail(ErrorCode::SchemaViolation, "unknown job kind '" + s + "'");
}

JobState parse_state(const std::string& s) {
    for (auto k : {JobState::queued, JobState::running, JobState::done, JobState::failed})
        if (job_state_name(k) == s) return k;
    fail(ErrorCode::SchemaViolation, "unknown job state '" + s + "'");
}

}  // namespace

void Job::transition(JobState next) {
    const bool ok = (state == JobState::queued && next == JobState::running) ||
                    (state == JobState::running && (next == JobState::done || next == JobState::failed));
    if (!ok) fail(ErrorCode::InvalidConfig, "job " + id + ": " + job_state_name(state) + " -> " + job_state_name(next));
    state = next;
    if (next == JobState::done) progress = 1.0;
}

void Job::advance(double p) { progress = std::max(progress, std::min(p, 1.0)); }

json Job::to_json() const {
    json j = {{"id", id},
              {"kind", job_kind_name(kind)},
              {"state", job_state_name(state)},
              {"progress", progress},
              {"result_ref", result_ref},
              {"error_detail", error_detail},
              {"request", request}};
    if (!request_hash.empty()) j["request_hash"] = request_hash;
    if (!result.is_null()) j["result"] = result;
    return j;
}

// ---------------------------------------------------------------------------

namespace {

struct HttpError {
    int status;
    std::string code;
    std::string message;
};

[[noreturn]] void http_fail(int status, std::string code, std::string message) {
    throw HttpError{status, std::move(code), std::move(message)};
}

int status_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingPlugin: return 404;
        case ErrorCode::IoError:
        case ErrorCode::NonFiniteLoss: return 500;
        default: return 422;
    }
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    send_json(res, status, {{"error", {{"code", code}, {"message", message}}}});
}

json plugin_metadata(const CharacterPlugin& p, const std::string& blob) {
    return {{"name", p.name},
            {"class_noun", p.class_noun},
            {"descriptor_id", p.descriptor_id},
            {"created_at", p.created_at},
            {"format_version", p.format_version},
            {"rows", p.rows.rows()},
            {"cols", p.rows.cols()},
            {"digest", plugin_content_digest(p)},
            {"blob", blob}};
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoError, "cannot read " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    static std::atomic<unsigned> counter{0};
    const fs::path tmp = path.string() + ".tmp" + std::to_string(counter++);
    {
        std::ofstream f(tmp, std::ios::binary);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) fail(ErrorCode::IoError, "cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

template <typename T>
T required(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) fail(ErrorCode::SchemaViolation, std::string("missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(ErrorCode::SchemaViolation, std::string("field '") + key + "' has the wrong type");
    }
}

}  // namespace

struct Service::Impl {
    struct PluginEntry {
        CharacterPlugin plugin;
        std::string blob;
    };
    struct StoryEntry {
        std::string script_blob;
        std::string manifest_blob;
    };

    ServiceOptions options;
    BackendDescriptor descriptor;

    mutable std::mutex mu;
    mutable std::condition_variable job_cv;
    std::condition_variable queue_cv;
    std::map<std::string, Job> jobs;
    std::deque<std::string> queue;
    int next_job = 1;
    std::map<std::string, PluginEntry> plugins;
    std::map<std::string, StoryEntry> stories;
    bool stopping = false;

    std::vector<std::thread> workers;
    httplib::Server server;
    std::thread server_thread;

    explicit Impl(ServiceOptions o) : options(std::move(o)) {
        if (!options.backend_factory) options.backend_factory = [] { return std::make_unique<ToyBackend>(); };
        if (options.workers < 1) fail(ErrorCode::InvalidConfig, "service needs at least one worker");
        descriptor = options.backend_factory()->descriptor();
        fs::create_directories(options.data_dir / "blobs");
        load_index();
        routes();
        for (int w = 0; w < options.workers; ++w) workers.emplace_back([this] { worker_loop(); });
    }

    // ---- content-addressed store

    fs::path blob_path(const std::string& digest) const { return options.data_dir / "blobs" / digest; }

    std::string put_blob(std::span<const std::uint8_t> bytes) const {
        const auto digest = sha256_hex(bytes);
        const auto path = blob_path(digest);
        if (!fs::exists(path)) write_file_atomic(path, bytes);
        return digest;
    }

    std::vector<std::uint8_t> get_blob(const std::string& digest) const {
        if (digest.size() != 64 || digest.find_first_not_of("0123456789abcdef") != std::string::npos) {
            fail(ErrorCode::SchemaViolation, "'" + digest + "' is not a blob digest");
        }
        const auto bytes = read_file(blob_path(digest));
        if (sha256_hex(bytes) != digest) fail(ErrorCode::IoError, "blob " + digest + " is corrupted");
        return bytes;
    }

    // Caller holds mu.
    void persist() const {
        json pl = json::object();
        for (const auto& [n, e] : plugins) pl[n] = e.blob;
        json st = json::object();
        for (const auto& [id, e] : stories) st[id] = {{"script", e.script_blob}, {"manifest", e.manifest_blob}};
        json jb = json::array();
        for (const auto& [id, j] : jobs) jb.push_back(j.to_json());
        const json index = {{"version", 1}, {"next_job", next_job}, {"plugins", pl}, {"stories", st}, {"jobs", jb}};
        write_file_atomic(options.data_dir / "index.json", as_bytes(index.dump(1)));
    }

    void load_index() {
        const auto path = options.data_dir / "index.json";
        if (!fs::exists(path)) return;
        const auto bytes = read_file(path);
        json index;
        try {
            index = json::parse(bytes.begin(), bytes.end());
            next_job = index.value("next_job", 1);
            for (const auto& [name, blob] : index.at("plugins").items()) {
                plugins[name] = {deserialize(get_blob(blob.get<std::string>())), blob.get<std::string>()};
            }
            for (const auto& [id, e] : index.at("stories").items()) {
                stories[id] = {e.at("script").get<std::string>(), e.value("manifest", std::string())};
            }
            for (const auto& j : index.at("jobs")) {
                Job job;
                job.id = j.at("id").get<std::string>();
                job.kind = parse_kind(j.at("kind").get<std::string>());
                job.state = parse_state(j.at("state").get<std::string>());
                job.progress = j.value("progress", 0.0);
                job.result_ref = j.value("result_ref", std::string());
                job.error_detail = j.value("error_detail", std::string());
                job.request = j.value("request", json());
                job.request_hash = j.value("request_hash", std::string());
                job.result = j.value("result", json());
                if (job.state == JobState::queued || job.state == JobState::running) {
                    // Work in flight when the process stopped is not resumed.
                    job.state = JobState::failed;
                    job.error_detail = "interrupted by service restart";
                }
                jobs[job.id] = std::move(job);
            }
        } catch (const json::exception& e) {
            fail(ErrorCode::SchemaViolation, std::string("index.json: ") + e.what());
        }
    }

    // ---- jobs

    std::string submit(JobKind kind, json request, std::string hash = {}) {
        std::lock_guard lock(mu);
        if (stopping) http_fail(503, "ShuttingDown", "service is stopping");
        char id[32];
        std::snprintf(id, sizeof(id), "job-%06d", next_job++);
        Job job;
        job.id = id;
        job.kind = kind;
        job.request = std::move(request);
        job.request_hash = std::move(hash);
        jobs[job.id] = job;
        queue.push_back(job.id);
        persist();
        queue_cv.notify_one();
        return job.id;
    }

    Job snapshot(const std::string& id) const {
        std::lock_guard lock(mu);
        const auto it = jobs.find(id);
        if (it == jobs.end()) http_fail(404, "UnknownJob", "no job '" + id + "'");
        return it->second;
    }

    void update(const std::string& id, const std::function<void(Job&)>& fn) {
        std::lock_guard lock(mu);
        fn(jobs.at(id));
        persist();
        job_cv.notify_all();
    }

    void worker_loop() {
        const auto backend = options.backend_factory();
        for (;;) {
            std::string id;
            {
                std::unique_lock lock(mu);
                queue_cv.wait(lock, [&] { return stopping || !queue.empty(); });
                if (stopping) return;
                id = queue.front();
                queue.pop_front();
                jobs.at(id).transition(JobState::running);
                persist();
                job_cv.notify_all();
            }
            const Job job = snapshot(id);
            try {
                auto [ref, result] = run(job, *backend);
                update(id, [&](Job& j) {
                    j.result_ref = ref;
                    j.result = result;
                    j.transition(JobState::done);
                });
            } catch (const Error& e) {
                update(id, [&](Job& j) {
                    j.error_detail = std::string(error_code_name(e.code())) + ": " + e.what();
                    j.transition(JobState::failed);
                });
            } catch (const HttpError& e) {
                update(id, [&](Job& j) {
                    j.error_detail = e.code + ": " + e.message;
                    j.transition(JobState::failed);
                });
            } catch (const std::exception& e) {
                update(id, [&](Job& j) {
                    j.error_detail = std::string("internal: ") + e.what();
                    j.transition(JobState::failed);
                });
            }
        }
    }

    std::pair<std::string, json> run(const Job& job, const Backend& backend) {
        switch (job.kind) {
            case JobKind::augment: return run_augment(job, backend);
            case JobKind::train: return run_train(job, backend);
            case JobKind::extract: return run_extract(job, backend);
            case JobKind::frame: return run_frame(job, backend);
            case JobKind::story: return run_story(job, backend);
        }
        fail(ErrorCode::InvalidConfig, "unknown job kind");
    }

    // ---- augment

    AugmentPlan augment_plan(const json& r) const {
        AugmentPlan plan;
        plan.characters_dir = required<std::string>(r, "characters_dir");
        if (r.contains("scenes")) {
            for (const auto& s : required<std::vector<std::string>>(r, "scenes")) plan.scenes.scenes.push_back(s);
        } else {
            plan.scenes = SceneDescriptionList::load(required<std::string>(r, "scenes_file"));
        }
        plan.n = r.value("n", 300);
        plan.background_count = r.value("background_count", 0);
        plan.class_noun = r.value("class_noun", std::string());
        plan.seed = required<std::uint64_t>(r, "seed");
        plan.backgrounds.steps = r.value("background_steps", plan.backgrounds.steps);
        if (plan.n < 0) fail(ErrorCode::InvalidConfig, "n must be >= 0");
        if (plan.scenes.scenes.empty() && plan.n > 0) fail(ErrorCode::EmptySceneList, "scene list is empty");
        if (!plan.class_noun.empty()) class_noun_token(descriptor, plan.class_noun, ErrorCode::UnknownClassNoun);
        return plan;
    }

    std::pair<std::string, json> run_augment(const Job& job, const Backend& backend) {
        auto ds = run_augmentation(augment_plan(job.request), backend);
        const auto rel = fs::path("datasets") / job.id;
        write_dataset(ds, options.data_dir / rel);
        return {rel.string(), {{"q", ds.size()}, {"m", ds.m}, {"n", ds.n}}};
    }

    // ---- train

    fs::path resolve_dataset(const std::string& ref) const {
        std::string rel = ref;
        if (ref.rfind("job-", 0) == 0) {
            const Job j = snapshot(ref);
            if (j.kind != JobKind::augment || j.state != JobState::done) {
                fail(ErrorCode::InvalidConfig, "job " + ref + " is not a finished augment job");
            }
            rel = j.result_ref;
        }
        const fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : options.data_dir / rel;
        if (!fs::exists(p / "manifest.json")) http_fail(404, "UnknownDataset", "no dataset at '" + ref + "'");
        return p;
    }

    std::pair<std::string, json> run_train(const Job& job, const Backend& backend) {
        auto dataset = read_dataset(job.request.at("dataset_path").get<std::string>());
        if (job.request.contains("class_noun")) dataset.label = job.request.at("class_noun").get<std::string>();
        const auto config = FineTuneConfig::from_json(job.request.at("config"));
        TrainOptions opts;
        const int steps = config.steps;
        opts.on_step = [&](int step, const LossBreakdown&) {
            if ((step + 1) % 25 == 0 || step + 1 == steps) {
                update(job.id, [&](Job& j) { j.advance(static_cast<double>(step + 1) / steps); });
            }
        };
        const auto result = train_text_encoder(dataset, config, backend, opts);
        const auto tmp = options.data_dir / ("ckpt-" + job.id + ".tmp");
        save_checkpoint(result.checkpoint, tmp);
        const auto digest = put_blob(read_file(tmp));
        fs::remove(tmp);
        const auto& last = result.checkpoint.history.back();
        return {digest, {{"final_loss", {{"l_sub", last.l_sub}, {"l_reg", last.l_reg}, {"l_total", last.l_total}}},
                         {"class_noun", result.checkpoint.class_noun}}};
    }

    // ---- extract

    std::string resolve_checkpoint(const std::string& ref) const {
        if (ref.rfind("job-", 0) != 0) return ref;
        const Job j = snapshot(ref);
        if (j.kind != JobKind::train || j.state != JobState::done) {
            fail(ErrorCode::InvalidConfig, "job " + ref + " is not a finished train job");
        }
        return j.result_ref;
    }

    std::pair<std::string, json> run_extract(const Job& job, const Backend& backend) {
        const auto bytes = get_blob(job.request.at("checkpoint_blob").get<std::string>());
        const auto tmp = options.data_dir / ("extract-" + job.id + ".tmp");
        write_file_atomic(tmp, bytes);
        TrainingCheckpoint ckpt;
        try {
            ckpt = load_checkpoint(tmp);
        } catch (...) {
            fs::remove(tmp);
            throw;
        }
        fs::remove(tmp);
        const auto encoder = checkpoint_encoder(ckpt, backend.descriptor());
        const auto name = job.request.at("name").get<std::string>();
        auto plugin = create_plugin(backend, encoder, ckpt.class_noun, name, job.request.value("created_at", 0LL));
        const auto blob = put_blob(serialize(plugin));
        std::lock_guard lock(mu);
        if (plugins.count(name)) http_fail(409, "DuplicatePlugin", "plugin '" + name + "' already exists");
        const auto meta = plugin_metadata(plugin, blob);
        plugins[name] = {std::move(plugin), blob};
        persist();
        return {name, meta};
    }

    // ---- frame

    GenerationRequest frame_request_from_json(const json& r, json* resolved) const {
        GenerationRequest g;
        g.prompt = required<std::string>(r, "prompt");
        g.seed = required<std::uint64_t>(r, "seed");
        g.steps = r.value("steps", g.steps);
        g.guidance_scale = r.value("guidance_scale", g.guidance_scale);
        if (r.contains("layout")) g.layout = layout_from_json(r.at("layout"));
        if (r.contains("schedule")) g.schedule = schedule_from_json(r.at("schedule"));
        if (r.contains("edit_layers")) g.edit_layers = required<std::vector<int>>(r, "edit_layers");
        if (g.steps < 1) fail(ErrorCode::InvalidConfig, "steps must be >= 1");
        json blobs = json::object();
        if (r.contains("plugin_blobs")) {
            // Re-resolution from a stored request: use exactly the stored bytes.
            for (const auto& [name, blob] : r.at("plugin_blobs").items()) {
                g.plugins.push_back(deserialize(get_blob(blob.get<std::string>())));
                blobs[name] = blob;
            }
        } else {
            std::lock_guard lock(mu);
            for (const auto& name : r.value("plugins", std::vector<std::string>{})) {
                const auto it = plugins.find(name);
                if (it == plugins.end()) fail(ErrorCode::MissingPlugin, "no plugin named '" + name + "'");
                g.plugins.push_back(it->second.plugin);
                blobs[name] = it->second.blob;
            }
        }
        if (resolved) {
            *resolved = r;
            resolved->erase("plugins");
            (*resolved)["plugin_blobs"] = blobs;
        }
        return g;
    }

    std::pair<std::string, json> run_frame(const Job& job, const Backend& backend) {
        const auto request = frame_request_from_json(job.request, nullptr);
        if (request_hash(request, backend.descriptor()) != job.request_hash) {
            fail(ErrorCode::SchemaViolation, "stored request does not match its hash");
        }
        const auto out = generate_frame(request, backend);
        const auto png = put_blob(encode_png(out.image));
        const auto diag = put_blob(as_bytes(out.diagnostics.to_json().dump()));
        return {png, {{"image_blob", png}, {"diagnostics_blob", diag}, {"diagnostics", out.diagnostics.to_json()}}};
    }

    // ---- story

    std::pair<std::string, json> run_story(const Job& job, const Backend& backend) {
        const auto id = job.request.at("story_id").get<std::string>();
        std::string script_blob;
        PluginStore store;
        {
            std::lock_guard lock(mu);
            script_blob = stories.at(id).script_blob;
            for (const auto& [n, e] : plugins) store.add(e.plugin);
        }
        const auto bytes = get_blob(script_blob);
        const auto script = parse_script(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
        const auto rel = fs::path("stories") / id;
        const auto result = render_story(script, store, backend, options.data_dir / rel);
        const auto manifest = put_blob(as_bytes(result.manifest.dump()));
        std::lock_guard lock(mu);
        stories[id].manifest_blob = manifest;
        persist();
        return {rel.string(), {{"manifest_blob", manifest}, {"frames", result.frames.size()}}};
    }

    // ---- HTTP

    template <typename Fn>
    httplib::Server::Handler guarded(Fn fn) {
        return [fn](const httplib::Request& req, httplib::Response& res) {
            try {
                fn(req, res);
            } catch (const HttpError& e) {
                send_error(res, e.status, e.code, e.message);
            } catch (const Error& e) {
                send_error(res, status_for(e.code()), std::string(error_code_name(e.code())), e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, "Internal", e.what());
            }
        };
    }

    static json parse_body(const httplib::Request& req) {
        try {
            return json::parse(req.body);
        } catch (const json::parse_error& e) {
            http_fail(400, "MalformedJson", e.what());
        }
    }

    void routes() {
        server.Post("/plugins", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::string body;
            if (req.is_multipart_form_data()) {
                if (!req.has_file("file")) http_fail(400, "MissingFile", "multipart upload needs a 'file' part");
                body = req.get_file_value("file").content;
            } else {
                body = req.body;
            }
            CharacterPlugin plugin;
            try {
                plugin = deserialize(as_bytes(body));
            } catch (const Error& e) {
                http_fail(400, std::string(error_code_name(e.code())), e.what());
            }
            const auto problems = validate(plugin, descriptor);
            if (!problems.empty()) {
                std::string msg;
                for (const auto& p : problems) msg += (msg.empty() ? "" : "; ") + p;
                http_fail(400, "InvalidPlugin", msg);
            }
            const auto blob = put_blob(as_bytes(body));
            std::lock_guard lock(mu);
            if (plugins.count(plugin.name)) http_fail(409, "DuplicatePlugin", "plugin '" + plugin.name + "' already exists");
            const auto meta = plugin_metadata(plugin, blob);
            const std::string key = plugin.name;
            plugins[key] = {std::move(plugin), blob};
            persist();
            send_json(res, 201, meta);
        }));

        server.Get("/plugins", guarded([this](const httplib::Request&, httplib::Response& res) {
            std::lock_guard lock(mu);
            json list = json::array();
            for (const auto& [n, e] : plugins) list.push_back(plugin_metadata(e.plugin, e.blob));
            send_json(res, 200, {{"plugins", list}});
        }));

        server.Get(R"(/plugins/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string name = req.matches[1];
            std::lock_guard lock(mu);
            const auto it = plugins.find(name);
            if (it == plugins.end()) http_fail(404, "UnknownPlugin", "no plugin named '" + name + "'");
            json meta = plugin_metadata(it->second.plugin, it->second.blob);
            json norms = json::array();
            for (Eigen::Index r = 0; r < it->second.plugin.rows.rows(); ++r) norms.push_back(it->second.plugin.rows.row(r).norm());
            meta["row_norms"] = norms;
            send_json(res, 200, meta);
        }));

        server.Post("/jobs/augment", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req);
            augment_plan(body);
            send_json(res, 202, {{"job_id", submit(JobKind::augment, body)}});
        }));

        server.Post("/jobs/train", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto body = parse_body(req);
            const auto dataset = resolve_dataset(required<std::string>(body, "dataset"));
            FineTuneConfig config = body.value("preset", std::string()) == "toy" ? toy_finetune_config(0) : FineTuneConfig{};
            if (body.contains("config")) {
                const auto& c = body.at("config");
                if (!c.contains("seed")) fail(ErrorCode::InvalidConfig, "config.seed is required");
                json merged = config.to_json();
                merged.update(c);
                config = FineTuneConfig::from_json(merged);
            } else {
                fail(ErrorCode::InvalidConfig, "config (with seed) is required");
            }
            config.validate();
            body["dataset_path"] = dataset.string();
            body["config"] = config.to_json();
            send_json(res, 202, {{"job_id", submit(JobKind::train, body)}});
        }));

        server.Post("/jobs/extract", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto body = parse_body(req);
            const auto name = required<std::string>(body, "name");
            if (name.empty()) fail(ErrorCode::SchemaViolation, "name must not be empty");
            const auto blob = resolve_checkpoint(required<std::string>(body, "checkpoint"));
            if (!fs::exists(blob_path(blob))) http_fail(404, "UnknownCheckpoint", "no checkpoint '" + blob + "'");
            {
                std::lock_guard lock(mu);
                if (plugins.count(name)) http_fail(409, "DuplicatePlugin", "plugin '" + name + "' already exists");
            }
            body["checkpoint_blob"] = blob;
            send_json(res, 202, {{"job_id", submit(JobKind::extract, body)}});
        }));

        server.Post("/jobs/frame", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req);
            json resolved;
            const auto request = frame_request_from_json(body, &resolved);
            request.layout.validate();
            request.schedule.validate();
            // Surface prompt/plugin/layout mismatches now rather than as a failed job.
            const auto tokens = tokenize(descriptor, request.prompt);
            fuse_embeddings(Matrix::Zero(descriptor.L, descriptor.H), tokens.ids, request.plugins, descriptor);
            for (const auto& [name, box] : request.layout.boxes) character_positions(name, tokens, request.plugins, descriptor);
            const auto hash = request_hash(request, descriptor);
            send_json(res, 202, {{"job_id", submit(JobKind::frame, resolved, hash)}, {"request_hash", hash}});
        }));

        server.Get(R"(/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const Job job = snapshot(req.matches[1]);
            json j = job.to_json();
            if (job.kind == JobKind::frame) j["request_hash_verified"] = verify(job);
            send_json(res, 200, j);
        }));

        server.Get(R"(/jobs/([^/]+)/image)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const Job job = snapshot(req.matches[1]);
            if (job.kind != JobKind::frame) http_fail(404, "NoImage", "job " + job.id + " does not produce an image");
            if (job.state != JobState::done) http_fail(404, "NotReady", "job " + job.id + " is " + job_state_name(job.state));
            if (!verify(job)) http_fail(409, "TamperedRequest", "stored request no longer matches its hash");
            const auto png = get_blob(job.result_ref);
            res.status = 200;
            res.set_content(std::string(png.begin(), png.end()), "image/png");
        }));

        server.Post("/stories", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto script = parse_script(std::string_view(req.body));
            const auto canonical = script_to_json(script).dump();
            const auto blob = put_blob(as_bytes(canonical));
            const auto id = blob.substr(0, 16);
            std::lock_guard lock(mu);
            stories.try_emplace(id, StoryEntry{blob, {}});
            persist();
            send_json(res, 201, {{"story_id", id}, {"frames", script.frames.size()}, {"warnings", script.warnings}});
        }));

        server.Post("/jobs/story", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req);
            const auto id = required<std::string>(body, "story_id");
            PluginStore store;
            std::string script_blob;
            {
                std::lock_guard lock(mu);
                const auto it = stories.find(id);
                if (it == stories.end()) http_fail(404, "UnknownStory", "no story '" + id + "'");
                script_blob = it->second.script_blob;
                for (const auto& [n, e] : plugins) store.add(e.plugin);
            }
            const auto bytes = get_blob(script_blob);
            const auto script = parse_script(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
            for (const auto& f : script.frames) frame_request(script, f, store);
            send_json(res, 202, {{"job_id", submit(JobKind::story, {{"story_id", id}})}});
        }));

        server.Get(R"(/stories/([^/]+)/frames)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            std::string manifest;
            {
                std::lock_guard lock(mu);
                const auto it = stories.find(id);
                if (it == stories.end()) http_fail(404, "UnknownStory", "no story '" + id + "'");
                manifest = it->second.manifest_blob;
            }
            if (manifest.empty()) http_fail(404, "NotRendered", "story '" + id + "' has not been rendered");
            const auto bytes = get_blob(manifest);
            json m = json::parse(bytes.begin(), bytes.end());
            m["story_id"] = id;
            send_json(res, 200, m);
        }));
    }

    bool verify(const Job& job) const {
        if (job.kind != JobKind::frame) return false;
        try {
            return request_hash(frame_request_from_json(job.request, nullptr), descriptor) == job.request_hash;
        } catch (const std::exception&) {
            return false;
        }
    }

    void shutdown() {
        {
            std::lock_guard lock(mu);
            if (stopping) return;
            stopping = true;
        }
        queue_cv.notify_all();
        server.stop();
        if (server_thread.joinable()) server_thread.join();
        for (auto& w : workers)
            if (w.joinable()) w.join();
        // Queued jobs never ran.
        std::lock_guard lock(mu);
        for (auto& [id, j] : jobs) {
            if (j.state == JobState::queued) {
                j.state = JobState::failed;
                j.error_detail = "service stopped before the job ran";
            }
        }
        persist();
        job_cv.notify_all();
    }
};

Service::Service(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}

Service::~Service() { stop(); }

int Service::start(const std::string& host, int port) {
    auto& s = impl_->server;
    int bound = port;
    if (port == 0) {
        bound = s.bind_to_any_port(host);
    } else if (!s.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) fail(ErrorCode::IoError, "cannot bind " + host + ":" + std::to_string(port));
    impl_->server_thread = std::thread([&s] { s.listen_after_bind(); });
    s.wait_until_ready();
    return bound;
}

void Service::wait() {
    if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

void Service::stop() {
    if (impl_) impl_->shutdown();
}

json Service::wait_for_job(const std::string& id) const {
    std::unique_lock lock(impl_->mu);
    const auto it = impl_->jobs.find(id);
    if (it == impl_->jobs.end()) fail(ErrorCode::InvalidConfig, "no job '" + id + "'");
    impl_->job_cv.wait(lock, [&] {
        const auto s = impl_->jobs.at(id).state;
        return s == JobState::done || s == JobState::failed;
    });
    return impl_->jobs.at(id).to_json();
}

bool Service::verify_request_hash(const std::string& id) const {
    Job job;
    {
        std::lock_guard lock(impl_->mu);
        const auto it = impl_->jobs.find(id);
        if (it == impl_->jobs.end()) return false;
        job = it->second;
    }
    return impl_->verify(job);
}

}  // namespace storyplug
