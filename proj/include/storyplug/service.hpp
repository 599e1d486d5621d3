#pragma once

// HTTP front end: plugin store, background jobs (augment, train, extract,
// frame, story) and stories, persisted under one data directory:
//
//   <data_dir>/blobs/<sha256>        content-addressed payloads
//   <data_dir>/datasets/<job id>/    augmentation outputs
//   <data_dir>/stories/<id>/         rendered stories
//   <data_dir>/index.json            plugins, stories and jobs
//
// Jobs run on a fixed pool of workers, each owning its own backend session.

#include "storyplug/backend.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <string>

namespace storyplug {

enum class JobKind { augment, train, extract, frame, story };
enum class JobState { queued, running, done, failed };

std::string job_kind_name(JobKind kind);
std::string job_state_name(JobState state);

struct Job {
    std::string id;
    JobKind kind = JobKind::frame;
    JobState state = JobState::queued;
    double progress = 0.0;
    std::string result_ref;
    std::string error_detail;
    nlohmann::json request;    // as submitted, with plugin names resolved to digests
    std::string request_hash;  // frame jobs
    nlohmann::json result;     // kind-specific details of a finished job

    // Only queued -> running -> {done, failed}; throws InvalidConfig otherwise.
    void transition(JobState next);
    // Never decreases.
    void advance(double p);
    nlohmann::json to_json() const;
};

struct ServiceOptions {
    std::filesystem::path data_dir;
    int workers = 1;
    // Defaults to a ToyBackend per worker.
    std::function<std::unique_ptr<Backend>()> backend_factory;
};

class Service {
public:
    explicit Service(ServiceOptions options);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds (port 0 = any free port), serves on a background thread and
    // returns the bound port.
    int start(const std::string& host, int port);
    // Blocks until stop().
    void wait();
    void stop();

    // Blocks until the job leaves queued/running; returns its final JSON.
    nlohmann::json wait_for_job(const std::string& id) const;
    // Recomputes a frame job's request hash from its stored request.
    bool verify_request_hash(const std::string& id) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace storyplug
