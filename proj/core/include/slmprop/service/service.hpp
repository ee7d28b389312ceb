#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slmprop/engine/engine.hpp"
#include "slmprop/io/volume.hpp"

namespace slmprop::service {

struct ServiceConfig {
    size_t max_upload_bytes = 64u << 20;
    std::string cors_origin = "*";
    // Called while a propagation holds the session, before the engine runs.
    std::function<void(const std::string& session_id)> on_propagate_start;
};

struct Request {
    std::string method;
    std::string path;
    std::map<std::string, std::string> query;
    std::string body;
    std::string content_type;
};

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;

    nlohmann::json json() const { return nlohmann::json::parse(body); }
};

struct Correction {
    uint8_t object_id = 1;
    int64_t slice = 0;
    int64_t elapsed_ms = 0;
    int64_t timestamp_ms = 0;
    io::Label2D before;
    io::Label2D after;
};

struct EffortTally {
    int64_t depth = 0;
    int64_t corrections = 0;
    std::set<int64_t> corrected_slices;
    int64_t elapsed_ms = 0;

    double csr() const { return depth > 0 ? static_cast<double>(corrected_slices.size()) / static_cast<double>(depth) : 0.0; }
    double spv_seconds() const { return static_cast<double>(elapsed_ms) / 1000.0; }
};

struct Session {
    std::string id;
    io::Volume volume;  // as uploaded; the engine normalizes
    io::Volume display; // normalized on ingest, used for slice renders
    std::map<uint8_t, std::vector<engine::ObjectPrompt>> prompts;
    std::map<uint8_t, engine::PropagationResult> results;
    // Latest result per object with corrections applied, on the volume grid.
    std::map<uint8_t, io::MaskVolume> current;
    std::vector<Correction> log; // append-only
    EffortTally effort;

    std::mutex guard;
    std::atomic<bool> propagating{false};
};

// Transport independent: `handle` is what the HTTP server calls for every request.
class AnnotationService {
public:
    AnnotationService(engine::Model model, ServiceConfig cfg = {});

    Response handle(const Request& req);

    std::shared_ptr<Session> session(const std::string& id) const;
    size_t session_count() const;
    const ServiceConfig& config() const { return cfg_; }

private:
    Response create_session(const Request& req);
    Response get_session(Session& s);
    Response get_slice(Session& s, int64_t k, const Request& req);
    Response get_mask(Session& s, int64_t k, const Request& req);
    Response propagate(const std::shared_ptr<Session>& s, const Request& req);
    Response correct(Session& s, const Request& req);
    Response metrics(Session& s, const Request& req);

    const engine::Model model_;
    ServiceConfig cfg_;
    mutable std::mutex sessions_mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    uint64_t next_id_ = 1;
};

// Blocks until `stop` is called from another thread or the listener fails.
class HttpServer {
public:
    explicit HttpServer(AnnotationService& svc);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // Port 0 binds an ephemeral port; returns the bound port or -1.
    int bind(const std::string& host, int port);
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace slmprop::service
