#include "slmprop/service/service.hpp"

#include <charconv>
#include <chrono>
#include <filesystem>
#include <sstream>

#include <httplib.h>

#include "slmprop/error.hpp"
#include "slmprop/metrics/metrics.hpp"
#include "slmprop/service/codec.hpp"

namespace slmprop::service {

namespace {

struct HttpError {
    int status;
    std::string code;
    std::string message;
};

Response json_response(int status, const nlohmann::json& j) {
    Response r;
    r.status = status;
    r.body = j.dump();
    return r;
}

Response error_response(int status, const std::string& code, const std::string& message) {
    return json_response(status, {{"error", code}, {"message", message}});
}

[[noreturn]] void fail(int status, const std::string& code, const std::string& message) {
    throw HttpError{status, code, message};
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : path) {
        if (c == '/') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::optional<int64_t> parse_int(std::string_view s) {
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return v;
}

nlohmann::json parse_body(const Request& req) {
    try {
        nlohmann::json j = nlohmann::json::parse(req.body);
        if (!j.is_object()) fail(400, "BadRequest", "body must be a JSON object");
        return j;
    } catch (const nlohmann::json::exception& e) {
        fail(400, "BadRequest", std::string("invalid JSON: ") + e.what());
    }
}

int64_t int_field(const nlohmann::json& j, const char* key, std::optional<int64_t> fallback = std::nullopt) {
    if (!j.contains(key)) {
        if (fallback) return *fallback;
        fail(400, "BadRequest", std::string("missing field '") + key + "'");
    }
    if (!j[key].is_number_integer()) fail(400, "BadRequest", std::string("field '") + key + "' must be an integer");
    return j[key].get<int64_t>();
}

uint8_t object_field(const nlohmann::json& j) {
    const int64_t id = int_field(j, "object_id", 1);
    if (id < 1 || id > 255) fail(400, "BadRequest", "object_id must be in 1..255");
    return static_cast<uint8_t>(id);
}

io::Label2D decode_slice_mask(const nlohmann::json& j, const io::Dims& dims) {
    if (!j.contains("mask") || !j["mask"].is_string()) fail(400, "BadMask", "field 'mask' must be an RLE string");
    io::Label2D m(dims.height, dims.width);
    try {
        m.values = rle_decode(j["mask"].get<std::string>(), static_cast<size_t>(dims.slice_size()));
    } catch (const Error& e) {
        fail(400, "BadMask", e.what());
    }
    return m;
}

uint8_t to_byte(float v) {
    const float c = std::clamp(v, 0.0f, 255.0f);
    return static_cast<uint8_t>(std::lround(c));
}

nlohmann::json effort_json(const EffortTally& e) {
    return {{"depth", e.depth},
            {"corrections", e.corrections},
            {"distinct_corrected_slices", e.corrected_slices.size()},
            {"csr", e.csr()},
            {"spv_seconds", e.spv_seconds()}};
}

int64_t now_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

struct PropagationFlag {
    std::atomic<bool>& flag;
    ~PropagationFlag() { flag = false; }
};

} // namespace

AnnotationService::AnnotationService(engine::Model model, ServiceConfig cfg) : model_(std::move(model)), cfg_(std::move(cfg)) {}

std::shared_ptr<Session> AnnotationService::session(const std::string& id) const {
    std::lock_guard lk(sessions_mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

size_t AnnotationService::session_count() const {
    std::lock_guard lk(sessions_mu_);
    return sessions_.size();
}

Response AnnotationService::handle(const Request& req) {
    try {
        if (req.method == "OPTIONS") {
            Response r;
            r.status = 204;
            r.content_type.clear();
            return r;
        }
        const auto seg = split_path(req.path);
        if (seg.size() == 1 && seg[0] == "health" && req.method == "GET")
            return json_response(200, {{"status", "ok"}, {"mode", attention::to_string(model_.config.ablation.mode)}});
        if (seg.empty() || seg[0] != "sessions") fail(404, "NotFound", "no route for " + req.path);
        if (seg.size() == 1) {
            if (req.method != "POST") fail(405, "MethodNotAllowed", req.method + " " + req.path);
            return create_session(req);
        }
        auto s = session(seg[1]);
        if (!s) fail(404, "UnknownSession", "no session '" + seg[1] + "'");
        if (seg.size() == 2) {
            if (req.method == "GET") {
                std::lock_guard lk(s->guard);
                return get_session(*s);
            }
            if (req.method == "DELETE") {
                std::lock_guard lk(sessions_mu_);
                sessions_.erase(seg[1]);
                Response r;
                r.status = 204;
                r.content_type.clear();
                return r;
            }
            fail(405, "MethodNotAllowed", req.method + " " + req.path);
        }
        const std::string& what = seg[2];
        if ((what == "slices" || what == "masks") && seg.size() == 4) {
            if (req.method != "GET") fail(405, "MethodNotAllowed", req.method + " " + req.path);
            const auto k = parse_int(seg[3]);
            std::lock_guard lk(s->guard);
            if (!k || *k < 0 || *k >= s->volume.dims().depth) fail(404, "UnknownSlice", "no slice '" + seg[3] + "'");
            return what == "slices" ? get_slice(*s, *k, req) : get_mask(*s, *k, req);
        }
        if (seg.size() == 3 && what == "propagate") {
            if (req.method != "POST") fail(405, "MethodNotAllowed", req.method + " " + req.path);
            return propagate(s, req);
        }
        if (seg.size() == 3 && what == "corrections") {
            if (req.method != "POST") fail(405, "MethodNotAllowed", req.method + " " + req.path);
            std::lock_guard lk(s->guard);
            return correct(*s, req);
        }
        if (seg.size() == 3 && what == "metrics") {
            if (req.method != "GET") fail(405, "MethodNotAllowed", req.method + " " + req.path);
            std::lock_guard lk(s->guard);
            return metrics(*s, req);
        }
        fail(404, "NotFound", "no route for " + req.path);
    } catch (const HttpError& e) {
        return error_response(e.status, e.code, e.message);
    } catch (const Error& e) {
        return error_response(is_validation_error(e.code()) ? 400 : 500, std::string(to_string(e.code())), e.what());
    } catch (const nlohmann::json::exception& e) {
        return error_response(400, "BadRequest", e.what());
    } catch (const std::exception& e) {
        return error_response(500, "Internal", e.what());
    }
}

Response AnnotationService::create_session(const Request& req) {
    if (req.body.size() > cfg_.max_upload_bytes) fail(413, "PayloadTooLarge", "upload exceeds the configured limit");
    io::Volume vol;
    try {
        if (req.content_type.find("json") != std::string::npos) {
            const auto j = parse_body(req);
            if (!j.contains("path") || !j["path"].is_string()) fail(400, "BadVolume", "expected {\"path\": ...}");
            const std::filesystem::path p = j["path"].get<std::string>();
            std::error_code ec;
            const auto size = std::filesystem::file_size(p, ec);
            if (ec) fail(400, "BadVolume", "cannot read " + p.string());
            if (size > cfg_.max_upload_bytes) fail(413, "PayloadTooLarge", "volume exceeds the configured limit");
            vol = io::load_volume(p);
        } else {
            vol = io::decode_volume(req.body);
        }
    } catch (const Error& e) {
        fail(400, "BadVolume", e.what());
    }
    auto s = std::make_shared<Session>();
    s->display = io::normalize_volume(vol);
    s->volume = std::move(vol);
    s->effort.depth = s->volume.dims().depth;
    {
        std::lock_guard lk(sessions_mu_);
        s->id = "s" + std::to_string(next_id_++);
        sessions_[s->id] = s;
    }
    const auto& d = s->volume.dims();
    const auto& sp = s->volume.spacing();
    return json_response(201, {{"session_id", s->id},
                               {"dims", {d.depth, d.height, d.width}},
                               {"spacing", {sp.z, sp.y, sp.x}},
                               {"modality", io::to_string(s->volume.modality())}});
}

Response AnnotationService::get_session(Session& s) {
    const auto& d = s.volume.dims();
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& [id, r] : s.results) objects.push_back(id);
    size_t prompts = 0;
    for (const auto& [id, p] : s.prompts) prompts += p.size();
    return json_response(200, {{"session_id", s.id},
                               {"dims", {d.depth, d.height, d.width}},
                               {"objects", objects},
                               {"prompts", prompts},
                               {"effort", effort_json(s.effort)}});
}

Response AnnotationService::get_slice(Session& s, int64_t k, const Request& req) {
    const auto& d = s.display.dims();
    const io::Image2D img = s.display.slice(k);
    const bool overlay = !s.current.empty() && (!req.query.count("overlay") || req.query.at("overlay") != "0");
    Response r;
    r.content_type = "image/png";
    if (!overlay) {
        std::vector<uint8_t> px(img.values.size());
        for (size_t i = 0; i < px.size(); ++i) px[i] = to_byte(img.values[i]);
        r.body = png_encode(px, static_cast<uint32_t>(d.width), static_cast<uint32_t>(d.height), 1);
        return r;
    }
    std::vector<uint8_t> px(img.values.size() * 3);
    for (size_t i = 0; i < img.values.size(); ++i) {
        const uint8_t g = to_byte(img.values[i]);
        px[3 * i] = px[3 * i + 1] = px[3 * i + 2] = g;
    }
    for (const auto& [id, m] : s.current) {
        const io::Label2D lab = m.object_slice(k, id);
        const int ch = (id - 1) % 3;
        for (size_t i = 0; i < lab.values.size(); ++i) {
            if (!lab.values[i]) continue;
            for (int c = 0; c < 3; ++c) px[3 * i + static_cast<size_t>(c)] = c == ch ? 255 : px[3 * i + static_cast<size_t>(c)] / 2;
        }
    }
    r.body = png_encode(px, static_cast<uint32_t>(d.width), static_cast<uint32_t>(d.height), 3);
    return r;
}

Response AnnotationService::get_mask(Session& s, int64_t k, const Request& req) {
    uint8_t id = 1;
    if (req.query.count("object_id")) {
        const auto v = parse_int(req.query.at("object_id"));
        if (!v || *v < 1 || *v > 255) fail(400, "BadRequest", "object_id must be in 1..255");
        id = static_cast<uint8_t>(*v);
    }
    auto it = s.current.find(id);
    if (it == s.current.end()) fail(404, "NoResult", "no result for object " + std::to_string(id));
    const io::Label2D m = it->second.object_slice(k, id);
    int64_t area = 0;
    for (auto v : m.values) area += v;
    return json_response(200, {{"slice", k},
                               {"object_id", id},
                               {"height", m.height},
                               {"width", m.width},
                               {"area", area},
                               {"mask", rle_encode(m.values)}});
}

Response AnnotationService::propagate(const std::shared_ptr<Session>& s, const Request& req) {
    if (s->propagating.exchange(true)) fail(409, "Busy", "a propagation is already running in this session");
    PropagationFlag release{s->propagating};
    std::lock_guard lk(s->guard);
    const auto j = parse_body(req);
    const uint8_t id = object_field(j);
    const auto& d = s->volume.dims();
    const int64_t cond = int_field(j, "cond_idx");
    if (cond < 0 || cond >= d.depth) fail(400, "BadRequest", "cond_idx outside 0.." + std::to_string(d.depth - 1));
    const io::Label2D prompt = decode_slice_mask(j, d);
    const bool allow_empty = j.value("allow_empty", false);
    if (!allow_empty && std::find(prompt.values.begin(), prompt.values.end(), 1) == prompt.values.end())
        fail(400, "BadMask", "prompt mask is empty");
    if (cfg_.on_propagate_start) cfg_.on_propagate_start(s->id);

    engine::PropagationResult r = engine::propagate(model_, s->volume, prompt, cond);
    s->prompts[id].push_back({prompt, cond});
    s->current[id] = engine::to_mask_volume(r, id, d, s->volume.spacing());
    nlohmann::json out = engine::result_summary(r, d.height, d.width);
    s->results[id] = std::move(r);
    out["session_id"] = s->id;
    out["object_id"] = id;
    return json_response(200, out);
}

Response AnnotationService::correct(Session& s, const Request& req) {
    const auto j = parse_body(req);
    const uint8_t id = object_field(j);
    auto it = s.current.find(id);
    if (it == s.current.end()) fail(400, "NoResult", "propagate object " + std::to_string(id) + " before correcting");
    const auto& d = s.volume.dims();
    const int64_t k = int_field(j, "slice_idx");
    if (k < 0 || k >= d.depth) fail(400, "BadRequest", "slice_idx outside 0.." + std::to_string(d.depth - 1));
    const int64_t elapsed = int_field(j, "elapsed_ms", 0);
    if (elapsed < 0) fail(400, "BadRequest", "elapsed_ms must be >= 0");
    io::Label2D after = decode_slice_mask(j, d);

    Correction c;
    c.object_id = id;
    c.slice = k;
    c.elapsed_ms = elapsed;
    c.timestamp_ms = now_ms();
    c.before = it->second.object_slice(k, id);
    c.after = after;
    it->second.set_object_slice(k, id, after);
    s.log.push_back(std::move(c));
    s.effort.corrections += 1;
    s.effort.corrected_slices.insert(k);
    s.effort.elapsed_ms += elapsed;
    return json_response(200, effort_json(s.effort));
}

Response AnnotationService::metrics(Session& s, const Request& req) {
    if (!req.query.count("gt")) fail(400, "BadRequest", "query parameter 'gt' is required");
    io::MaskVolume gt;
    try {
        gt = io::load_mask(req.query.at("gt"));
    } catch (const Error& e) {
        fail(400, "BadGroundTruth", e.what());
    }
    if (!(gt.dims() == s.volume.dims())) fail(400, "DimMismatch", "ground truth dims differ from the session volume");
    if (s.current.empty()) fail(400, "NoResult", "no propagation result yet");
    std::vector<uint8_t> ids;
    if (req.query.count("object_id")) {
        const auto v = parse_int(req.query.at("object_id"));
        if (!v || *v < 1 || *v > 255 || !s.current.count(static_cast<uint8_t>(*v)))
            fail(400, "BadRequest", "object_id has no result");
        ids.push_back(static_cast<uint8_t>(*v));
    } else {
        for (const auto& [id, m] : s.current) ids.push_back(id);
    }
    std::vector<metrics::MetricsReport> reports;
    for (uint8_t id : ids) reports.push_back(metrics::compute_report(s.current.at(id), gt, id));
    const auto agg = metrics::aggregate(reports, 1000, 0);
    return json_response(200, metrics::to_document(reports, agg));
}

struct HttpServer::Impl {
    AnnotationService& svc;
    httplib::Server server;
    int port = -1;

    explicit Impl(AnnotationService& s) : svc(s) {
        server.set_payload_max_length(svc.config().max_upload_bytes);
        auto handler = [this](const httplib::Request& hr, httplib::Response& res) {
            Request req;
            req.method = hr.method;
            req.path = hr.path;
            for (const auto& [k, v] : hr.params) req.query.emplace(k, v);
            req.body = hr.body;
            req.content_type = hr.get_header_value("Content-Type");
            const Response r = svc.handle(req);
            res.status = r.status;
            if (!r.body.empty()) res.set_content(r.body, r.content_type);
        };
        server.Get(".*", handler);
        server.Post(".*", handler);
        server.Delete(".*", handler);
        server.Options(".*", handler);
        server.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", svc.config().cors_origin);
            res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
        });
    }
};

HttpServer::HttpServer(AnnotationService& svc) : impl_(std::make_unique<Impl>(svc)) {}
HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    impl_->port = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    return impl_->port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }
void HttpServer::stop() {
    if (impl_->server.is_running()) impl_->server.stop();
}

} // namespace slmprop::service
