#include <doctest.h>
#include <httplib.h>
#include <zlib.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include "slmprop/error.hpp"
#include "slmprop/nn/rng.hpp"
#include "slmprop/service/codec.hpp"
#include "slmprop/service/service.hpp"

using namespace slmprop;
using namespace slmprop::service;

namespace {

nlohmann::json load_vectors() {
    std::ifstream in(std::filesystem::path(SLMPROP_SOURCE_DIR) / "schemas" / "rle_codec_vectors.json");
    REQUIRE(in);
    return nlohmann::json::parse(in);
}

std::vector<uint8_t> bits(const std::string& s) {
    std::vector<uint8_t> out;
    for (char c : s) out.push_back(c == '1');
    return out;
}

uint32_t be32(const std::string& s, size_t at) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(s[at + static_cast<size_t>(i)]);
    return v;
}

struct Png {
    uint32_t width = 0, height = 0;
    int color = -1;
    std::vector<uint8_t> pixels;
    bool crc_ok = true;
};

// Minimal reader for the filter-0 PNGs the service writes.
Png read_png(const std::string& s) {
    Png p;
    REQUIRE(s.substr(0, 8) == std::string("\x89PNG\r\n\x1a\n", 8));
    std::string idat;
    for (size_t at = 8; at < s.size();) {
        const uint32_t len = be32(s, at);
        const std::string type = s.substr(at + 4, 4);
        const std::string body = s.substr(at + 4, 4 + len);
        const uint32_t crc = be32(s, at + 8 + len);
        p.crc_ok &= crc == crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
        const std::string data = s.substr(at + 8, len);
        if (type == "IHDR") {
            p.width = be32(data, 0);
            p.height = be32(data, 4);
            CHECK(data[8] == 8);
            p.color = data[9];
        } else if (type == "IDAT") {
            idat += data;
        }
        at += 12 + len;
    }
    const size_t ch = p.color == 2 ? 3 : 1;
    const size_t row = p.width * ch;
    std::string raw((row + 1) * p.height, '\0');
    uLongf n = static_cast<uLongf>(raw.size());
    REQUIRE(uncompress(reinterpret_cast<Bytef*>(raw.data()), &n, reinterpret_cast<const Bytef*>(idat.data()),
                       static_cast<uLong>(idat.size())) == Z_OK);
    REQUIRE(n == raw.size());
    for (uint32_t y = 0; y < p.height; ++y) {
        CHECK(raw[y * (row + 1)] == 0);
        for (size_t i = 0; i < row; ++i) p.pixels.push_back(static_cast<uint8_t>(raw[y * (row + 1) + 1 + i]));
    }
    return p;
}

engine::Model tiny_model() {
    engine::ModelConfig c = engine::desk_config(attention::AblationMode::M_O_plus_M_R1);
    c.backbone = {16, 16, 8, 8};
    c.stack = {1, 2, 8};
    c.fuser = {8, 2, 1, false};
    return engine::init_model(c, 11);
}

synth::LabeledCase make_case(int64_t depth = 20) {
    return synth::generate_case(synth::default_spec(synth::ScenarioKind::SimpleBlob, {depth, 16, 16}, 3));
}

Request post(const std::string& path, const nlohmann::json& body) {
    return {"POST", path, {}, body.dump(), "application/json"};
}

Request get(const std::string& path, std::map<std::string, std::string> q = {}) { return {"GET", path, std::move(q), "", ""}; }

std::string open_session(AnnotationService& svc, const io::Volume& v) {
    Response r = svc.handle({"POST", "/sessions", {}, io::encode_volume(v), "application/octet-stream"});
    REQUIRE(r.status == 201);
    return r.json()["session_id"].get<std::string>();
}

nlohmann::json prompt_body(const synth::LabeledCase& c, int64_t cond) {
    return {{"object_id", 1}, {"cond_idx", cond}, {"mask", rle_encode(c.mask.object_slice(cond, 1).values)}};
}

} // namespace

TEST_CASE("base64 matches RFC 4648 vectors") {
    const std::pair<const char*, const char*> v[] = {{"", ""},         {"f", "Zg=="},     {"fo", "Zm8="},
                                                     {"foo", "Zm9v"},  {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="},
                                                     {"foobar", "Zm9vYmFy"}};
    for (auto [plain, enc] : v) {
        CHECK(base64_encode(plain) == enc);
        CHECK(base64_decode(enc) == plain);
    }
    CHECK_THROWS_AS(base64_decode("Zg="), Error);
    CHECK_THROWS_AS(base64_decode("Z=g="), Error);
    CHECK_THROWS_AS(base64_decode("Zm9v!A=="), Error);
}

TEST_CASE("RLE codec passes the published vectors") {
    const auto doc = load_vectors();
    CHECK(doc["format"] == "slmprop-rle-vectors");
    for (const auto& v : doc["valid"]) {
        INFO(v["name"].get<std::string>());
        const auto mask = bits(v["mask"].get<std::string>());
        REQUIRE(mask.size() == v["height"].get<size_t>() * v["width"].get<size_t>());
        CHECK(rle_encode(mask) == v["rle"].get<std::string>());
        CHECK(rle_decode(v["rle"].get<std::string>(), mask.size()) == mask);
    }
    for (const auto& v : doc["invalid"]) {
        INFO(v["name"].get<std::string>());
        CHECK_THROWS_AS(rle_decode(v["rle"].get<std::string>(), v["size"].get<size_t>()), Error);
    }
}

TEST_CASE("RLE round trips random masks bit exactly") {
    nn::Rng rng(77);
    for (int t = 0; t < 1000; ++t) {
        const auto n = static_cast<size_t>(rng.uniform_int(0, 400));
        const double p = rng.uniform(0.0, 1.0);
        std::vector<uint8_t> m(n);
        for (auto& v : m) v = rng.bernoulli(p) ? 1 : 0;
        REQUIRE(rle_decode(rle_encode(m), n) == m);
    }
}

TEST_CASE("png encoding is lossless") {
    std::vector<uint8_t> gray(7 * 5);
    for (size_t i = 0; i < gray.size(); ++i) gray[i] = static_cast<uint8_t>(i * 7);
    Png g = read_png(png_encode(gray, 7, 5, 1));
    CHECK(g.crc_ok);
    CHECK(g.width == 7);
    CHECK(g.height == 5);
    CHECK(g.color == 0);
    CHECK(g.pixels == gray);
    std::vector<uint8_t> rgb(3 * 4 * 2, 9);
    rgb[5] = 200;
    Png c = read_png(png_encode(rgb, 4, 2, 3));
    CHECK(c.color == 2);
    CHECK(c.pixels == rgb);
    CHECK_THROWS_AS(png_encode(gray, 6, 5, 1), Error);
}

TEST_CASE("session lifecycle") {
    ServiceConfig cfg;
    cfg.max_upload_bytes = 200000;
    AnnotationService svc(tiny_model(), cfg);
    auto c = make_case();
    const auto D = c.volume.dims().depth;

    Response created = svc.handle({"POST", "/sessions", {}, io::encode_volume(c.volume), "application/octet-stream"});
    REQUIRE(created.status == 201);
    CHECK(created.json()["dims"] == nlohmann::json({D, 16, 16}));
    const std::string id = created.json()["session_id"];

    std::string bad = io::encode_volume(c.volume);
    bad[0] = 'X';
    CHECK(svc.handle({"POST", "/sessions", {}, bad, ""}).status == 400);
    io::Volume big({400, 16, 16}, io::Spacing{}, io::Modality::SYNTH);
    CHECK(svc.handle({"POST", "/sessions", {}, io::encode_volume(big), ""}).status == 413);
    CHECK(svc.handle(post("/sessions", {{"path", "/no/such/file.svol"}})).status == 400);
    CHECK(svc.session_count() == 1);

    Response png = svc.handle(get("/sessions/" + id + "/slices/3"));
    CHECK(png.status == 200);
    CHECK(png.content_type == "image/png");
    Png p = read_png(png.body);
    CHECK(p.color == 0);
    const io::Volume norm = io::normalize_volume(c.volume);
    const auto ref = norm.slice(3);
    bool same = true;
    for (size_t i = 0; i < ref.values.size(); ++i) same &= p.pixels[i] == static_cast<uint8_t>(std::lround(ref.values[i]));
    CHECK(same);
    CHECK(svc.handle(get("/sessions/" + id + "/slices/" + std::to_string(D))).status == 404);
    CHECK(svc.handle(get("/sessions/" + id + "/slices/-1")).status == 404);
    CHECK(svc.handle(get("/sessions/nope/slices/0")).status == 404);
    CHECK(svc.handle(get("/nowhere")).status == 404);

    const int64_t cond = 10;
    Response r = svc.handle(post("/sessions/" + id + "/propagate", prompt_body(c, cond)));
    REQUIRE(r.status == 200);
    const auto j = r.json();
    CHECK(j["presence"].size() == static_cast<size_t>(D));
    CHECK(j["areas"][cond].get<int64_t>() == c.mask.object_area(cond, 1));
    CHECK(j["cond_idx"] == cond);

    auto body = prompt_body(c, cond);
    body["cond_idx"] = D;
    CHECK(svc.handle(post("/sessions/" + id + "/propagate", body)).status == 400);
    body = prompt_body(c, cond);
    body["mask"] = "not base64!";
    CHECK(svc.handle(post("/sessions/" + id + "/propagate", body)).status == 400);
    body["mask"] = rle_encode(std::vector<uint8_t>(256, 0));
    CHECK(svc.handle(post("/sessions/" + id + "/propagate", body)).status == 400);
    CHECK(svc.handle({"POST", "/sessions/" + id + "/propagate", {}, "{oops", "application/json"}).status == 400);

    // overlay and per-slice masks follow the latest result
    Response mask = svc.handle(get("/sessions/" + id + "/masks/" + std::to_string(cond)));
    REQUIRE(mask.status == 200);
    CHECK(rle_decode(mask.json()["mask"].get<std::string>(), 256) == c.mask.object_slice(cond, 1).values);
    Png o = read_png(svc.handle(get("/sessions/" + id + "/slices/" + std::to_string(cond))).body);
    CHECK(o.color == 2);
    const auto lab = c.mask.object_slice(cond, 1);
    bool overlay_ok = true;
    for (size_t i = 0; i < lab.values.size(); ++i) {
        const bool red = o.pixels[3 * i] == 255 && o.pixels[3 * i + 1] != 255;
        const bool gray = o.pixels[3 * i] == o.pixels[3 * i + 1] && o.pixels[3 * i + 1] == o.pixels[3 * i + 2];
        overlay_ok &= lab.values[i] ? red : gray;
    }
    CHECK(overlay_ok);
    CHECK(read_png(svc.handle(get("/sessions/" + id + "/slices/3", {{"overlay", "0"}})).body).color == 0);

    CHECK(svc.handle({"DELETE", "/sessions/" + id, {}, "", ""}).status == 204);
    CHECK(svc.session_count() == 0);
}

TEST_CASE("correction tallies") {
    AnnotationService svc(tiny_model());
    auto c = make_case(20);
    const std::string id = open_session(svc, c.volume);
    const std::string base = "/sessions/" + id;
    const std::string empty = rle_encode(std::vector<uint8_t>(256, 0));

    CHECK(svc.handle(post(base + "/corrections", {{"slice_idx", 2}, {"mask", empty}, {"elapsed_ms", 5}})).status == 400);
    REQUIRE(svc.handle(post(base + "/propagate", prompt_body(c, 10))).status == 200);

    auto corr = [&](int64_t k, int64_t ms) {
        return svc.handle(post(base + "/corrections", {{"slice_idx", k}, {"mask", empty}, {"elapsed_ms", ms}}));
    };
    Response a = corr(2, 10000);
    REQUIRE(a.status == 200);
    Response b = corr(2, 20000);
    CHECK(b.json()["distinct_corrected_slices"] == 1);
    CHECK(b.json()["csr"].get<double>() == doctest::Approx(1.0 / 20));
    CHECK(b.json()["spv_seconds"].get<double>() == doctest::Approx(30.0));
    double last_csr = b.json()["csr"], last_spv = b.json()["spv_seconds"];
    for (int64_t k : {3, 4, 5, 6}) {
        Response r = corr(k, 1);
        CHECK(r.json()["csr"].get<double>() >= last_csr);
        CHECK(r.json()["spv_seconds"].get<double>() >= last_spv);
        last_csr = r.json()["csr"];
        last_spv = r.json()["spv_seconds"];
    }
    CHECK(last_csr == doctest::Approx(0.25));
    CHECK(svc.session(id)->log.size() == 6);
    CHECK(svc.session(id)->log[0].before.values.size() == 256);
    CHECK(corr(20, 1).status == 400);
    CHECK(corr(3, -1).status == 400);
    CHECK(svc.handle(post("/sessions/zzz/corrections", {{"slice_idx", 1}, {"mask", empty}})).status == 404);

    // corrected slice is what the mask endpoint and metrics now see
    Response m = svc.handle(get(base + "/masks/2"));
    CHECK(m.json()["area"] == 0);
}

TEST_CASE("metrics against ground truth") {
    AnnotationService svc(tiny_model());
    auto c = make_case(12);
    const std::string id = open_session(svc, c.volume);
    const std::string base = "/sessions/" + id;
    const auto dir = std::filesystem::temp_directory_path() / "slmprop_service_metrics";
    std::filesystem::create_directories(dir);
    REQUIRE(svc.handle(post(base + "/propagate", prompt_body(c, 6))).status == 200);

    // replace every slice with the truth, then the report must be perfect
    for (int64_t z = 0; z < 12; ++z) {
        Response r = svc.handle(post(base + "/corrections",
                                     {{"slice_idx", z}, {"mask", rle_encode(c.mask.object_slice(z, 1).values)}, {"elapsed_ms", 0}}));
        REQUIRE(r.status == 200);
    }
    io::save_mask(c.mask, dir / "gt.smsk");
    Response rep = svc.handle(get(base + "/metrics", {{"gt", (dir / "gt.smsk").string()}}));
    REQUIRE(rep.status == 200);
    const auto j = rep.json();
    CHECK(j["format"] == "slmprop-metrics-report");
    CHECK(j["reports"][0]["dsc_3d"].get<double>() == 1.0);
    CHECK(j["reports"][0]["assd_3d"].get<double>() == 0.0);
    std::ofstream(dir / "service_metrics.json") << rep.body;

    io::MaskVolume other({13, 16, 16}, io::Spacing{});
    io::save_mask(other, dir / "wrong.smsk");
    CHECK(svc.handle(get(base + "/metrics", {{"gt", (dir / "wrong.smsk").string()}})).status == 400);
    CHECK(svc.handle(get(base + "/metrics")).status == 400);
    CHECK(svc.handle(get(base + "/metrics", {{"gt", (dir / "missing.smsk").string()}})).status == 400);
}

TEST_CASE("a second propagation in the same session gets 409") {
    std::promise<void> entered, release;
    auto release_f = release.get_future().share();
    ServiceConfig cfg;
    cfg.on_propagate_start = [&](const std::string&) {
        entered.set_value();
        release_f.wait();
    };
    AnnotationService svc(tiny_model(), cfg);
    auto c = make_case(12);
    const std::string id = open_session(svc, c.volume);
    const std::string other = open_session(svc, c.volume);

    auto first = std::async(std::launch::async, [&] { return svc.handle(post("/sessions/" + id + "/propagate", prompt_body(c, 6))); });
    entered.get_future().wait();
    CHECK(svc.handle(post("/sessions/" + id + "/propagate", prompt_body(c, 6))).status == 409);
    release.set_value();
    CHECK(first.get().status == 200);
    (void)other;
}

TEST_CASE("simultaneous requests never overlap propagations") {
    std::atomic<int> inside{0}, max_inside{0};
    ServiceConfig cfg;
    cfg.on_propagate_start = [&](const std::string&) {
        const int now = ++inside;
        int prev = max_inside.load();
        while (now > prev && !max_inside.compare_exchange_weak(prev, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
        --inside;
    };
    AnnotationService svc(tiny_model(), cfg);
    auto c = make_case(8);
    const std::string id = open_session(svc, c.volume);
    std::atomic<int> ok{0}, busy{0}, other{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < 6; ++t)
        pool.emplace_back([&] {
            for (int i = 0; i < 4; ++i) {
                const int s = svc.handle(post("/sessions/" + id + "/propagate", prompt_body(c, 4))).status;
                (s == 200 ? ok : s == 409 ? busy : other)++;
            }
        });
    for (auto& t : pool) t.join();
    CHECK(max_inside.load() == 1);
    CHECK(ok.load() >= 1);
    CHECK(other.load() == 0);
    CHECK(ok.load() + busy.load() == 24);
}

TEST_CASE("http transport with CORS and upload limit") {
    ServiceConfig cfg;
    cfg.max_upload_bytes = 100000;
    cfg.cors_origin = "http://localhost:5173";
    AnnotationService svc(tiny_model(), cfg);
    HttpServer server(svc);
    const int port = server.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    std::thread th([&] { server.listen(); });

    httplib::Client cli("127.0.0.1", port);
    cli.set_connection_timeout(5);
    auto c = make_case(12);
    httplib::Result res;
    for (int i = 0; i < 100 && !(res = cli.Get("/health")); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");

    auto created = cli.Post("/sessions", io::encode_volume(c.volume), "application/octet-stream");
    REQUIRE(created);
    CHECK(created->status == 201);
    const std::string id = nlohmann::json::parse(created->body)["session_id"];
    auto pre = cli.Options("/sessions/" + id + "/propagate");
    REQUIRE(pre);
    CHECK(pre->status == 204);
    CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

    auto prop = cli.Post("/sessions/" + id + "/propagate", prompt_body(c, 6).dump(), "application/json");
    REQUIRE(prop);
    CHECK(prop->status == 200);
    auto slice = cli.Get("/sessions/" + id + "/slices/2");
    REQUIRE(slice);
    CHECK(slice->get_header_value("Content-Type") == "image/png");

    io::Volume big({200, 16, 16}, io::Spacing{}, io::Modality::SYNTH);
    auto too_big = cli.Post("/sessions", io::encode_volume(big), "application/octet-stream");
    REQUIRE(too_big);
    CHECK(too_big->status == 413);

    server.stop();
    th.join();
}
