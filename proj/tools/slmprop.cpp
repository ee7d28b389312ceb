#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <nlohmann/json.hpp>

#include "slmprop/engine/engine.hpp"
#include "slmprop/error.hpp"
#include "slmprop/experiment/experiment.hpp"
#include "slmprop/io/volume.hpp"
#include "slmprop/metrics/metrics.hpp"
#include "slmprop/nn/rng.hpp"
#include "slmprop/service/service.hpp"
#include "slmprop/synth/scenario.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace slmprop;

namespace {

struct Common {
    std::string config;
    std::optional<uint64_t> seed;
    std::string out;
};

struct Loaded {
    json cfg = json::object();
    fs::path base = ".";
};

Loaded load_config(const std::string& path) {
    Loaded l;
    if (path.empty()) return l;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::ConfigInvalid, "cannot open config " + path);
    try {
        l.cfg = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigInvalid, path + ": " + e.what());
    }
    if (!l.cfg.is_object()) throw Error(ErrorCode::ConfigInvalid, path + ": config must be a JSON object");
    l.base = fs::path(path).parent_path();
    return l;
}

fs::path resolve(const Loaded& l, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() || l.base.empty() ? q : l.base / q;
}

std::string required_string(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_string()) throw Error(ErrorCode::ConfigInvalid, std::string("config needs string '") + key + "'");
    return j[key].get<std::string>();
}

fs::path out_dir(const Common& c, const Loaded& l, const char* fallback) {
    fs::path d = !c.out.empty() ? fs::path(c.out) : l.cfg.contains("out") ? resolve(l, l.cfg["out"].get<std::string>()) : fs::path(fallback);
    fs::create_directories(d);
    return d;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

void announce(const std::string& cmd, const std::vector<fs::path>& files) {
    json j{{"command", cmd}, {"outputs", json::array()}};
    for (const auto& f : files) j["outputs"].push_back(f.string());
    std::cout << j.dump() << '\n';
}

uint64_t seed_of(const Common& c, const Loaded& l) {
    if (c.seed) return *c.seed;
    return l.cfg.value("seed", uint64_t{0});
}

std::vector<synth::ScenarioSpec> templates_from(const json& j, uint64_t seed) {
    std::vector<synth::ScenarioSpec> out;
    if (j.contains("specs")) {
        for (const auto& s : j["specs"]) out.push_back(s.get<synth::ScenarioSpec>());
        return out;
    }
    std::vector<std::string> kinds = j.value("kinds", std::vector<std::string>{"AdjacentDistractor", "GapReappear"});
    const auto dims = j.value("dims", std::vector<int64_t>{16, 32, 32});
    if (dims.size() != 3) throw Error(ErrorCode::ConfigInvalid, "dims must have 3 entries");
    for (const auto& k : kinds) {
        auto s = synth::default_spec(synth::scenario_kind_from_string(k), {dims[0], dims[1], dims[2]}, seed);
        s.num_objects = j.value("num_objects", s.num_objects);
        s.range_jitter = j.value("range_jitter", int64_t{2});
        s.distractor_contrast = j.value("distractor_contrast", s.distractor_contrast);
        out.push_back(s);
    }
    return out;
}

std::vector<synth::LabeledCase> load_manifest(const fs::path& path, const std::string& split) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::ConfigInvalid, "cannot open manifest " + path.string());
    const json m = json::parse(in);
    if (m.value("format", std::string()) != "slmprop-synth-manifest")
        throw Error(ErrorCode::ConfigInvalid, path.string() + " is not a synth manifest");
    std::vector<synth::LabeledCase> out;
    for (const auto& c : m.at("cases")) {
        if (!split.empty() && c.at("split") != split) continue;
        synth::LabeledCase lc;
        lc.volume = io::load_volume(path.parent_path() / c.at("volume").get<std::string>());
        lc.mask = io::load_mask(path.parent_path() / c.at("mask").get<std::string>());
        lc.spec = c.at("spec").get<synth::ScenarioSpec>();
        out.push_back(std::move(lc));
    }
    if (out.empty()) throw Error(ErrorCode::ConfigInvalid, "manifest has no '" + split + "' cases");
    return out;
}

int cmd_synth(const Common& c) {
    const Loaded l = load_config(c.config);
    const uint64_t seed = seed_of(c, l);
    const auto templates = templates_from(l.cfg, seed);
    const int n_train = l.cfg.value("n_train", 5), n_test = l.cfg.value("n_test", 20);
    const synth::Split sp = synth::generate_split(templates, n_train, n_test, seed);
    const fs::path dir = out_dir(c, l, "synth");
    json manifest{{"format", "slmprop-synth-manifest"}, {"version", 1}, {"seed", seed}, {"cases", json::array()}};
    auto write = [&](const std::vector<synth::LabeledCase>& cases, const std::string& split) {
        for (size_t i = 0; i < cases.size(); ++i) {
            char stem[64];
            std::snprintf(stem, sizeof stem, "%s_%03zu", split.c_str(), i);
            io::save_volume(cases[i].volume, dir / (std::string(stem) + ".svol"));
            io::save_mask(cases[i].mask, dir / (std::string(stem) + ".smsk"));
            manifest["cases"].push_back({{"split", split},
                                         {"volume", std::string(stem) + ".svol"},
                                         {"mask", std::string(stem) + ".smsk"},
                                         {"kind", synth::to_string(cases[i].spec.kind)},
                                         {"spec", cases[i].spec}});
        }
    };
    write(sp.train, "train");
    write(sp.test, "test");
    write_json(dir / "manifest.json", manifest);
    announce("synth", {dir / "manifest.json"});
    return 0;
}

std::vector<synth::LabeledCase> training_data(const Loaded& l, uint64_t seed) {
    if (l.cfg.contains("manifest")) return load_manifest(resolve(l, required_string(l.cfg, "manifest")), "train");
    const json s = l.cfg.value("synth", json::object());
    const auto templates = templates_from(s, seed);
    return synth::generate_split(templates, s.value("n_train", 5), 1, seed).train;
}

int cmd_train(const Common& c) {
    const Loaded l = load_config(c.config);
    const uint64_t seed = seed_of(c, l);
    engine::ModelConfig mc = l.cfg.contains("model") ? l.cfg["model"].get<engine::ModelConfig>() : engine::desk_config();
    if (l.cfg.contains("mode")) mc.ablation.mode = attention::ablation_mode_from_string(l.cfg["mode"].get<std::string>());
    json tj = experiment::ExperimentPlan::desk_train_config();
    if (l.cfg.contains("train")) tj.merge_patch(l.cfg["train"]);
    engine::TrainConfig tc = tj.get<engine::TrainConfig>();
    tc.seed = nn::mix_seed(seed, 200);
    mc.validate();
    const auto data = training_data(l, seed);
    const engine::Model init = engine::init_model(mc, nn::mix_seed(seed, 100));
    engine::TrainResult r = engine::train(data, tc, init);
    const fs::path dir = out_dir(c, l, "train");
    const fs::path ckpt = dir / l.cfg.value("checkpoint", std::string("model.sckp"));
    engine::save_checkpoint({mc, r.params}, ckpt);
    json rep{{"format", "slmprop-train-report"},
             {"version", 1},
             {"seed", seed},
             {"cases", data.size()},
             {"steps", r.losses.size()},
             {"final_loss", r.losses.empty() ? json(nullptr) : json(r.losses.back())},
             {"losses", r.losses},
             {"model", mc},
             {"train", tc},
             {"checkpoint", ckpt.filename().string()}};
    write_json(dir / "train_report.json", rep);
    announce("train", {ckpt, dir / "train_report.json"});
    return 0;
}

int cmd_propagate(const Common& c) {
    const Loaded l = load_config(c.config);
    const engine::Model model = engine::load_checkpoint(resolve(l, required_string(l.cfg, "checkpoint")));
    const io::Volume vol = io::load_volume(resolve(l, required_string(l.cfg, "volume")));
    const io::MaskVolume prompt = io::load_mask(resolve(l, required_string(l.cfg, "prompt")));
    if (!(prompt.dims() == vol.dims())) throw Error(ErrorCode::DimMismatch, "prompt mask and volume dims differ");
    engine::InferenceOptions opts;
    if (l.cfg.contains("inference")) {
        opts.reset_between_directions = l.cfg["inference"].value("reset_between_directions", true);
        opts.seed_short_with_conditional = l.cfg["inference"].value("seed_short_with_conditional", true);
    }
    std::vector<uint8_t> ids = l.cfg.value("object_ids", prompt.object_ids());
    if (ids.empty()) throw Error(ErrorCode::ObjectAbsent, "prompt mask has no objects");
    const auto rule = engine::initial_slice_rule_from_string(l.cfg.value("rule", std::string("M")));
    const fs::path dir = out_dir(c, l, "propagate");

    std::map<uint8_t, engine::PropagationResult> first;
    json rep{{"format", "slmprop-propagate-report"}, {"version", 1}, {"objects", json::array()}};
    std::vector<fs::path> files;
    for (uint8_t id : ids) {
        std::vector<int64_t> conds;
        if (l.cfg.contains("cond_idx")) conds = {l.cfg["cond_idx"].get<int64_t>()};
        else conds = engine::select_initial_slice(prompt, id, rule);
        for (size_t k = 0; k < conds.size(); ++k) {
            if (conds[k] < 0 || conds[k] >= vol.dims().depth) throw Error(ErrorCode::IndexOutOfRange, "cond_idx outside the volume");
            auto r = engine::propagate(model, vol, prompt.object_slice(conds[k], id), conds[k], opts);
            const std::string name = "result_obj" + std::to_string(id) + "_c" + std::to_string(conds[k]) + ".sprs";
            engine::save_result(r, dir / name);
            files.push_back(dir / name);
            json s = engine::result_summary(r, vol.dims().height, vol.dims().width);
            s["object_id"] = id;
            s["result"] = name;
            rep["objects"].push_back(s);
            if (k == 0) first[id] = std::move(r);
        }
    }
    io::save_mask(engine::to_mask_volume(first, vol.dims(), vol.spacing()), dir / "pred.smsk");
    write_json(dir / "propagate_report.json", rep);
    files.push_back(dir / "pred.smsk");
    files.push_back(dir / "propagate_report.json");
    announce("propagate", files);
    return 0;
}

int cmd_metrics(const Common& c) {
    const Loaded l = load_config(c.config);
    const uint64_t seed = seed_of(c, l);
    const int resamples = l.cfg.value("bootstrap_resamples", 1000);
    std::vector<metrics::MetricsReport> reports;
    json entries = l.cfg.value("pairs", json::array());
    if (l.cfg.contains("manifest")) {
        // predictions named like the manifest masks inside `pred_dir`
        const fs::path mpath = resolve(l, required_string(l.cfg, "manifest"));
        std::ifstream in(mpath, std::ios::binary);
        const json m = json::parse(in);
        const fs::path pred_dir = resolve(l, required_string(l.cfg, "pred_dir"));
        for (const auto& e : m.at("cases")) {
            if (e.at("split") != l.cfg.value("split", std::string("test"))) continue;
            entries.push_back({{"gt", (mpath.parent_path() / e.at("mask").get<std::string>()).string()},
                               {"pred", (pred_dir / e.at("mask").get<std::string>()).string()}});
        }
    }
    if (entries.empty()) throw Error(ErrorCode::ConfigInvalid, "metrics config needs 'pairs' or 'manifest'");
    for (const auto& e : entries) {
        const io::MaskVolume gt = io::load_mask(resolve(l, required_string(e, "gt")));
        io::MaskVolume pred;
        std::vector<uint8_t> ids = e.value("object_ids", gt.object_ids());
        if (e.contains("result")) {
            const auto r = engine::load_result(resolve(l, required_string(e, "result")));
            const uint8_t id = e.value("object_id", uint8_t{1});
            pred = engine::to_mask_volume(r, id, gt.dims(), gt.spacing());
            ids = {id};
        } else {
            pred = io::load_mask(resolve(l, required_string(e, "pred")));
        }
        for (uint8_t id : ids) reports.push_back(metrics::compute_report(pred, gt, id));
    }
    const auto agg = metrics::aggregate(reports, resamples, seed);
    const fs::path dir = out_dir(c, l, "metrics");
    write_json(dir / "metrics.json", metrics::to_document(reports, agg));
    {
        std::ofstream csv(dir / "metrics.csv", std::ios::binary);
        csv << metrics::to_csv(reports);
    }
    announce("metrics", {dir / "metrics.json", dir / "metrics.csv"});
    return 0;
}

int cmd_experiment(const Common& c, const std::string& name) {
    const Loaded l = load_config(c.config);
    experiment::ExperimentPlan plan = l.cfg.get<experiment::ExperimentPlan>();
    if (c.seed) plan.seeds = {*c.seed};
    if (l.cfg.contains("cache_dir")) plan.cache_dir = resolve(l, l.cfg["cache_dir"].get<std::string>());
    else if (const char* env = std::getenv("SLMPROP_CACHE"); env && *env) plan.cache_dir = fs::path(env);
    experiment::ComparisonReport rep = name == "ablate"       ? experiment::run_ablation(plan)
                                       : name == "sweep-init" ? experiment::run_initial_slice_sweep(plan)
                                                              : experiment::run_error_suite(plan);
    const fs::path dir = out_dir(c, l, "reports");
    experiment::write_report(rep, dir, rep.experiment);
    announce(name, {dir / (rep.experiment + ".json"), dir / (rep.experiment + ".md")});
    return 0;
}

service::HttpServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

int cmd_serve(const Common& c, const std::string& checkpoint, const std::string& host, int port) {
    const Loaded l = load_config(c.config);
    service::ServiceConfig cfg;
    cfg.max_upload_bytes = l.cfg.value("max_upload_bytes", cfg.max_upload_bytes);
    cfg.cors_origin = l.cfg.value("cors_origin", cfg.cors_origin);
    const std::string ck = !checkpoint.empty() ? checkpoint : required_string(l.cfg, "checkpoint");
    service::AnnotationService svc(engine::load_checkpoint(resolve(l, ck)), cfg);
    service::HttpServer server(svc);
    const int bound = server.bind(host, port);
    if (bound < 0) throw Error(ErrorCode::IoFailure, "cannot bind " + host + ":" + std::to_string(port));
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << json{{"command", "serve"}, {"host", host}, {"port", bound}}.dump() << std::endl;
    server.listen();
    g_server = nullptr;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"slmprop: slice propagation with dual memory banks"};
    app.require_subcommand(1);
    Common common;
    std::string checkpoint, host = "127.0.0.1";
    int port = 8080;
    std::map<std::string, CLI::App*> subs;
    const std::vector<std::pair<std::string, std::string>> names{
        {"synth", "generate a synthetic split with a manifest"},
        {"train", "train one model and write a checkpoint"},
        {"propagate", "propagate prompts through a volume"},
        {"metrics", "score predictions against ground truth"},
        {"ablate", "memory bank ablation grid"},
        {"sweep-init", "initial slice rule sweep"},
        {"error-suite", "per scenario error taxonomy"},
        {"serve", "HTTP annotation service"}};
    for (const auto& [n, help] : names) {
        CLI::App* s = app.add_subcommand(n, help);
        s->add_option("--config", common.config, "JSON config file")->check(CLI::ExistingFile);
        s->add_option("--seed", common.seed, "seed (overrides the config)");
        s->add_option("--out", common.out, "output directory");
        subs[n] = s;
    }
    subs["serve"]->add_option("--checkpoint", checkpoint, "checkpoint path");
    subs["serve"]->add_option("--port", port, "port (0 picks a free one)");
    subs["serve"]->add_option("--host", host, "bind address");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    try {
        if (subs["synth"]->parsed()) return cmd_synth(common);
        if (subs["train"]->parsed()) return cmd_train(common);
        if (subs["propagate"]->parsed()) return cmd_propagate(common);
        if (subs["metrics"]->parsed()) return cmd_metrics(common);
        if (subs["ablate"]->parsed()) return cmd_experiment(common, "ablate");
        if (subs["sweep-init"]->parsed()) return cmd_experiment(common, "sweep-init");
        if (subs["error-suite"]->parsed()) return cmd_experiment(common, "error-suite");
        if (subs["serve"]->parsed()) return cmd_serve(common, checkpoint, host, port);
    } catch (const Error& e) {
        std::cerr << "slmprop: " << e.what() << '\n';
        return is_validation_error(e.code()) ? 2 : 3;
    } catch (const json::exception& e) {
        std::cerr << "slmprop: invalid config: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "slmprop: " << e.what() << '\n';
        return 3;
    }
    return 2;
}
