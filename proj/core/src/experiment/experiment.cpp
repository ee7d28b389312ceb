#include "slmprop/experiment/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "slmprop/error.hpp"
#include "slmprop/nn/rng.hpp"

namespace slmprop::experiment {

using attention::AblationMode;
using engine::InitialSliceRule;

namespace {

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::optional<double> mean_opt(const std::vector<double>& v) {
    if (v.empty()) return std::nullopt;
    return mean_of(v);
}

metrics::ConfidenceInterval interval(const std::vector<double>& v, int resamples, uint64_t seed) {
    if (v.size() >= 2) return metrics::bootstrap_ci(v, resamples, seed);
    metrics::ConfidenceInterval ci;
    ci.mean = ci.lo = ci.hi = v.empty() ? 0.0 : v.front();
    ci.seed = seed;
    return ci;
}

int objects_per_group(const ExperimentPlan& plan) {
    return plan.setting == MultiLabelSetting::I_plus_I ? plan.num_objects : 1;
}

int volume_groups(const ExperimentPlan& plan) { return plan.n_train == 1 ? plan.one_volume_models : 1; }

struct Accum {
    std::vector<double> dsc, assd, present, absent, fnsr, pfnsr;
    int propagations = 0;

    void add(const metrics::MetricsReport& r) {
        dsc.push_back(r.dsc_3d);
        if (r.assd_3d) assd.push_back(*r.assd_3d);
        present.push_back(r.present_dsc_mean);
        if (r.absent_dsc_mean) absent.push_back(*r.absent_dsc_mean);
        fnsr.push_back(r.fn.fnsr);
        pfnsr.push_back(r.fn.pfnsr);
    }
};

CaseScore score_of(const Accum& a, int64_t index, const synth::LabeledCase& c, uint8_t id) {
    CaseScore s;
    s.case_index = index;
    s.kind = c.spec.kind;
    s.object_id = id;
    s.dsc_3d = mean_of(a.dsc);
    s.assd_3d = mean_opt(a.assd);
    s.present_dsc = mean_of(a.present);
    s.absent_dsc = mean_opt(a.absent);
    s.fnsr = mean_of(a.fnsr);
    s.pfnsr = mean_of(a.pfnsr);
    s.propagations = a.propagations;
    return s;
}

std::vector<CaseScore> evaluate_case(const ExperimentPlan& plan, const std::vector<engine::Model>& models,
                                     const synth::LabeledCase& c, int64_t index, InitialSliceRule rule) {
    const auto& gt = c.mask;
    const auto& ids = gt.object_ids();
    const int per_group = objects_per_group(plan);
    const int groups = static_cast<int>(models.size()) / per_group;
    std::map<uint8_t, Accum> acc;
    std::map<uint8_t, std::vector<int64_t>> conds;
    for (uint8_t id : ids) conds[id] = engine::select_initial_slice(gt, id, rule);

    for (int g = 0; g < groups; ++g) {
        if (plan.setting == MultiLabelSetting::M_plus_M) {
            const engine::Model& m = models[static_cast<size_t>(g)];
            const size_t runs = conds.begin()->second.size();
            for (size_t k = 0; k < runs; ++k) {
                std::map<uint8_t, engine::ObjectPrompt> prompts;
                for (uint8_t id : ids) prompts[id] = {gt.object_slice(conds[id][k], id), conds[id][k]};
                auto results = engine::propagate_multi(m, c.volume, prompts, plan.inference);
                const io::MaskVolume pred = engine::to_mask_volume(results, gt.dims(), gt.spacing());
                for (uint8_t id : ids) {
                    acc[id].add(metrics::compute_report(pred, gt, id));
                    ++acc[id].propagations;
                }
            }
            continue;
        }
        for (size_t oi = 0; oi < ids.size(); ++oi) {
            const uint8_t id = ids[oi];
            const size_t slot = per_group == 1 ? 0 : std::min(oi, static_cast<size_t>(per_group - 1));
            const engine::Model& m = models[static_cast<size_t>(g * per_group) + slot];
            for (int64_t cond : conds[id]) {
                auto r = engine::propagate(m, c.volume, gt.object_slice(cond, id), cond, plan.inference);
                acc[id].add(metrics::compute_report(engine::to_mask_volume(r, id, gt.dims(), gt.spacing()), gt, id));
                ++acc[id].propagations;
            }
        }
    }
    std::vector<CaseScore> out;
    for (uint8_t id : ids) out.push_back(score_of(acc[id], index, c, id));
    return out;
}

std::string cache_key(const ExperimentPlan& plan, AblationMode mode, uint64_t seed, int index,
                      const engine::TrainConfig& tc) {
    engine::ModelConfig mc = plan.model;
    mc.ablation.mode = mode;
    nlohmann::json j;
    j["model"] = mc;
    j["train"] = tc;
    j["kinds"] = nlohmann::json::array();
    for (auto k : plan.kinds) j["kinds"].push_back(synth::to_string(k));
    j["dims"] = {plan.dims.depth, plan.dims.height, plan.dims.width};
    j["num_objects"] = plan.num_objects;
    j["range_jitter"] = plan.range_jitter;
    j["n_train"] = plan.n_train;
    j["one_volume_models"] = plan.one_volume_models;
    j["setting"] = to_string(plan.setting);
    j["seed"] = seed;
    j["index"] = index;
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
    return os.str();
}

nlohmann::json ci_json(const metrics::ConfidenceInterval& ci) { return metrics::to_json(ci); }

nlohmann::json opt_ci_json(const std::optional<metrics::ConfidenceInterval>& ci) {
    return ci ? ci_json(*ci) : nlohmann::json(nullptr);
}

struct RowKey {
    AblationMode mode;
    InitialSliceRule rule;
    std::string kind;
    bool operator<(const RowKey& o) const {
        return std::tie(mode, rule, kind) < std::tie(o.mode, o.rule, o.kind);
    }
};

ComparisonRow make_row(const ExperimentPlan& plan, const RowKey& key,
                       const std::vector<std::pair<uint64_t, CaseScore>>& scores, uint64_t ci_seed) {
    ComparisonRow row;
    row.mode = key.mode;
    row.rule = key.rule;
    row.setting = plan.setting;
    row.kind = key.kind;
    row.samples = static_cast<int>(scores.size());
    std::vector<double> d, s, p, a, f, pf;
    for (const auto& [seed, sc] : scores) {
        d.push_back(sc.dsc_3d);
        if (sc.assd_3d)
            s.push_back(*sc.assd_3d);
        else
            ++row.assd_undefined;
        p.push_back(sc.present_dsc);
        if (sc.absent_dsc) a.push_back(*sc.absent_dsc);
        f.push_back(sc.fnsr);
        pf.push_back(sc.pfnsr);
    }
    const int R = plan.bootstrap_resamples;
    row.dsc_3d = interval(d, R, nn::mix_seed(ci_seed, 1));
    if (!s.empty()) row.assd_3d = interval(s, R, nn::mix_seed(ci_seed, 2));
    row.present_dsc = interval(p, R, nn::mix_seed(ci_seed, 3));
    if (!a.empty()) row.absent_dsc = interval(a, R, nn::mix_seed(ci_seed, 4));
    row.fnsr = interval(f, R, nn::mix_seed(ci_seed, 5));
    row.pfnsr = interval(pf, R, nn::mix_seed(ci_seed, 6));

    for (uint64_t seed : plan.seeds) {
        std::vector<double> sd, sp, sa, sf, spf;
        for (const auto& [sseed, sc] : scores) {
            if (sseed != seed) continue;
            sd.push_back(sc.dsc_3d);
            sp.push_back(sc.present_dsc);
            if (sc.absent_dsc) sa.push_back(*sc.absent_dsc);
            sf.push_back(sc.fnsr);
            spf.push_back(sc.pfnsr);
        }
        if (sd.empty()) continue;
        row.per_seed.push_back({seed, mean_of(sd), mean_of(sp), mean_opt(sa), mean_of(sf), mean_of(spf)});
    }
    return row;
}

void add_deltas(ComparisonReport& report) {
    for (auto& row : report.rows) {
        if (row.mode == AblationMode::M_O) continue;
        const ComparisonRow* base = report.find(AblationMode::M_O, row.rule, row.kind);
        if (!base) continue;
        nlohmann::json d;
        d["dsc_3d"] = row.dsc_3d.mean - base->dsc_3d.mean;
        d["present_dsc"] = row.present_dsc.mean - base->present_dsc.mean;
        d["absent_dsc"] = (row.absent_dsc && base->absent_dsc) ? nlohmann::json(row.absent_dsc->mean - base->absent_dsc->mean)
                                                               : nlohmann::json(nullptr);
        d["assd_3d"] = (row.assd_3d && base->assd_3d) ? nlohmann::json(row.assd_3d->mean - base->assd_3d->mean)
                                                      : nlohmann::json(nullptr);
        d["fnsr"] = row.fnsr.mean - base->fnsr.mean;
        d["pfnsr"] = row.pfnsr.mean - base->pfnsr.mean;
        row.delta_vs_baseline = d;
    }
}

ComparisonReport run_grid(const ExperimentPlan& plan, const std::string& name, bool per_kind) {
    plan.validate();
    std::map<RowKey, std::vector<std::pair<uint64_t, CaseScore>>> buckets;
    for (uint64_t seed : plan.seeds) {
        const Suite suite = build_suite(plan, seed);
        for (AblationMode mode : plan.modes) {
            const auto models = trained_models(plan, mode, seed, suite);
            for (InitialSliceRule rule : plan.rules) {
                for (const auto& sc : evaluate(plan, models, suite.test, rule)) {
                    buckets[{mode, rule, "all"}].emplace_back(seed, sc);
                    if (per_kind) buckets[{mode, rule, std::string(synth::to_string(sc.kind))}].emplace_back(seed, sc);
                }
            }
        }
    }
    ComparisonReport report;
    report.experiment = name;
    report.plan = plan;
    const uint64_t base_seed = plan.seeds.empty() ? 0 : plan.seeds.front();
    // Row order follows the plan, not the map.
    std::vector<std::string> kinds{"all"};
    if (per_kind)
        for (auto k : plan.kinds) kinds.emplace_back(synth::to_string(k));
    for (const auto& kind : kinds)
        for (InitialSliceRule rule : plan.rules)
            for (AblationMode mode : plan.modes) {
                RowKey key{mode, rule, kind};
                auto it = buckets.find(key);
                if (it == buckets.end()) continue;
                const uint64_t ci_seed = nn::mix_seed(base_seed, fnv1a(std::string(attention::to_string(mode)) + "/" +
                                                                       std::string(engine::to_string(rule)) + "/" + kind));
                report.rows.push_back(make_row(plan, key, it->second, ci_seed));
            }
    add_deltas(report);
    return report;
}

} // namespace

std::string_view to_string(MultiLabelSetting s) {
    switch (s) {
    case MultiLabelSetting::I_plus_I: return "I+I";
    case MultiLabelSetting::M_plus_I: return "M+I";
    case MultiLabelSetting::M_plus_M: return "M+M";
    }
    return "I+I";
}

MultiLabelSetting multi_label_setting_from_string(std::string_view s) {
    for (auto m : {MultiLabelSetting::I_plus_I, MultiLabelSetting::M_plus_I, MultiLabelSetting::M_plus_M})
        if (s == to_string(m)) return m;
    throw Error(ErrorCode::ConfigInvalid, "unknown multi-label setting '" + std::string(s) + "'");
}

engine::TrainConfig ExperimentPlan::desk_train_config() {
    engine::TrainConfig t;
    t.epochs = 600;
    t.lr_encoder = 2e-3;
    t.lr_rest = 2e-3;
    t.augment_dihedral = true;
    return t;
}

void ExperimentPlan::validate() const {
    if (kinds.empty()) throw Error(ErrorCode::ConfigInvalid, "plan needs at least one scenario kind");
    if (n_train < 1 || n_test < 1) throw Error(ErrorCode::ConfigInvalid, "n_train and n_test must be >= 1");
    if (n_train == 1 && one_volume_models < 1) throw Error(ErrorCode::ConfigInvalid, "one_volume_models must be >= 1");
    if (modes.empty() || rules.empty()) throw Error(ErrorCode::ConfigInvalid, "plan needs modes and rules");
    if (seeds.empty()) throw Error(ErrorCode::ConfigInvalid, "plan needs explicit seeds");
    if (num_objects < 1 || num_objects > 2) throw Error(ErrorCode::ConfigInvalid, "num_objects must be 1 or 2");
    if (bootstrap_resamples < 1) throw Error(ErrorCode::ConfigInvalid, "bootstrap_resamples must be >= 1");
    if (workers < 1) throw Error(ErrorCode::ConfigInvalid, "workers must be >= 1");
    model.validate();
    train.validate();
    for (auto k : kinds) synth::validate(synth::default_spec(k, dims, 0));
}

void to_json(nlohmann::json& j, const ExperimentPlan& p) {
    j = nlohmann::json::object();
    j["kinds"] = nlohmann::json::array();
    for (auto k : p.kinds) j["kinds"].push_back(synth::to_string(k));
    j["dims"] = {p.dims.depth, p.dims.height, p.dims.width};
    j["num_objects"] = p.num_objects;
    j["range_jitter"] = p.range_jitter;
    j["n_train"] = p.n_train;
    j["n_test"] = p.n_test;
    j["one_volume_models"] = p.one_volume_models;
    j["modes"] = nlohmann::json::array();
    for (auto m : p.modes) j["modes"].push_back(attention::to_string(m));
    j["rules"] = nlohmann::json::array();
    for (auto r : p.rules) j["rules"].push_back(engine::to_string(r));
    j["setting"] = to_string(p.setting);
    j["seeds"] = p.seeds;
    j["model"] = p.model;
    j["train"] = p.train;
    j["inference"] = {{"reset_between_directions", p.inference.reset_between_directions},
                      {"seed_short_with_conditional", p.inference.seed_short_with_conditional}};
    j["bootstrap_resamples"] = p.bootstrap_resamples;
}

void from_json(const nlohmann::json& j, ExperimentPlan& p) {
    p = ExperimentPlan{};
    if (j.contains("kinds")) {
        p.kinds.clear();
        for (const auto& k : j["kinds"]) p.kinds.push_back(synth::scenario_kind_from_string(k.get<std::string>()));
    }
    if (j.contains("dims")) {
        const auto& d = j["dims"];
        p.dims = {d.at(0).get<int64_t>(), d.at(1).get<int64_t>(), d.at(2).get<int64_t>()};
    }
    p.num_objects = j.value("num_objects", p.num_objects);
    p.range_jitter = j.value("range_jitter", p.range_jitter);
    p.n_train = j.value("n_train", p.n_train);
    p.n_test = j.value("n_test", p.n_test);
    p.one_volume_models = j.value("one_volume_models", p.one_volume_models);
    if (j.contains("modes")) {
        p.modes.clear();
        for (const auto& m : j["modes"]) p.modes.push_back(attention::ablation_mode_from_string(m.get<std::string>()));
    }
    if (j.contains("rules")) {
        p.rules.clear();
        for (const auto& r : j["rules"]) p.rules.push_back(engine::initial_slice_rule_from_string(r.get<std::string>()));
    }
    if (j.contains("setting")) p.setting = multi_label_setting_from_string(j["setting"].get<std::string>());
    if (j.contains("seeds")) p.seeds = j["seeds"].get<std::vector<uint64_t>>();
    if (j.contains("model")) p.model = j["model"].get<engine::ModelConfig>();
    if (j.contains("train")) {
        // Unspecified training fields keep the desk preset rather than the library defaults.
        nlohmann::json t = p.train;
        t.merge_patch(j["train"]);
        p.train = t.get<engine::TrainConfig>();
    }
    if (j.contains("inference")) {
        const auto& i = j["inference"];
        p.inference.reset_between_directions = i.value("reset_between_directions", true);
        p.inference.seed_short_with_conditional = i.value("seed_short_with_conditional", true);
    }
    p.bootstrap_resamples = j.value("bootstrap_resamples", p.bootstrap_resamples);
    p.workers = j.value("workers", p.workers);
}

const ComparisonRow* ComparisonReport::find(AblationMode mode, InitialSliceRule rule, std::string_view kind) const {
    for (const auto& r : rows)
        if (r.mode == mode && r.rule == rule && r.kind == kind) return &r;
    return nullptr;
}

Suite build_suite(const ExperimentPlan& plan, uint64_t seed) {
    std::vector<synth::ScenarioSpec> templates;
    for (auto k : plan.kinds) {
        auto s = synth::default_spec(k, plan.dims, seed);
        s.num_objects = plan.num_objects;
        s.range_jitter = plan.range_jitter;
        templates.push_back(s);
    }
    const int n_train = plan.n_train == 1 ? plan.one_volume_models : plan.n_train;
    synth::Split sp = synth::generate_split(templates, n_train, plan.n_test, nn::mix_seed(seed, 0x5017E));
    return {std::move(sp.train), std::move(sp.test)};
}

std::vector<engine::Model> trained_models(const ExperimentPlan& plan, AblationMode mode, uint64_t seed,
                                          const Suite& suite) {
    engine::ModelConfig mc = plan.model;
    mc.ablation.mode = mode;
    const int groups = volume_groups(plan), per_group = objects_per_group(plan);
    std::vector<engine::Model> out;
    for (int g = 0; g < groups; ++g) {
        std::vector<synth::LabeledCase> data;
        if (plan.n_train == 1)
            data.push_back(suite.train[static_cast<size_t>(g)]);
        else
            data = suite.train;
        for (int o = 0; o < per_group; ++o) {
            const int index = g * per_group + o;
            engine::TrainConfig tc = plan.train;
            tc.seed = nn::mix_seed(seed, 200 + static_cast<uint64_t>(index));
            if (plan.setting == MultiLabelSetting::I_plus_I) {
                tc.object_sampling = engine::ObjectSampling::Single;
                tc.object_id = static_cast<uint8_t>(o + 1);
            } else {
                tc.object_sampling = engine::ObjectSampling::AllObjects;
            }
            std::optional<std::filesystem::path> path;
            if (plan.cache_dir) {
                path = *plan.cache_dir / ("model-" + cache_key(plan, mode, seed, index, tc) + ".sckp");
                if (std::filesystem::exists(*path) && std::filesystem::exists(path->string() + ".json")) {
                    out.push_back(engine::load_checkpoint(*path));
                    continue;
                }
            }
            const engine::Model init = engine::init_model(mc, nn::mix_seed(seed, 100 + static_cast<uint64_t>(index)));
            engine::Model trained{mc, engine::train(data, tc, init).params};
            if (path) {
                std::filesystem::create_directories(*plan.cache_dir);
                engine::save_checkpoint(trained, *path);
            }
            out.push_back(std::move(trained));
        }
    }
    return out;
}

std::vector<CaseScore> evaluate(const ExperimentPlan& plan, const std::vector<engine::Model>& models,
                                const std::vector<synth::LabeledCase>& test, InitialSliceRule rule) {
    std::vector<std::vector<CaseScore>> per_case(test.size());
    std::vector<std::exception_ptr> errors(test.size());
    auto work = [&](size_t i) {
        try {
            per_case[i] = evaluate_case(plan, models, test[i], static_cast<int64_t>(i), rule);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const size_t workers = std::min<size_t>(static_cast<size_t>(plan.workers), test.size());
    if (workers <= 1) {
        for (size_t i = 0; i < test.size(); ++i) work(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        for (size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (size_t i = next++; i < test.size(); i = next++) work(i);
            });
        for (auto& t : pool) t.join();
    }
    std::vector<CaseScore> out;
    for (size_t i = 0; i < test.size(); ++i) {
        if (errors[i]) std::rethrow_exception(errors[i]);
        for (auto& s : per_case[i]) out.push_back(s);
    }
    return out;
}

ComparisonReport run_ablation(const ExperimentPlan& plan) { return run_grid(plan, "ablation", false); }

ComparisonReport run_initial_slice_sweep(const ExperimentPlan& plan) {
    return run_grid(plan, "initial_slice_sweep", false);
}

ComparisonReport run_error_suite(const ExperimentPlan& plan) {
    for (auto k : {synth::ScenarioKind::AdjacentDistractor, synth::ScenarioKind::GapReappear,
                   synth::ScenarioKind::Intermittent})
        if (std::find(plan.kinds.begin(), plan.kinds.end(), k) == plan.kinds.end())
            throw Error(ErrorCode::ConfigInvalid,
                        "error suite needs AdjacentDistractor, GapReappear and Intermittent kinds");
    return run_grid(plan, "error_suite", true);
}

nlohmann::json to_json(const ComparisonReport& r) {
    nlohmann::json j;
    j["format"] = "slmprop-comparison-report";
    j["version"] = 1;
    j["experiment"] = r.experiment;
    j["plan"] = r.plan;
    j["assd_units"] = "physical";
    j["rows"] = nlohmann::json::array();
    for (const auto& row : r.rows) {
        nlohmann::json x;
        x["mode"] = attention::to_string(row.mode);
        x["rule"] = engine::to_string(row.rule);
        x["setting"] = to_string(row.setting);
        x["kind"] = row.kind;
        x["samples"] = row.samples;
        x["dsc_3d"] = ci_json(row.dsc_3d);
        x["assd_3d"] = opt_ci_json(row.assd_3d);
        x["assd_undefined"] = row.assd_undefined;
        x["present_dsc"] = ci_json(row.present_dsc);
        x["absent_dsc"] = opt_ci_json(row.absent_dsc);
        x["fnsr"] = ci_json(row.fnsr);
        x["pfnsr"] = ci_json(row.pfnsr);
        x["per_seed"] = nlohmann::json::array();
        for (const auto& s : row.per_seed)
            x["per_seed"].push_back({{"seed", s.seed},
                                     {"dsc_3d", s.dsc_3d},
                                     {"present_dsc", s.present_dsc},
                                     {"absent_dsc", s.absent_dsc ? nlohmann::json(*s.absent_dsc) : nlohmann::json(nullptr)},
                                     {"fnsr", s.fnsr},
                                     {"pfnsr", s.pfnsr}});
        x["delta_vs_baseline"] = row.delta_vs_baseline ? *row.delta_vs_baseline : nlohmann::json(nullptr);
        j["rows"].push_back(x);
    }
    return j;
}

namespace {

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

std::string fmt_ci(const metrics::ConfidenceInterval& ci) {
    return fmt(ci.mean) + " [" + fmt(ci.lo) + ", " + fmt(ci.hi) + "]";
}

std::string fmt_ci(const std::optional<metrics::ConfidenceInterval>& ci) { return ci ? fmt_ci(*ci) : "n/a"; }

std::string fmt_delta(const ComparisonRow& row, const char* key) {
    if (!row.delta_vs_baseline || row.delta_vs_baseline->at(key).is_null()) return "";
    const double d = row.delta_vs_baseline->at(key).get<double>();
    return (d >= 0 ? "+" : "") + fmt(d);
}

} // namespace

std::string to_markdown(const ComparisonReport& r) {
    std::ostringstream os;
    os << "# " << r.experiment << "\n\n";
    os << "| mode | rule | setting | kind | n | DSC | present DSC | absent DSC | ASSD | FNSR | PFNSR | dDSC | dAbsent | dPFNSR |\n";
    os << "|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& row : r.rows) {
        os << "| " << attention::to_string(row.mode) << " | " << engine::to_string(row.rule) << " | "
           << to_string(row.setting) << " | " << row.kind << " | " << row.samples << " | " << fmt_ci(row.dsc_3d) << " | "
           << fmt_ci(row.present_dsc) << " | " << fmt_ci(row.absent_dsc) << " | " << fmt_ci(row.assd_3d) << " | "
           << fmt_ci(row.fnsr) << " | " << fmt_ci(row.pfnsr) << " | " << fmt_delta(row, "dsc_3d") << " | "
           << fmt_delta(row, "absent_dsc") << " | " << fmt_delta(row, "pfnsr") << " |\n";
    }
    os << "\nIntervals: bootstrap 2.5% to 97.5% over (case, object) samples. ASSD in physical units; "
       << "volumes with an empty mask are left out of ASSD.\n";
    return os.str();
}

void write_report(const ComparisonReport& r, const std::filesystem::path& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / (stem + ".json"), std::ios::binary);
        if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + (dir / (stem + ".json")).string());
        os << to_json(r).dump(2) << '\n';
    }
    std::ofstream md(dir / (stem + ".md"), std::ios::binary);
    if (!md) throw Error(ErrorCode::IoFailure, "cannot write " + (dir / (stem + ".md")).string());
    md << to_markdown(r);
}

} // namespace slmprop::experiment
