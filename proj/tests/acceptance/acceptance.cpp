#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bank_oracle.hpp"
#include "grad_check.hpp"
#include "metric_oracles.hpp"
#include "model_checks.hpp"
#include "single_bank_reference.hpp"
#include "slmprop/engine/engine.hpp"
#include "slmprop/experiment/experiment.hpp"
#include "slmprop/metrics/metrics.hpp"

using namespace slmprop;
namespace fs = std::filesystem;
using attention::AblationMode;
using engine::InitialSliceRule;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Options {
    fs::path work;
    uint64_t seed = 1;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome bank_semantics(const Options&) {
    auto t0 = std::chrono::steady_clock::now();
    auto st = testsupport::run_bank_property(10000, 2024);
    const double secs = seconds_since(t0);
    return {st.sequences == 10000 && st.mismatches == 0 && st.conditional_evictions == 0 && secs < 10.0,
            fmt("%d sequences, %d mismatches, %d conditional evictions, %.2fs (limit 10s)", st.sequences,
                st.mismatches, st.conditional_evictions, secs)};
}

Outcome gradients(const Options&) {
    using nn::Tape;
    using nn::Tensor;
    using nn::Var;
    auto t0 = std::chrono::steady_clock::now();
    nn::Rng rng(99);
    auto rt = [&](nn::Shape s) { return testsupport::random_tensor(std::move(s), rng); };
    std::vector<std::pair<std::string, testsupport::GradCheckResult>> results;
    results.emplace_back("conv2d", testsupport::grad_check(
                                       [](Tape&, const std::vector<Var>& v) { return nn::conv2d(v[0], v[1], v[2], {2, 1, 1}); },
                                       {rt({2, 3, 6, 5}), rt({2, 3, 3, 3}), rt({2})}));
    results.emplace_back("conv2d_dilated", testsupport::grad_check(
                                               [](Tape&, const std::vector<Var>& v) { return nn::conv2d(v[0], v[1], v[2], {1, 3, 2}); },
                                               {rt({1, 2, 7, 7}), rt({2, 1, 7, 7}), rt({2})}));
    results.emplace_back("layer_norm", testsupport::grad_check(
                                           [](Tape&, const std::vector<Var>& v) { return nn::layer_norm(v[0], v[1], v[2]); },
                                           {rt({4, 6}), rt({6}), rt({6})}));
    results.emplace_back("mlp2", testsupport::grad_check(
                                     [](Tape&, const std::vector<Var>& v) { return nn::mlp2(v[0], v[1], v[2], v[3], v[4]); },
                                     {rt({2, 3, 4}), rt({16, 4}), rt({16}), rt({4, 16}), rt({4})}));
    results.emplace_back("cross_attention",
                         testsupport::grad_check(
                             [](Tape&, const std::vector<Var>& v) {
                                 nn::AttentionWeights w{v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]};
                                 return nn::cross_attention(v[0], v[1], v[2], w, 2);
                             },
                             {rt({1, 3, 4}), rt({1, 5, 4}), rt({1, 5, 4}), rt({4, 4}), rt({4}), rt({4, 4}), rt({4}),
                              rt({4, 4}), rt({4}), rt({4, 4}), rt({4})}));
    results.emplace_back("fuse", testsupport::fuse_grad_check(5, false));
    results.emplace_back("fuse_projection", testsupport::fuse_grad_check(5, true));
    for (auto m : {AblationMode::M_O, AblationMode::M_R7, AblationMode::M_R1, AblationMode::M_O_plus_M_R7,
                   AblationMode::M_O_plus_M_R1})
        results.emplace_back("condition_frame/" + std::string(attention::to_string(m)),
                             testsupport::condition_frame_grad_check(m, 8, true));
    const double secs = seconds_since(t0);
    double worst = 0.0;
    std::string worst_name;
    bool nonzero = true;
    for (const auto& [name, r] : results) {
        if (r.max_rel_error >= worst) worst = r.max_rel_error, worst_name = name;
        nonzero = nonzero && r.max_abs_grad > 0.0;
    }
    return {worst < 1e-4 && nonzero && secs < 60.0,
            fmt("%zu checks, max rel error %.3g (%s), %.1fs (limit 1e-4, 60s)", results.size(), worst,
                worst_name.c_str(), secs)};
}

Outcome fuser_identity(const Options&) {
    const double err = testsupport::fuser_identity_error(100, 3);
    return {err <= 1e-12, fmt("max |fuse(a,b) - (a+b)| over 100 inputs = %.3g (limit 1e-12)", err)};
}

Outcome single_bank(const Options&) {
    auto run = testsupport::single_bank_equivalence(50, 21);
    size_t first_diff = run.engine.size();
    for (size_t i = 0; i < std::min(run.engine.size(), run.reference.size()); ++i)
        if (run.engine[i] != run.reference[i]) {
            first_diff = i;
            break;
        }
    const bool same = run.engine.size() == 50 && run.engine == run.reference;
    return {same, same ? fmt("50 loss values bit-identical, final %.17g", run.engine.back())
                       : fmt("trajectories diverge at step %zu", first_diff)};
}

Outcome metrics_oracles(const Options&) {
    auto t0 = std::chrono::steady_clock::now();
    auto st = testsupport::run_metric_trials(1000, 11, 16);
    const double secs = seconds_since(t0);
    const bool oracles = st.trials == 1000 && st.dsc_mismatch == 0 && st.assd_mismatch == 0 && st.fn_mismatch == 0 &&
                         st.symmetry_failures == 0 && st.ordering_failures == 0;

    const auto kidney = metrics::saved_effort(342.05, 203.40, 0.23142, 0.17128);
    const auto femur = metrics::saved_effort(515.10, 21.93, 0.42191, 0.01587);
    const double kidney_err = std::abs(kidney.spv_saved - (342.05 - 203.40) / 342.05);
    const double femur_err = std::abs(femur.spv_saved - (515.10 - 21.93) / 515.10);
    const auto avg = metrics::average_saved_effort({{342.05, 203.40, 0.23142, 0.17128},
                                                    {515.10, 21.93, 0.42191, 0.01587},
                                                    {134.05, 96.70, 0.44371, 0.36755}});
    const double spv_gap = std::abs(avg.spv_saved - 0.60575), csr_gap = std::abs(avg.csr_saved - 0.53574);
    const bool rows = kidney_err <= 1e-6 && femur_err <= 1e-6;
    const bool averages = spv_gap <= 1e-3 && csr_gap <= 1e-3;
    return {oracles && rows && averages,
            fmt("oracles %d trials (dsc %d, assd %d, fnsr/pfnsr %d mismatches, %d symmetry/ordering failures, %.1fs); kidney spv err %.2g, femur "
                "spv err %.2g (limit 1e-6); six-row average spv %.5f vs 0.60575, csr %.5f vs 0.53574 (limit 1e-3)",
                st.trials, st.dsc_mismatch, st.assd_mismatch, st.fn_mismatch,
                st.symmetry_failures + st.ordering_failures, secs, kidney_err, femur_err,
                avg.spv_saved, avg.csr_saved)};
}

Outcome trainability(const Options& o) {
    auto t0 = std::chrono::steady_clock::now();
    auto c = synth::generate_case(synth::default_spec(synth::ScenarioKind::SimpleBlob, {16, 32, 32}, o.seed));
    engine::Model model = engine::init_model(engine::desk_config(), o.seed);
    engine::TrainConfig tc = experiment::ExperimentPlan::desk_train_config();
    tc.epochs = 300;
    tc.seed = o.seed;
    tc.augment_dihedral = false;
    auto r = engine::train({c}, tc, model);
    engine::Model trained{model.config, r.params};
    const int64_t cond = engine::select_initial_slice(c.mask, 1, InitialSliceRule::M_middle)[0];
    auto pr = engine::propagate(trained, c.volume, c.mask.object_slice(cond, 1), cond);
    auto pred = engine::to_mask_volume(pr, 1, c.mask.dims(), c.mask.spacing());
    auto part = metrics::slice_dsc_partition(pred, c.mask, 1);
    double sum = 0.0;
    for (const auto& [z, d] : part.present) sum += d;
    for (const auto& [z, d] : part.absent) sum += d;
    const double mean = sum / static_cast<double>(part.present.size() + part.absent.size());
    const double secs = seconds_since(t0);
    return {r.losses.size() == 300 && mean >= 0.95 && secs < 600.0,
            fmt("%zu steps, mean slice DSC %.4f, loss %.3f -> %.3f, %.0fs (limits 0.95, 600s)", r.losses.size(), mean,
                r.losses.front(), r.losses.back(), secs)};
}

experiment::ExperimentPlan suite_plan(const Options& o) {
    experiment::ExperimentPlan p;
    p.n_train = 5;
    p.n_test = 20;
    p.seeds = {o.seed, o.seed + 1, o.seed + 2};
    p.cache_dir = o.work / "cache";
    return p;
}

double seed_mean(const experiment::ComparisonRow& row, bool absent) {
    double s = 0.0;
    for (const auto& ps : row.per_seed) s += absent ? ps.absent_dsc.value_or(std::nan("")) : ps.pfnsr;
    return s / static_cast<double>(row.per_seed.size());
}

Outcome directional(const Options& o) {
    auto t0 = std::chrono::steady_clock::now();
    auto plan = suite_plan(o);
    auto report = experiment::run_ablation(plan);
    experiment::write_report(report, o.work, "ablation");
    const double secs = seconds_since(t0);
    const auto* base = report.find(AblationMode::M_O, InitialSliceRule::M_middle);
    const auto* dual = report.find(AblationMode::M_O_plus_M_R1, InitialSliceRule::M_middle);
    if (!base || !dual) return {false, "missing rows"};
    const double ab = seed_mean(*base, true), ad = seed_mean(*dual, true);
    const double pb = seed_mean(*base, false), pd = seed_mean(*dual, false);
    const bool pass = ad - ab >= 0.05 && pd <= pb && secs < 7200.0;
    return {pass, fmt("absent-slice DSC M_O %.4f, M_O_plus_M_R1 %.4f (delta %+.4f, need >= 0.05); PFNSR %.4f vs %.4f "
                      "(need <=); %.0fs (limit 7200s)",
                      ab, ad, ad - ab, pb, pd, secs)};
}

Outcome initial_slice(const Options& o) {
    auto t0 = std::chrono::steady_clock::now();
    auto plan = suite_plan(o);
    plan.rules = {InitialSliceRule::M_middle, InitialSliceRule::L_largest, InitialSliceRule::Q_quarters};
    auto report = experiment::run_initial_slice_sweep(plan);
    experiment::write_report(report, o.work, "initial_slice_sweep");
    const double secs = seconds_since(t0);
    bool pass = true;
    std::ostringstream d;
    for (auto mode : plan.modes) {
        double lo = 1e9, hi = -1e9;
        for (auto rule : plan.rules) {
            const auto* row = report.find(mode, rule);
            if (!row) return {false, "missing rows"};
            lo = std::min(lo, row->dsc_3d.mean);
            hi = std::max(hi, row->dsc_3d.mean);
        }
        pass = pass && hi - lo <= 0.1;
        d << attention::to_string(mode) << " spread " << fmt("%.4f", hi - lo) << "; ";
    }
    for (auto rule : plan.rules) {
        const double b = report.find(AblationMode::M_O, rule)->dsc_3d.mean;
        const double m = report.find(AblationMode::M_O_plus_M_R1, rule)->dsc_3d.mean;
        pass = pass && m > b;
        d << engine::to_string(rule) << fmt(" dual %.4f vs M_O %.4f; ", m, b);
    }
    d << fmt("%.0fs (limits spread <= 0.1, dual > M_O under every rule)", secs);
    return {pass, d.str()};
}

int shell(const std::string& cmd) { return std::system(cmd.c_str()); }

Outcome determinism(const Options& o) {
    const fs::path cli = SLMPROP_CLI_PATH;
    const fs::path d = o.work / "cli";
    fs::remove_all(d);
    fs::create_directories(d);
    auto put = [&](const std::string& name, const nlohmann::json& j) {
        std::ofstream(d / name) << j.dump(2);
        return name;
    };
    const nlohmann::json tiny_model = {{"backbone", {{"input_res", {16, 16}}, {"feat_channels", 8}, {"decoder_hidden", 8}}},
                                       {"attention", {{"num_blocks", 1}, {"heads", 2}}},
                                       {"fuser", {{"expansion", 1}, {"num_convnext_blocks", 1}}}};
    const nlohmann::json plan = {{"dims", {12, 16, 16}}, {"n_train", 2},        {"n_test", 2},
                                 {"seeds", {1}},         {"model", tiny_model}, {"train", {{"epochs", 2}, {"seq_len", 6}}},
                                 {"rules", {"M", "Q"}},  {"bootstrap_resamples", 50}};
    nlohmann::json suite = plan;
    suite["kinds"] = {"AdjacentDistractor", "GapReappear", "Intermittent"};
    suite["dims"] = {16, 16, 16};
    suite["n_test"] = 3;
    struct Step {
        std::string cmd, config, report;
        nlohmann::json body;
    };
    const std::vector<Step> steps = {
        {"synth", "synth.json", "manifest.json", {{"dims", {12, 16, 16}}, {"n_train", 2}, {"n_test", 2}}},
        {"train", "train.json", "train_report.json",
         {{"manifest", "synth_a/manifest.json"}, {"mode", "M_O_plus_M_R1"}, {"model", tiny_model},
          {"train", {{"epochs", 2}, {"seq_len", 6}}}}},
        {"propagate", "prop.json", "propagate_report.json",
         {{"checkpoint", "train_a/model.sckp"}, {"volume", "synth_a/test_000.svol"},
          {"prompt", "synth_a/test_000.smsk"}, {"rule", "Q"}}},
        {"metrics", "met.json", "metrics.json",
         {{"pairs", {{{"gt", "synth_a/test_000.smsk"}, {"pred", "propagate_a/pred.smsk"}}}},
          {"bootstrap_resamples", 100}}},
        {"ablate", "plan.json", "ablation.json", plan},
        {"sweep-init", "plan.json", "initial_slice_sweep.json", plan},
        {"error-suite", "suite.json", "error_suite.json", suite},
    };
    std::vector<std::string> bad;
    for (const auto& s : steps) {
        put(s.config, s.body);
        std::string bytes[2];
        for (int k = 0; k < 2; ++k) {
            const std::string out = s.cmd + (k ? "_b" : "_a");
            const std::string cmd = "cd '" + d.string() + "' && env -u SLMPROP_CACHE '" + cli.string() + "' " + s.cmd +
                                    " --config " + s.config + " --seed 7 --out " + out + " >/dev/null 2>&1";
            if (shell(cmd) != 0) {
                bad.push_back(s.cmd + " failed");
                break;
            }
            std::ifstream in(d / out / s.report, std::ios::binary);
            bytes[k].assign(std::istreambuf_iterator<char>(in), {});
        }
        if (bytes[0].empty() || bytes[0] != bytes[1]) bad.push_back(s.cmd);
    }
    std::string detail = fmt("%zu commands rerun with seed 7", steps.size());
    if (!bad.empty()) {
        detail += "; differing or failing:";
        for (const auto& b : bad) detail += " " + b;
    } else {
        detail += ", all reports byte-identical";
    }
    return {bad.empty(), detail};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"slmprop acceptance checks"};
    Options o;
    std::string work = (fs::temp_directory_path() / "slmprop_acceptance").string();
    std::vector<std::string> only;
    bool strict = false, list = false;
    app.add_option("--work", work, "Scratch directory; trained suite models are cached under it");
    app.add_option("--seed", o.seed, "Base seed");
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    app.add_flag("--strict", strict, "Exit 1 when any criterion fails");
    app.add_flag("--list", list, "List criteria");
    CLI11_PARSE(app, argc, argv);
    o.work = work;
    fs::create_directories(o.work);

    const std::vector<std::pair<std::string, std::function<Outcome(const Options&)>>> criteria = {
        {"memory_bank_semantics", bank_semantics},
        {"gradient_correctness", gradients},
        {"fuser_identity_at_init", fuser_identity},
        {"single_bank_equivalence", single_bank},
        {"metrics_oracles", metrics_oracles},
        {"trainability_gate", trainability},
        {"directional_ablation", directional},
        {"initial_slice_sweep", initial_slice},
        {"cli_determinism", determinism},
    };
    if (list) {
        for (const auto& [name, fn] : criteria) std::cout << name << "\n";
        return 0;
    }
    const std::set<std::string> selected(only.begin(), only.end());
    std::ofstream log(o.work / "acceptance.txt");
    int failed = 0;
    for (const auto& [name, fn] : criteria) {
        if (!selected.empty() && !selected.count(name)) continue;
        Outcome r;
        try {
            r = fn(o);
        } catch (const std::exception& e) {
            r = {false, std::string("exception: ") + e.what()};
        }
        failed += !r.pass;
        const std::string line = (r.pass ? "PASS " : "FAIL ") + name + ": " + r.detail;
        std::cout << line << std::endl;
        log << line << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
    return strict && failed ? 1 : 0;
}
