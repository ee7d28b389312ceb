#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slmprop/engine/engine.hpp"
#include "slmprop/metrics/metrics.hpp"
#include "slmprop/synth/scenario.hpp"

namespace slmprop::experiment {

// I+I: one model per object, objects inferred separately. M+I: one multi-object model,
// objects inferred separately. M+M: one multi-object model, objects inferred together.
enum class MultiLabelSetting { I_plus_I, M_plus_I, M_plus_M };

std::string_view to_string(MultiLabelSetting s);
MultiLabelSetting multi_label_setting_from_string(std::string_view s);

struct ExperimentPlan {
    std::vector<synth::ScenarioKind> kinds{synth::ScenarioKind::AdjacentDistractor, synth::ScenarioKind::GapReappear};
    io::Dims dims{16, 32, 32};
    int num_objects = 1;
    int64_t range_jitter = 2;
    // 1 selects the 1-Volume setting: `one_volume_models` models, one per training volume,
    // with per-case metrics averaged over them.
    int n_train = 5;
    int n_test = 20;
    int one_volume_models = 5;
    std::vector<attention::AblationMode> modes{attention::AblationMode::M_O, attention::AblationMode::M_O_plus_M_R1};
    std::vector<engine::InitialSliceRule> rules{engine::InitialSliceRule::M_middle};
    MultiLabelSetting setting = MultiLabelSetting::I_plus_I;
    std::vector<uint64_t> seeds{1, 2, 3};
    engine::ModelConfig model = engine::desk_config();
    engine::TrainConfig train = desk_train_config();
    engine::InferenceOptions inference;
    int bootstrap_resamples = 1000;
    // Trained checkpoints are stored and reused here when set.
    std::optional<std::filesystem::path> cache_dir;
    int workers = 1;

    static engine::TrainConfig desk_train_config();
    void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentPlan& p);
void from_json(const nlohmann::json& j, ExperimentPlan& p);

// Scalar metrics of one (case, object) evaluation; Q-rule runs are averaged into one score.
struct CaseScore {
    int64_t case_index = 0;
    synth::ScenarioKind kind = synth::ScenarioKind::SimpleBlob;
    uint8_t object_id = 1;
    double dsc_3d = 0.0;
    std::optional<double> assd_3d;
    double present_dsc = 0.0;
    std::optional<double> absent_dsc;
    double fnsr = 0.0;
    double pfnsr = 0.0;
    int propagations = 0;
};

struct SeedSummary {
    uint64_t seed = 0;
    double dsc_3d = 0.0;
    double present_dsc = 0.0;
    std::optional<double> absent_dsc;
    double fnsr = 0.0;
    double pfnsr = 0.0;
};

struct ComparisonRow {
    attention::AblationMode mode = attention::AblationMode::M_O;
    engine::InitialSliceRule rule = engine::InitialSliceRule::M_middle;
    MultiLabelSetting setting = MultiLabelSetting::I_plus_I;
    std::string kind = "all";
    int samples = 0;
    metrics::ConfidenceInterval dsc_3d;
    std::optional<metrics::ConfidenceInterval> assd_3d;
    int assd_undefined = 0;
    metrics::ConfidenceInterval present_dsc;
    std::optional<metrics::ConfidenceInterval> absent_dsc;
    metrics::ConfidenceInterval fnsr;
    metrics::ConfidenceInterval pfnsr;
    std::vector<SeedSummary> per_seed;
    // Mean differences against the M_O row with the same rule, setting and kind.
    std::optional<nlohmann::json> delta_vs_baseline;
};

struct ComparisonReport {
    std::string experiment;
    nlohmann::json plan;
    std::vector<ComparisonRow> rows;

    const ComparisonRow* find(attention::AblationMode mode, engine::InitialSliceRule rule,
                              std::string_view kind = "all") const;
};

nlohmann::json to_json(const ComparisonReport& r);
std::string to_markdown(const ComparisonReport& r);
void write_report(const ComparisonReport& r, const std::filesystem::path& dir, const std::string& stem);

struct Suite {
    std::vector<synth::LabeledCase> train;
    std::vector<synth::LabeledCase> test;
};

// Train and test cases cycle through the plan's kinds.
Suite build_suite(const ExperimentPlan& plan, uint64_t seed);

// Scores of every test case under `rule` for already trained models (one per training
// volume in the 1-Volume setting, one per object for I+I).
std::vector<CaseScore> evaluate(const ExperimentPlan& plan, const std::vector<engine::Model>& models,
                                const std::vector<synth::LabeledCase>& test, engine::InitialSliceRule rule);

// Models for one (mode, seed), trained or read from the cache.
std::vector<engine::Model> trained_models(const ExperimentPlan& plan, attention::AblationMode mode, uint64_t seed,
                                          const Suite& suite);

ComparisonReport run_ablation(const ExperimentPlan& plan);
// Every rule is evaluated on the same trained models.
ComparisonReport run_initial_slice_sweep(const ExperimentPlan& plan);
// Rows per scenario kind plus the pooled row.
ComparisonReport run_error_suite(const ExperimentPlan& plan);

} // namespace slmprop::experiment
