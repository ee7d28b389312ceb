#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "slmprop/io/volume.hpp"

namespace slmprop::synth {

enum class ScenarioKind { SimpleBlob, AdjacentDistractor, GapReappear, Intermittent };

std::string_view to_string(ScenarioKind kind);
ScenarioKind scenario_kind_from_string(std::string_view s);

// Inclusive slice interval.
struct SliceRange {
    int64_t first = 0;
    int64_t last = 0;
    bool operator==(const SliceRange&) const = default;
};

struct ScenarioSpec {
    ScenarioKind kind = ScenarioKind::SimpleBlob;
    io::Dims dims{16, 32, 32};
    double radius_min = 4.0;
    double radius_max = 7.0;
    // Relative intensity gap between distractor and target, as a fraction of 255.
    double distractor_contrast = 0.05;
    std::vector<SliceRange> present_ranges{{4, 11}};
    uint64_t seed = 0;
    // Additional objects share the present ranges and occupy their own half of the slice.
    int num_objects = 1;
    // generate_split shifts every case's ranges by a uniform offset in [-jitter, jitter].
    int64_t range_jitter = 0;

    bool operator==(const ScenarioSpec&) const = default;
};

struct LabeledCase {
    io::Volume volume;
    io::MaskVolume mask;
    ScenarioSpec spec;
    // Voxels of the unlabeled look-alike structure (AdjacentDistractor only), as (z,y,x) indices.
    std::vector<int64_t> distractor_voxels;
};

// Throws SpecInvalid for out-of-bounds or overlapping ranges and bad radii/contrast.
void validate(const ScenarioSpec& spec);

// A spec with the kind's typical present ranges for the given dims.
ScenarioSpec default_spec(ScenarioKind kind, io::Dims dims, uint64_t seed);

LabeledCase generate_case(const ScenarioSpec& spec);

struct Split {
    std::vector<LabeledCase> train;
    std::vector<LabeledCase> test;
};

// Case i (train first, then test) gets seed mix_seed(seed, i); `templates` are cycled.
Split generate_split(const std::vector<ScenarioSpec>& templates, int n_train, int n_test, uint64_t seed);
Split generate_split(const ScenarioSpec& spec_template, int n_train, int n_test, uint64_t seed);

void to_json(nlohmann::json& j, const SliceRange& r);
void from_json(const nlohmann::json& j, SliceRange& r);
void to_json(nlohmann::json& j, const ScenarioSpec& s);
void from_json(const nlohmann::json& j, ScenarioSpec& s);

} // namespace slmprop::synth
