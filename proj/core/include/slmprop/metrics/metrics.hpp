#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "slmprop/io/volume.hpp"

namespace slmprop::metrics {

// 2|A∩B|/(|A|+|B|) over non-zero entries; two empty masks give 1.
double dsc(std::span<const uint8_t> a, std::span<const uint8_t> b);
// Binary masks of `object_id` in each volume.
double dsc(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id);

// Foreground voxels with a background 6-neighbour or on the array border, as (z,y,x) indices.
std::vector<int64_t> surface_voxels(std::span<const uint8_t> mask, const io::Dims& dims);

// Average symmetric surface distance in physical units; nullopt when either mask is empty.
std::optional<double> assd(std::span<const uint8_t> a, std::span<const uint8_t> b, const io::Dims& dims,
                           const io::Spacing& spacing);
std::optional<double> assd(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id);

struct SlicePartition {
    std::vector<std::pair<int64_t, double>> present;
    std::vector<std::pair<int64_t, double>> absent;
};

SlicePartition slice_dsc_partition(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id);

struct FalseNegativeRates {
    double fnsr = 0.0;
    double pfnsr = 0.0;
    int64_t present = 0;
    int64_t false_negative = 0;
    int64_t premature = 0;
};

// Premature misses: scanning from the first present slice forward (and from the last present
// slice backward) up to the first slice with any prediction, the present slices passed.
FalseNegativeRates fnsr_pfnsr(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id);

struct SavedEffort {
    double spv_saved = 0.0;
    double csr_saved = 0.0;
};

SavedEffort saved_effort(double spv_base, double spv_new, double csr_base, double csr_new);

struct EffortRow {
    double spv_base, spv_new, csr_base, csr_new;
};

// Mean of the per-row relative reductions.
SavedEffort average_saved_effort(const std::vector<EffortRow>& rows);

struct ConfidenceInterval {
    double mean = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    int resamples = 0;
    uint64_t seed = 0;
};

// Percentile bootstrap (2.5%, 97.5%) of the mean over resampled values; `mean` is the sample mean.
ConfidenceInterval bootstrap_ci(const std::vector<double>& values, int resamples = 1000, uint64_t seed = 0);

struct MetricsReport {
    uint8_t object_id = 1;
    double dsc_3d = 0.0;
    std::optional<double> assd_3d;
    SlicePartition slices;
    FalseNegativeRates fn;
    double present_dsc_mean = 0.0;
    std::optional<double> absent_dsc_mean;
};

MetricsReport compute_report(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id);

// Aggregate over volumes (one report each).
struct AggregateReport {
    int volumes = 0;
    ConfidenceInterval dsc_3d;
    std::optional<ConfidenceInterval> assd_3d;
    int assd_undefined = 0;
    ConfidenceInterval present_dsc;
    std::optional<ConfidenceInterval> absent_dsc;
    ConfidenceInterval fnsr;
    ConfidenceInterval pfnsr;
};

// Single-volume inputs get degenerate intervals (lo = hi = mean).
AggregateReport aggregate(const std::vector<MetricsReport>& reports, int resamples = 1000, uint64_t seed = 0);

nlohmann::json to_json(const MetricsReport& r);
nlohmann::json to_json(const ConfidenceInterval& ci);
nlohmann::json to_json(const AggregateReport& a);
// Top-level metrics document: {format, version, reports, aggregate|null}.
nlohmann::json to_document(const std::vector<MetricsReport>& reports, const std::optional<AggregateReport>& agg);
// One row per slice: volume,object_id,slice,gt_present,dsc (volume = index into `reports`)
std::string to_csv(const std::vector<MetricsReport>& reports);

} // namespace slmprop::metrics
