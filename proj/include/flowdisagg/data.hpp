#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "flowdisagg/rng.hpp"
#include "flowdisagg/tensor.hpp"

namespace flowdisagg {

// Canonical aggregate channel order; also the set of legal CSV columns.
extern const std::vector<std::string> kQuantityNames;

// One meter's 1 Hz record. All quantity series share timestamps.size().
struct MeterSeries {
    std::string meter_id;
    std::vector<std::int64_t> timestamps;  // epoch seconds, strictly increasing
    std::map<std::string, std::vector<float>> quantities;

    std::int64_t length() const { return static_cast<std::int64_t>(timestamps.size()); }
};

struct ManifestEntry {
    std::string meter_id;
    std::string role;  // "aggregate" | "appliance"
    std::string display_name;
};

std::vector<ManifestEntry> load_manifest(const std::string& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);

// A 1 s hole in a meter file, filled forward during ingestion.
struct GapInfo {
    std::string meter_id;
    std::int64_t after_timestamp;
    std::int64_t missing;
};

struct IngestResult {
    std::vector<MeterSeries> meters;  // trimmed to the common timestamp range
    std::vector<GapInfo> gaps;
};

// Reads one CSV per meter (first column `timestamp`, remaining columns
// among kQuantityNames), forward-fills sub-range gaps, and aligns all
// meters on the intersection of their timestamp ranges.
IngestResult ingest_csv(std::span<const std::string> paths);

void write_csv(const MeterSeries& series, const std::string& path);

// Channel-major training arrays assembled from aligned meters: y carries
// every aggregate quantity, x the appliances' active power in manifest
// order.
struct Dataset {
    std::vector<std::vector<float>> aggregate;   // (C_in, L) in kQuantityNames order
    std::vector<std::vector<float>> appliances;  // (M, L) active power
    std::vector<std::string> appliance_names;
    std::int64_t length = 0;
};

Dataset assemble_dataset(const IngestResult& ingest, const std::vector<ManifestEntry>& manifest);

struct WindowSample {
    Tensor y;  // (C_in, T)
    Tensor x;  // (M, T)
    std::int64_t window_start = 0;
    bool normalized = false;
};

// Overlapping window grid: floor((L - T) / stride) + 1 windows.
std::vector<WindowSample> make_windows(const Dataset& data, std::int64_t window_len,
                                       std::int64_t stride);

// Per-channel mean/std, fitted on the training windows only.
struct NormStats {
    std::vector<double> y_mean, y_std;
    std::vector<double> x_mean, x_std;

    std::int64_t y_channels() const { return static_cast<std::int64_t>(y_mean.size()); }
    std::int64_t x_channels() const { return static_cast<std::int64_t>(x_mean.size()); }
};

NormStats fit_normalizer(std::span<const WindowSample> train_windows);
std::vector<WindowSample> apply_normalizer(const NormStats& stats,
                                           std::span<const WindowSample> windows);
std::vector<WindowSample> inverse_normalizer(const NormStats& stats,
                                             std::span<const WindowSample> windows);

// Maps a normalized per-appliance prediction (M, T) back to physical units.
Tensor denormalize_prediction(const NormStats& stats, const Tensor& x_hat);

// Contiguous-block fold assignment over window indices. The seed rotates
// which block carries which fold id; block boundaries stay put so
// overlapping windows never shuffle across folds.
struct FoldPlan {
    std::int64_t n_folds = 0;
    std::vector<std::int64_t> assignments;  // window index -> fold id, -1 = dropped

    std::vector<std::int64_t> fold_indices(std::int64_t fold) const;
};

FoldPlan plan_folds(std::int64_t n_windows, std::int64_t n_folds, std::uint64_t seed);

// Marks windows whose sample range crosses a fold boundary as dropped.
// Only does anything when stride < window_len (overlapping grids).
void drop_straddlers(FoldPlan& plan, std::int64_t window_len, std::int64_t stride);

struct HoldoutSplit {
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> test;  // the final contiguous block
};

HoldoutSplit holdout_split(std::int64_t n_windows, double fraction, std::int64_t window_len,
                           std::int64_t stride);

// Synthetic factory-like generator: each appliance is a random-telegraph
// on/off process times a drawn power level plus Gaussian noise; the
// aggregate sums them, adds its own noise, and derives the remaining
// electrical quantities deterministically.
struct SynthSpec {
    std::int64_t n_appliances = 3;
    std::int64_t length = 4096;
    std::uint64_t seed = 0;
    double noise_std = 0.02;
    double duty_lo = 0.2, duty_hi = 0.6;
    double power_lo = 0.5, power_hi = 2.0;

    void validate() const;
};

struct SynthResult {
    MeterSeries aggregate;
    std::vector<MeterSeries> appliances;
    std::vector<ManifestEntry> manifest;
    std::vector<float> noise_trace;  // aggregate-level noise, for reconstruction checks
};

SynthResult synth_dataset(const SynthSpec& spec);

// Builds the aggregate meter (all six quantities) from appliance active
// power plus an optional noise trace; split out of synth_dataset so the
// aggregate-consistency construction is testable on hand-built inputs.
MeterSeries derive_aggregate(const std::vector<MeterSeries>& appliances,
                             std::span<const float> noise);

}  // namespace flowdisagg
