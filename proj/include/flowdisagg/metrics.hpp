#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowdisagg/data.hpp"
#include "flowdisagg/model.hpp"
#include "flowdisagg/rng.hpp"
#include "flowdisagg/train.hpp"

namespace flowdisagg {

// Normalized disaggregation error: sum (x - x_hat)^2 / sum x^2.
double nde(std::span<const double> x, std::span<const double> x_hat);

// Signal aggregated error: |sum x_hat - sum x| / sum x.
double sae(std::span<const double> x, std::span<const double> x_hat);

struct ApplianceMetrics {
    double nde = 0.0;
    double sae = 0.0;
    std::optional<double> nde_sqrt;  // populated only when requested
};

struct MetricsReport {
    std::vector<std::pair<std::string, ApplianceMetrics>> per_appliance;  // manifest order
    ApplianceMetrics total;     // column sums over included appliances
    ApplianceMetrics averaged;  // total / included count
    std::vector<std::string> excluded;  // appliances with undefined metrics
    std::vector<std::string> warnings;
};

struct EvalOptions {
    std::int64_t n_samples = 20;
    std::uint64_t seed = 0;
    bool nde_sqrt = false;
};

// Produces a normalized (M, T) prediction for one window.
using WindowPredictor = std::function<Tensor(const WindowSample&, std::int64_t, Rng&)>;

MetricsReport evaluate_windows(const WindowPredictor& predictor,
                               std::span<const WindowSample> test_windows,
                               const NormStats& stats,
                               std::span<const std::string> appliance_names,
                               const EvalOptions& options);

MetricsReport evaluate(PfvaeModel& model, std::span<const WindowSample> test_windows,
                       const NormStats& stats, std::span<const std::string> appliance_names,
                       const EvalOptions& options);

struct CvSummary {
    MetricsReport mean;
    MetricsReport stddev;  // sample std (n-1); zero when a single fold
    std::int64_t n_folds = 0;
};

struct CvResult {
    std::vector<MetricsReport> folds;
    CvSummary summary;
};

// Element-wise mean and sample std (n-1) across fold reports.
CvSummary summarize_folds(const std::vector<MetricsReport>& folds);

// One train/evaluate cycle per fold over raw (unnormalized) windows;
// normalization stats are refitted on each fold's training portion.
CvResult run_cv(std::span<const WindowSample> raw_windows, const ModelConfig& model_config,
                const TrainOptions& train_options,
                std::span<const std::string> appliance_names, const FoldPlan& plan,
                const EvalOptions& eval_options, std::uint64_t seed);

struct AblationRunSpec {
    std::string variant;  // complete | simple_affine | standard_normal_base
    std::optional<std::int64_t> step_flow_count;

    void validate() const;  // exactly one axis set
    std::string label() const;
    ModelConfig apply(const ModelConfig& base) const;
};

AblationRunSpec conditioning_spec(const std::string& variant);
AblationRunSpec stepflow_spec(std::int64_t count);

struct AblationResult {
    std::vector<std::string> labels;
    std::vector<MetricsReport> reports;
    std::vector<std::int64_t> parameter_counts;
    std::uint64_t seed = 0;
    std::int64_t n_train = 0;
    std::int64_t n_test = 0;
};

// Shared 80/20 holdout and shared seed across all specs. The two-argument
// form runs the three conditioning variants.
AblationResult run_ablation_suite(std::span<const WindowSample> raw_windows,
                                  const ModelConfig& base_config,
                                  const TrainOptions& train_options,
                                  std::span<const std::string> appliance_names,
                                  const EvalOptions& eval_options, std::uint64_t seed,
                                  std::int64_t window_len, std::int64_t stride);

AblationResult run_ablation_suite_with(std::span<const WindowSample> raw_windows,
                                       const ModelConfig& base_config,
                                       const TrainOptions& train_options,
                                       std::span<const std::string> appliance_names,
                                       const EvalOptions& eval_options, std::uint64_t seed,
                                       std::int64_t window_len, std::int64_t stride,
                                       std::span<const AblationRunSpec> specs);

// Report emission: canonical JSON text plus an aligned-text table with
// per-machine rows and TOTAL / AVERAGED rows.
std::string report_to_json(const MetricsReport& report);
std::string report_to_table(const MetricsReport& report);

std::string cv_to_json(const CvResult& result);
std::string cv_to_table(const CvResult& result);

std::string ablation_to_json(const AblationResult& result);
std::string ablation_to_table(const AblationResult& result);

}  // namespace flowdisagg
