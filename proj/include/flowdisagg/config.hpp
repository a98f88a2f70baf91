#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowdisagg/data.hpp"
#include "flowdisagg/metrics.hpp"
#include "flowdisagg/model.hpp"
#include "flowdisagg/train.hpp"

namespace flowdisagg {

// Data source and windowing. Exactly one of csv_paths / synth must be set.
struct DataConfig {
    std::vector<std::string> csv_paths;
    std::string manifest_path;
    std::optional<SynthSpec> synth;
    std::int64_t window_len = 256;
    std::int64_t stride = 256;
    double train_fraction = 0.8;  // leading share of windows used for training

    void validate() const;
};

struct RunConfig {
    DataConfig data;
    ModelConfig model;   // window/channel fields are resolved from the data
    TrainOptions train;  // batch_size 50, epochs 2000, lr 1e-3
    std::uint64_t seed = 0;
    EvalOptions eval;             // n_samples 20
    std::int64_t sample_n = 10;  // draws per window for the sample command
    std::string output_dir = "out";

    void validate() const;
};

RunConfig paper_preset();
RunConfig desk_preset();
RunConfig preset_by_name(const std::string& name);  // "desk" | "paper"

// JSON round-trip. Parsing overlays the document onto `base`; unknown keys
// are schema errors so typos cannot silently revert to defaults.
RunConfig parse_run_config(const std::string& json_text, const RunConfig& base);
RunConfig load_run_config(const std::string& path, const RunConfig& base);
std::string run_config_to_json(const RunConfig& config);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& json_text);

// Fills the data-derived model fields (window length, channel counts,
// latent length) from an assembled dataset, then validates.
void resolve_model_from_data(RunConfig& config, const Dataset& data,
                             std::vector<std::string>* warnings = nullptr);

// Writes <dir>/config.json atomically.
void write_resolved_config(const RunConfig& config, const std::string& dir);

}  // namespace flowdisagg
