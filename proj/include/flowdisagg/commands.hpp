#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowdisagg/config.hpp"

namespace flowdisagg {

struct LoadedData {
    Dataset dataset;
    std::vector<GapInfo> gaps;
};

// Materializes the configured source: in-memory synthesis or CSV ingestion.
LoadedData load_configured_data(const DataConfig& config);

// Subcommand bodies. Each validates its inputs, writes its outputs plus the
// resolved config into config.output_dir, and returns a process exit code.
int cmd_train(RunConfig config, const std::optional<std::string>& resume_path);
int cmd_eval(RunConfig config, const std::string& checkpoint_path);
int cmd_sample(RunConfig config, const std::string& checkpoint_path);
int cmd_ablate(RunConfig config, const std::string& suite);
int cmd_synth(RunConfig config);

}  // namespace flowdisagg
