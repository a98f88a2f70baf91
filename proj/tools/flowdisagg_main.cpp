#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "flowdisagg/commands.hpp"

using namespace flowdisagg;

int main(int argc, char** argv) {
    CLI::App app{"flowdisagg: conditional-flow VAE energy disaggregation"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, preset, out_dir, resume_path, ablate_suite = "conditioning";
    std::uint64_t seed = 0;
    bool nde_sqrt = false;

    app.add_option("--config", config_path, "run config JSON path");
    const auto* seed_opt = app.add_option("--seed", seed, "seed override");
    app.add_option("--preset", preset, "configuration preset")
        ->check(CLI::IsMember({"desk", "paper"}));
    const auto* out_opt = app.add_option("--out", out_dir, "output directory override");
    app.add_option("--resume", resume_path,
                   "checkpoint path (resume source for train, model for eval/sample)");
    app.add_flag("--nde-sqrt", nde_sqrt, "additionally report sqrt(NDE)");

    auto* train_cmd = app.add_subcommand("train", "fit the model and write checkpoints");
    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on the held-out slice");
    auto* sample_cmd = app.add_subcommand("sample", "export predictions with 95% intervals");
    auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation suite");
    ablate_cmd->add_option("suite", ablate_suite, "conditioning|stepflows");
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic CSV dataset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        RunConfig base = preset.empty() ? paper_preset() : preset_by_name(preset);
        RunConfig config =
            config_path.empty() ? base : load_run_config(config_path, base);
        if (seed_opt->count() > 0) config.seed = seed;
        if (out_opt->count() > 0) config.output_dir = out_dir;
        if (nde_sqrt) config.eval.nde_sqrt = true;

        if (train_cmd->parsed()) {
            return cmd_train(config, resume_path.empty()
                                         ? std::nullopt
                                         : std::optional<std::string>(resume_path));
        }
        if (eval_cmd->parsed() || sample_cmd->parsed()) {
            if (resume_path.empty()) {
                std::cerr << "error: " << (eval_cmd->parsed() ? "eval" : "sample")
                          << " needs --resume CHECKPOINT\n";
                return 2;
            }
            return eval_cmd->parsed() ? cmd_eval(config, resume_path)
                                      : cmd_sample(config, resume_path);
        }
        if (ablate_cmd->parsed()) return cmd_ablate(config, ablate_suite);
        if (synth_cmd->parsed()) return cmd_synth(config);
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
