#include "flowdisagg/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "flowdisagg/checkpoint.hpp"
#include "flowdisagg/exceptions.hpp"
#include "flowdisagg/io_util.hpp"
#include "flowdisagg/metrics.hpp"
#include "flowdisagg/train.hpp"

namespace flowdisagg {

namespace {

namespace fs = std::filesystem;

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

std::string sanitize(const std::string& name) {
    std::string out;
    for (const char c : name) {
        out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    }
    return out;
}

std::string format_f64(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void report_gaps(const std::vector<GapInfo>& gaps) {
    for (const GapInfo& g : gaps) {
        std::cerr << "warning: meter " << g.meter_id << " has " << g.missing
                  << " forward-filled samples after t=" << g.after_timestamp << "\n";
    }
}

struct SplitWindows {
    std::vector<WindowSample> train_raw, test_raw;
};

SplitWindows split_windows(const std::vector<WindowSample>& windows, const DataConfig& data) {
    const HoldoutSplit split = holdout_split(static_cast<std::int64_t>(windows.size()),
                                             data.train_fraction, data.window_len, data.stride);
    SplitWindows out;
    for (const std::int64_t i : split.train) {
        out.train_raw.push_back(windows[static_cast<std::size_t>(i)]);
    }
    for (const std::int64_t i : split.test) {
        out.test_raw.push_back(windows[static_cast<std::size_t>(i)]);
    }
    return out;
}

// Checkpoint-vs-data consistency, checked before any model work.
void check_checkpoint_against_data(const LoadedCheckpoint& ckpt, const Dataset& data,
                                   const DataConfig& config) {
    const std::int64_t c_in = static_cast<std::int64_t>(data.aggregate.size());
    const std::int64_t m = static_cast<std::int64_t>(data.appliances.size());
    if (ckpt.config.n_input_channels != c_in || ckpt.config.n_appliances != m) {
        throw SchemaError("checkpoint expects " + std::to_string(ckpt.config.n_input_channels) +
                          " input channels and " + std::to_string(ckpt.config.n_appliances) +
                          " appliances, but the dataset has " + std::to_string(c_in) + " and " +
                          std::to_string(m));
    }
    if (ckpt.config.window_len != config.window_len) {
        throw SchemaError("checkpoint window length " + std::to_string(ckpt.config.window_len) +
                          " does not match configured window length " +
                          std::to_string(config.window_len));
    }
}

std::string loss_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream out;
    out << "epoch,total,reconstruction,prior\n";
    for (const EpochRecord& r : history) {
        out << r.epoch << ',' << format_f64(r.total) << ',' << format_f64(r.reconstruction)
            << ',' << format_f64(r.prior) << '\n';
    }
    return out.str();
}

std::string steps_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream out;
    out << "epoch,step,total\n";
    for (const EpochRecord& r : history) {
        for (std::size_t s = 0; s < r.step_totals.size(); ++s) {
            out << r.epoch << ',' << (s + 1) << ',' << format_f64(r.step_totals[s]) << '\n';
        }
    }
    return out.str();
}

}  // namespace

LoadedData load_configured_data(const DataConfig& config) {
    config.validate();
    LoadedData out;
    if (config.synth.has_value()) {
        const SynthResult synth = synth_dataset(*config.synth);
        IngestResult ingest;
        ingest.meters.push_back(synth.aggregate);
        for (const MeterSeries& a : synth.appliances) ingest.meters.push_back(a);
        out.dataset = assemble_dataset(ingest, synth.manifest);
    } else {
        IngestResult ingest = ingest_csv(config.csv_paths);
        out.gaps = std::move(ingest.gaps);
        out.dataset = assemble_dataset(ingest, load_manifest(config.manifest_path));
    }
    return out;
}

int cmd_train(RunConfig config, const std::optional<std::string>& resume_path) {
    config.validate();
    const LoadedData data = load_configured_data(config.data);
    report_gaps(data.gaps);
    std::vector<std::string> warnings;
    resolve_model_from_data(config, data.dataset, &warnings);
    for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";

    const auto windows = make_windows(data.dataset, config.data.window_len, config.data.stride);
    SplitWindows split = split_windows(windows, config.data);

    ensure_dir(config.output_dir);
    write_resolved_config(config, config.output_dir);
    const std::string ckpt_path = join(config.output_dir, "checkpoint.pfvae");

    Rng rng(config.seed);
    PfvaeModel model(config.model, rng);
    NormStats stats;
    std::optional<LoadedCheckpoint> resume;
    if (resume_path.has_value()) {
        resume = load_checkpoint(*resume_path);
        if (!(resume->config == config.model)) {
            throw ContractError(
                "cmd_train: resume checkpoint was trained under a different model config");
        }
        stats = resume->stats;
        restore_model(*resume, model);
    } else {
        stats = fit_normalizer(split.train_raw);
    }

    Trainer trainer(model, apply_normalizer(stats, split.train_raw), config.train, rng);
    if (resume.has_value()) {
        trainer.rng().load_state(resume->rng_state);
        trainer.set_epoch(resume->epoch);
        restore_adam(*resume, trainer.optimizer());
        std::cout << "resuming from epoch " << resume->epoch << "\n";
    }

    std::vector<EpochRecord> history;
    std::string abort_reason;
    while (trainer.epoch() < config.train.epochs) {
        try {
            history.push_back(trainer.run_epoch());
        } catch (const NumericError& e) {
            abort_reason = e.what();
            break;
        }
        save_checkpoint(ckpt_path, model, stats, trainer.rng().save_state(), trainer.epoch(),
                        &trainer.optimizer());
    }
    atomic_write_file(join(config.output_dir, "loss.csv"), loss_csv(history));
    atomic_write_file(join(config.output_dir, "steps.csv"), steps_csv(history));

    if (!abort_reason.empty()) {
        std::cerr << "error: aborting training: " << abort_reason
                  << " (last good checkpoint retained)\n";
        return 1;
    }
    if (!history.empty()) {
        std::cout << "trained " << history.size() << " epochs, final loss "
                  << format_f64(history.back().total) << "\n";
    }
    std::cout << "checkpoint: " << ckpt_path << "\n";
    return 0;
}

int cmd_eval(RunConfig config, const std::string& checkpoint_path) {
    config.validate();
    const LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    const LoadedData data = load_configured_data(config.data);
    report_gaps(data.gaps);
    check_checkpoint_against_data(ckpt, data.dataset, config.data);
    config.model = ckpt.config;

    const auto windows = make_windows(data.dataset, config.data.window_len, config.data.stride);
    SplitWindows split = split_windows(windows, config.data);

    Rng rng(config.seed);
    PfvaeModel model(ckpt.config, rng);
    restore_model(ckpt, model);

    const auto test = apply_normalizer(ckpt.stats, split.test_raw);
    EvalOptions options = config.eval;
    options.seed = config.seed;
    const MetricsReport report =
        evaluate(model, test, ckpt.stats, data.dataset.appliance_names, options);

    ensure_dir(config.output_dir);
    write_resolved_config(config, config.output_dir);
    atomic_write_file(join(config.output_dir, "metrics.json"), report_to_json(report));
    const std::string table = report_to_table(report);
    atomic_write_file(join(config.output_dir, "metrics.txt"), table);
    std::cout << table;
    return 0;
}

int cmd_sample(RunConfig config, const std::string& checkpoint_path) {
    config.validate();
    const LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    const LoadedData data = load_configured_data(config.data);
    report_gaps(data.gaps);
    check_checkpoint_against_data(ckpt, data.dataset, config.data);
    config.model = ckpt.config;

    const auto windows = make_windows(data.dataset, config.data.window_len, config.data.stride);
    SplitWindows split = split_windows(windows, config.data);

    Rng rng(config.seed);
    PfvaeModel model(ckpt.config, rng);
    restore_model(ckpt, model);

    const auto test = apply_normalizer(ckpt.stats, split.test_raw);
    const std::int64_t m = ckpt.config.n_appliances;
    const std::int64_t t = ckpt.config.window_len;
    std::vector<std::ostringstream> files(static_cast<std::size_t>(m));
    for (auto& f : files) f << "time,truth,mean,lower,upper\n";

    Rng draw_rng(config.seed ^ 0x5deece66dull);
    NoGradGuard guard;
    for (const WindowSample& w : test) {
        const PredictSummary summary = model.predict_mean(w.y, config.sample_n, draw_rng);
        const Tensor mean = denormalize_prediction(ckpt.stats, summary.mean);
        const Tensor truth = denormalize_prediction(ckpt.stats, w.x);
        for (std::int64_t c = 0; c < m; ++c) {
            const std::size_t ci = static_cast<std::size_t>(c);
            const double scale = ckpt.stats.x_std[ci];
            for (std::int64_t i = 0; i < t; ++i) {
                const double mu = mean.at({c, i});
                const double half = summary.half_width.at({c, i}) * scale;
                files[ci] << (w.window_start + i) << ',' << format_f64(truth.at({c, i})) << ','
                          << format_f64(mu) << ',' << format_f64(mu - half) << ','
                          << format_f64(mu + half) << '\n';
            }
        }
    }

    ensure_dir(config.output_dir);
    write_resolved_config(config, config.output_dir);
    for (std::int64_t c = 0; c < m; ++c) {
        const std::string name =
            sanitize(data.dataset.appliance_names[static_cast<std::size_t>(c)]);
        const std::string path = join(config.output_dir, "sample_" + name + ".csv");
        atomic_write_file(path, files[static_cast<std::size_t>(c)].str());
        std::cout << "wrote " << path << "\n";
    }
    return 0;
}

int cmd_ablate(RunConfig config, const std::string& suite) {
    config.validate();
    const LoadedData data = load_configured_data(config.data);
    report_gaps(data.gaps);
    std::vector<std::string> warnings;
    resolve_model_from_data(config, data.dataset, &warnings);
    for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";

    const auto windows = make_windows(data.dataset, config.data.window_len, config.data.stride);
    const std::vector<std::string>& names = data.dataset.appliance_names;

    AblationResult result;
    if (suite == "conditioning") {
        result = run_ablation_suite(windows, config.model, config.train, names, config.eval,
                                    config.seed, config.data.window_len, config.data.stride);
    } else if (suite == "stepflows") {
        std::vector<AblationRunSpec> specs;
        for (const std::int64_t k : {2, 4, 8, 16, 32}) specs.push_back(stepflow_spec(k));
        result = run_ablation_suite_with(windows, config.model, config.train, names,
                                         config.eval, config.seed, config.data.window_len,
                                         config.data.stride, specs);
    } else {
        throw ContractError("cmd_ablate: unknown suite '" + suite +
                            "' (expected conditioning or stepflows)");
    }

    ensure_dir(config.output_dir);
    write_resolved_config(config, config.output_dir);
    atomic_write_file(join(config.output_dir, "ablation_" + suite + ".json"),
                      ablation_to_json(result));
    const std::string table = ablation_to_table(result);
    atomic_write_file(join(config.output_dir, "ablation_" + suite + ".txt"), table);
    std::cout << table;
    return 0;
}

int cmd_synth(RunConfig config) {
    config.validate();
    if (!config.data.synth.has_value()) {
        throw ContractError("cmd_synth: the config has no synth spec");
    }
    const SynthResult synth = synth_dataset(*config.data.synth);
    ensure_dir(config.output_dir);
    write_resolved_config(config, config.output_dir);
    std::vector<std::string> paths;
    {
        const std::string path = join(config.output_dir, synth.aggregate.meter_id + ".csv");
        write_csv(synth.aggregate, path);
        paths.push_back(path);
    }
    for (const MeterSeries& appliance : synth.appliances) {
        const std::string path = join(config.output_dir, appliance.meter_id + ".csv");
        write_csv(appliance, path);
        paths.push_back(path);
    }
    write_manifest(synth.manifest, join(config.output_dir, "manifest.json"));
    for (const std::string& p : paths) std::cout << "wrote " << p << "\n";
    std::cout << "wrote " << join(config.output_dir, "manifest.json") << "\n";
    return 0;
}

}  // namespace flowdisagg
