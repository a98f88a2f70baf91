#include "flowdisagg/config.hpp"

#include <filesystem>

#include "flowdisagg/exceptions.hpp"
#include "flowdisagg/io_util.hpp"
#include "json.hpp"

namespace flowdisagg {

namespace {

using nlohmann::json;

[[noreturn]] void schema_fail(const std::string& where, const std::string& what) {
    throw SchemaError("config: " + where + ": " + what);
}

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) schema_fail(where, "expected an object");
    for (const auto& [key, value] : obj.items()) {
        bool known = false;
        for (const char* a : allowed) {
            if (key == a) {
                known = true;
                break;
            }
        }
        if (!known) schema_fail(where, "unknown key '" + key + "'");
    }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        schema_fail(where, std::string("bad value for '") + key + "': " + e.what());
    }
}

json synth_to_json(const SynthSpec& spec) {
    return json{{"n_appliances", spec.n_appliances}, {"length", spec.length},
                {"seed", spec.seed},                 {"noise_std", spec.noise_std},
                {"duty_lo", spec.duty_lo},           {"duty_hi", spec.duty_hi},
                {"power_lo", spec.power_lo},         {"power_hi", spec.power_hi}};
}

SynthSpec synth_from_json(const json& obj, SynthSpec base) {
    check_keys(obj, "data.synth",
               {"n_appliances", "length", "seed", "noise_std", "duty_lo", "duty_hi", "power_lo",
                "power_hi"});
    read_field(obj, "n_appliances", base.n_appliances, "data.synth");
    read_field(obj, "length", base.length, "data.synth");
    read_field(obj, "seed", base.seed, "data.synth");
    read_field(obj, "noise_std", base.noise_std, "data.synth");
    read_field(obj, "duty_lo", base.duty_lo, "data.synth");
    read_field(obj, "duty_hi", base.duty_hi, "data.synth");
    read_field(obj, "power_lo", base.power_lo, "data.synth");
    read_field(obj, "power_hi", base.power_hi, "data.synth");
    return base;
}

json model_to_json(const ModelConfig& m) {
    return json{{"window_len", m.window_len},
                {"n_input_channels", m.n_input_channels},
                {"n_appliances", m.n_appliances},
                {"latent_channels", m.latent_channels},
                {"latent_len", m.latent_len},
                {"n_encoder_blocks", m.n_encoder_blocks},
                {"n_decoder_blocks", m.n_decoder_blocks},
                {"n_flow_blocks", m.n_flow_blocks},
                {"hidden_channels", m.hidden_channels},
                {"prior_weight", m.prior_weight},
                {"ablation_simple_affine", m.ablation_simple_affine},
                {"ablation_standard_normal_base", m.ablation_standard_normal_base}};
}

ModelConfig model_from_json_obj(const json& obj, ModelConfig base, const std::string& where) {
    check_keys(obj, where,
               {"window_len", "n_input_channels", "n_appliances", "latent_channels",
                "latent_len", "n_encoder_blocks", "n_decoder_blocks", "n_flow_blocks",
                "hidden_channels", "prior_weight", "ablation_simple_affine",
                "ablation_standard_normal_base"});
    read_field(obj, "window_len", base.window_len, where);
    read_field(obj, "n_input_channels", base.n_input_channels, where);
    read_field(obj, "n_appliances", base.n_appliances, where);
    read_field(obj, "latent_channels", base.latent_channels, where);
    read_field(obj, "latent_len", base.latent_len, where);
    read_field(obj, "n_encoder_blocks", base.n_encoder_blocks, where);
    read_field(obj, "n_decoder_blocks", base.n_decoder_blocks, where);
    read_field(obj, "n_flow_blocks", base.n_flow_blocks, where);
    read_field(obj, "hidden_channels", base.hidden_channels, where);
    read_field(obj, "prior_weight", base.prior_weight, where);
    read_field(obj, "ablation_simple_affine", base.ablation_simple_affine, where);
    read_field(obj, "ablation_standard_normal_base", base.ablation_standard_normal_base, where);
    return base;
}

}  // namespace

void DataConfig::validate() const {
    const bool has_csv = !csv_paths.empty();
    if (has_csv == synth.has_value()) {
        throw ContractError("DataConfig: exactly one of csv_paths / synth must be set");
    }
    if (has_csv && manifest_path.empty()) {
        throw ContractError("DataConfig: csv_paths requires manifest_path");
    }
    if (synth.has_value()) synth->validate();
    if (window_len < 1) throw ContractError("DataConfig: window_len must be positive");
    if (stride < 1) throw ContractError("DataConfig: stride must be positive");
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0)) {
        throw ContractError("DataConfig: train_fraction must be in (0, 1)");
    }
}

void RunConfig::validate() const {
    data.validate();
    train.validate();
    if (eval.n_samples < 1) throw ContractError("RunConfig: eval.n_samples must be positive");
    if (sample_n < 1) throw ContractError("RunConfig: sample_n must be positive");
    if (output_dir.empty()) throw ContractError("RunConfig: output_dir must be set");
}

RunConfig paper_preset() {
    RunConfig config;  // struct defaults are the full-scale protocol
    return config;
}

RunConfig desk_preset() {
    RunConfig config;
    SynthSpec synth;
    synth.n_appliances = 3;
    synth.length = 16384;
    config.data.synth = synth;
    config.data.window_len = 64;
    config.data.stride = 16;
    config.model.window_len = 64;
    config.model.n_appliances = 3;
    config.model.latent_channels = 8;
    config.model.latent_len = 16;
    config.model.n_encoder_blocks = 2;
    config.model.n_decoder_blocks = 2;
    config.model.n_flow_blocks = 4;
    config.model.hidden_channels = 16;
    // At desk scale the latent log-prior dwarfs the per-window MSE; a small
    // prior weight keeps the encoder informative while the flow still fits.
    config.model.prior_weight = 0.01;
    config.train.batch_size = 32;
    config.train.epochs = 200;
    config.train.lr = 3e-4;
    return config;
}

RunConfig preset_by_name(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "paper") return paper_preset();
    throw ContractError("unknown preset '" + name + "' (expected desk or paper)");
}

RunConfig parse_run_config(const std::string& json_text, const RunConfig& base) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(doc, "top level", {"data", "model", "train", "eval", "output_dir"});

    RunConfig config = base;
    if (doc.contains("data")) {
        const json& d = doc.at("data");
        check_keys(d, "data",
                   {"csv_paths", "manifest_path", "synth", "window_len", "stride",
                    "train_fraction"});
        if (d.contains("csv_paths")) {
            config.data.csv_paths = d.at("csv_paths").get<std::vector<std::string>>();
            config.data.synth.reset();  // a csv source replaces a preset synth source
        }
        read_field(d, "manifest_path", config.data.manifest_path, "data");
        if (d.contains("synth")) {
            config.data.synth =
                synth_from_json(d.at("synth"), config.data.synth.value_or(SynthSpec{}));
            config.data.csv_paths.clear();
        }
        read_field(d, "window_len", config.data.window_len, "data");
        read_field(d, "stride", config.data.stride, "data");
        read_field(d, "train_fraction", config.data.train_fraction, "data");
        if (d.contains("csv_paths") && d.contains("synth")) {
            schema_fail("data", "csv_paths and synth are mutually exclusive");
        }
    }
    if (doc.contains("model")) {
        config.model = model_from_json_obj(doc.at("model"), config.model, "model");
    }
    if (doc.contains("train")) {
        const json& t = doc.at("train");
        check_keys(t, "train", {"batch_size", "epochs", "lr", "seed"});
        read_field(t, "batch_size", config.train.batch_size, "train");
        read_field(t, "epochs", config.train.epochs, "train");
        read_field(t, "lr", config.train.lr, "train");
        read_field(t, "seed", config.seed, "train");
    }
    if (doc.contains("eval")) {
        const json& e = doc.at("eval");
        check_keys(e, "eval", {"n_samples", "nde_sqrt", "sample_n"});
        read_field(e, "n_samples", config.eval.n_samples, "eval");
        read_field(e, "nde_sqrt", config.eval.nde_sqrt, "eval");
        read_field(e, "sample_n", config.sample_n, "eval");
    }
    read_field(doc, "output_dir", config.output_dir, "top level");
    return config;
}

RunConfig load_run_config(const std::string& path, const RunConfig& base) {
    return parse_run_config(read_file(path), base);
}

std::string run_config_to_json(const RunConfig& config) {
    json data{{"window_len", config.data.window_len},
              {"stride", config.data.stride},
              {"train_fraction", config.data.train_fraction}};
    if (config.data.synth.has_value()) {
        data["synth"] = synth_to_json(*config.data.synth);
    } else {
        data["csv_paths"] = config.data.csv_paths;
        data["manifest_path"] = config.data.manifest_path;
    }
    const json doc{{"data", data},
                   {"model", model_to_json(config.model)},
                   {"train",
                    {{"batch_size", config.train.batch_size},
                     {"epochs", config.train.epochs},
                     {"lr", config.train.lr},
                     {"seed", config.seed}}},
                   {"eval",
                    {{"n_samples", config.eval.n_samples},
                     {"nde_sqrt", config.eval.nde_sqrt},
                     {"sample_n", config.sample_n}}},
                   {"output_dir", config.output_dir}};
    return doc.dump(2) + "\n";
}

std::string model_config_to_json(const ModelConfig& config) {
    return model_to_json(config).dump();
}

ModelConfig model_config_from_json(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("model config: invalid JSON: ") + e.what());
    }
    return model_from_json_obj(doc, ModelConfig{}, "model");
}

void resolve_model_from_data(RunConfig& config, const Dataset& data,
                             std::vector<std::string>* warnings) {
    config.model.window_len = config.data.window_len;
    config.model.n_input_channels = static_cast<std::int64_t>(data.aggregate.size());
    config.model.n_appliances = static_cast<std::int64_t>(data.appliances.size());
    config.model.latent_len = config.model.window_len >> config.model.n_encoder_blocks;
    config.model.validate(warnings);
}

void write_resolved_config(const RunConfig& config, const std::string& dir) {
    std::filesystem::create_directories(dir);
    atomic_write_file((std::filesystem::path(dir) / "config.json").string(),
                      run_config_to_json(config));
}

}  // namespace flowdisagg
