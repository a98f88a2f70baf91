#include "flowdisagg/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "flowdisagg/config.hpp"
#include "flowdisagg/exceptions.hpp"
#include "flowdisagg/io_util.hpp"
#include "json.hpp"

namespace flowdisagg {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'F', 'V', 'A', 'E', 'C', 'K', 'P'};
constexpr std::int64_t kFormatVersion = 1;

void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void append_f32_le(std::string& out, float f) {
    const std::uint32_t v = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

float read_f32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(v);
}

json stats_to_json(const NormStats& stats) {
    return json{{"y_mean", stats.y_mean},
                {"y_std", stats.y_std},
                {"x_mean", stats.x_mean},
                {"x_std", stats.x_std}};
}

NormStats stats_from_json(const json& obj) {
    NormStats stats;
    stats.y_mean = obj.at("y_mean").get<std::vector<double>>();
    stats.y_std = obj.at("y_std").get<std::vector<double>>();
    stats.x_mean = obj.at("x_mean").get<std::vector<double>>();
    stats.x_std = obj.at("x_std").get<std::vector<double>>();
    return stats;
}

struct IndexEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

}  // namespace

void save_checkpoint(const std::string& path, PfvaeModel& model, const NormStats& stats,
                     const std::string& rng_state, std::int64_t epoch, const Adam* adam) {
    std::vector<IndexEntry> entries;
    ParamMap params = model.parameters();
    for (const auto& [name, p] : params) {
        const auto view = p.data();
        entries.push_back({name, p.shape(), {view.begin(), view.end()}});
    }
    if (adam != nullptr) {
        if (adam->params().size() != params.size()) {
            throw ContractError("save_checkpoint: optimizer does not match the model");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& m = adam->moment1(i);
            const auto& v = adam->moment2(i);
            entries.push_back({"adam.m:" + params[i].first,
                               {static_cast<std::int64_t>(m.size())}, m});
            entries.push_back({"adam.v:" + params[i].first,
                               {static_cast<std::int64_t>(v.size())}, v});
        }
    }

    json index = json::array();
    std::string payload;
    std::uint64_t offset = 0;
    for (const IndexEntry& e : entries) {
        index.push_back(json{{"name", e.name},
                             {"shape", e.shape},
                             {"offset", offset},
                             {"bytes", e.values.size() * 4}});
        for (const float f : e.values) append_f32_le(payload, f);
        offset += e.values.size() * 4;
    }

    json actnorm = json::array();
    for (const auto& block : model.cnf.blocks) actnorm.push_back(block.actnorm.initialized());

    json header{{"format_version", kFormatVersion},
                {"model", json::parse(model_config_to_json(model.config()))},
                {"norm_stats", stats_to_json(stats)},
                {"rng_state", rng_state},
                {"epoch", epoch},
                {"actnorm_initialized", actnorm},
                {"params", index}};
    if (adam != nullptr) header["adam"] = json{{"step_count", adam->step_count()}};
    const std::string header_text = header.dump();

    std::string blob(kMagic, sizeof(kMagic));
    append_u64_le(blob, header_text.size());
    blob += header_text;
    blob += payload;
    atomic_write_file(path, blob);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    const std::string blob = read_file(path);
    if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("checkpoint '" + path + "': bad magic");
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    const std::uint64_t header_len = read_u64_le(bytes + 8);
    if (16 + header_len > blob.size()) {
        throw FormatError("checkpoint '" + path + "': truncated header");
    }
    json header;
    try {
        header = json::parse(blob.substr(16, header_len));
    } catch (const json::exception& e) {
        throw FormatError("checkpoint '" + path + "': bad header: " + e.what());
    }
    if (header.at("format_version").get<std::int64_t>() != kFormatVersion) {
        throw FormatError("checkpoint '" + path + "': unsupported format version");
    }

    LoadedCheckpoint out;
    out.config = model_config_from_json(header.at("model").dump());
    out.stats = stats_from_json(header.at("norm_stats"));
    out.rng_state = header.at("rng_state").get<std::string>();
    out.epoch = header.at("epoch").get<std::int64_t>();
    for (const auto& flag : header.at("actnorm_initialized")) {
        out.actnorm_initialized.push_back(flag.get<bool>());
    }
    if (header.contains("adam")) {
        out.has_adam = true;
        out.adam_step_count = header.at("adam").at("step_count").get<std::int64_t>();
    }

    const std::size_t payload_offset = 16 + header_len;
    const std::size_t payload_len = blob.size() - payload_offset;
    std::uint64_t expected_offset = 0;
    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        const std::uint64_t nbytes = entry.at("bytes").get<std::uint64_t>();
        if (offset != expected_offset || nbytes % 4 != 0) {
            throw FormatError("checkpoint '" + path + "': param index is not contiguous");
        }
        std::int64_t numel = 1;
        for (const std::int64_t d : shape) numel *= d;
        if (static_cast<std::uint64_t>(numel) * 4 != nbytes) {
            throw FormatError("checkpoint '" + path + "': shape of '" + name +
                              "' disagrees with its byte span");
        }
        if (offset + nbytes > payload_len) {
            throw FormatError("checkpoint '" + path + "': payload shorter than its index");
        }
        std::vector<float> values(static_cast<std::size_t>(numel));
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] = read_f32_le(bytes + payload_offset + offset + 4 * i);
        }
        expected_offset = offset + nbytes;
        if (name.rfind("adam.m:", 0) == 0) {
            out.adam_m.emplace_back(name.substr(7), std::move(values));
        } else if (name.rfind("adam.v:", 0) == 0) {
            out.adam_v.emplace_back(name.substr(7), std::move(values));
        } else {
            out.params.emplace_back(name, std::move(values));
        }
    }
    if (expected_offset != payload_len) {
        throw FormatError("checkpoint '" + path + "': payload longer than its index");
    }
    return out;
}

void restore_model(const LoadedCheckpoint& checkpoint, PfvaeModel& model) {
    if (!(checkpoint.config == model.config())) {
        throw ContractError("restore_model: checkpoint was written for a different config");
    }
    if (checkpoint.actnorm_initialized.size() != model.cnf.blocks.size()) {
        throw ContractError("restore_model: flow depth mismatch");
    }
    for (std::size_t i = 0; i < model.cnf.blocks.size(); ++i) {
        ActNorm& actnorm = model.cnf.blocks[i].actnorm;
        if (checkpoint.actnorm_initialized[i] && !actnorm.initialized()) {
            actnorm.initialize_identity();
        }
    }
    ParamMap params = model.parameters();
    if (params.size() != checkpoint.params.size()) {
        throw ContractError("restore_model: parameter count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, tensor] = params[i];
        const auto& [saved_name, values] = checkpoint.params[i];
        if (name != saved_name) {
            throw ContractError("restore_model: parameter order mismatch at '" + name + "'");
        }
        auto dst = tensor.raw_data();
        if (dst.size() != values.size()) {
            throw ContractError("restore_model: size mismatch for '" + name + "'");
        }
        std::copy(values.begin(), values.end(), dst.begin());
    }
}

void restore_adam(const LoadedCheckpoint& checkpoint, Adam& adam) {
    if (!checkpoint.has_adam) {
        throw ContractError("restore_adam: checkpoint carries no optimizer state");
    }
    const ParamMap& params = adam.params();
    if (checkpoint.adam_m.size() != params.size() ||
        checkpoint.adam_v.size() != params.size()) {
        throw ContractError("restore_adam: moment count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (checkpoint.adam_m[i].first != params[i].first) {
            throw ContractError("restore_adam: moment order mismatch at '" + params[i].first +
                                "'");
        }
        auto& m = adam.moment1(i);
        auto& v = adam.moment2(i);
        if (m.size() != checkpoint.adam_m[i].second.size() ||
            v.size() != checkpoint.adam_v[i].second.size()) {
            throw ContractError("restore_adam: moment size mismatch at '" + params[i].first +
                                "'");
        }
        m = checkpoint.adam_m[i].second;
        v = checkpoint.adam_v[i].second;
    }
    adam.set_step_count(checkpoint.adam_step_count);
}

}  // namespace flowdisagg
