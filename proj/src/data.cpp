#include "flowdisagg/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "flowdisagg/exceptions.hpp"
#include "flowdisagg/io_util.hpp"
#include "json.hpp"

namespace flowdisagg {

const std::vector<std::string> kQuantityNames = {
    "voltage_rms", "current_rms",   "power_active",
    "power_reactive", "power_apparent", "energy_active"};

namespace {

bool is_known_quantity(const std::string& name) {
    return std::find(kQuantityNames.begin(), kQuantityNames.end(), name) != kQuantityNames.end();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (const char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

// Days since 1970-01-01 for a proleptic Gregorian date.
std::int64_t days_from_civil(std::int64_t y, std::int64_t m, std::int64_t d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const std::int64_t yoe = y - era * 400;
    const std::int64_t doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const std::int64_t doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + doe - 719468;
}

std::int64_t parse_timestamp(const std::string& field, const std::string& path,
                             std::size_t line_no) {
    const auto fail = [&]() -> std::int64_t {
        throw FormatError(path + ":" + std::to_string(line_no) + ": unparseable timestamp '" +
                          field + "'");
    };
    if (field.empty()) return fail();
    bool digits_only = true;
    for (std::size_t i = (field[0] == '-' ? 1 : 0); i < field.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(field[i]))) {
            digits_only = false;
            break;
        }
    }
    if (digits_only && !(field.size() == 1 && field[0] == '-')) {
        return std::stoll(field);
    }
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    char sep = 0;
    const int got = std::sscanf(field.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &s);
    if (got != 7 || (sep != 'T' && sep != ' ')) return fail();
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 ||
        s > 60)
        return fail();
    const std::size_t z = field.find_last_not_of(' ');
    if (z != std::string::npos && field[z] != 'Z' &&
        !std::isdigit(static_cast<unsigned char>(field[z])))
        return fail();
    return days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + s;
}

std::string meter_id_from_path(const std::string& path) {
    const std::size_t slash = path.find_last_of("/\\");
    std::string stem = (slash == std::string::npos) ? path : path.substr(slash + 1);
    const std::size_t dot = stem.find_last_of('.');
    if (dot != std::string::npos) stem = stem.substr(0, dot);
    return stem;
}

MeterSeries read_meter_csv(const std::string& path, std::vector<GapInfo>& gaps) {
    const std::string text = read_file(path);
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty file");

    const std::vector<std::string> header = split_csv_line(line);
    if (header.empty() || header[0] != "timestamp")
        throw SchemaError(path + ": first column must be 'timestamp'");
    if (header.size() < 2) throw SchemaError(path + ": no quantity columns");
    for (std::size_t i = 1; i < header.size(); ++i) {
        if (!is_known_quantity(header[i]))
            throw SchemaError(path + ": unknown quantity column '" + header[i] + "'");
        for (std::size_t j = 1; j < i; ++j) {
            if (header[j] == header[i])
                throw SchemaError(path + ": duplicate column '" + header[i] + "'");
        }
    }
    const std::size_t n_cols = header.size();

    MeterSeries series;
    series.meter_id = meter_id_from_path(path);
    for (std::size_t i = 1; i < n_cols; ++i) series.quantities[header[i]] = {};

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != n_cols)
            throw FormatError(path + ":" + std::to_string(line_no) + ": expected " +
                              std::to_string(n_cols) + " fields, got " +
                              std::to_string(fields.size()));
        const std::int64_t ts = parse_timestamp(fields[0], path, line_no);
        if (!series.timestamps.empty()) {
            const std::int64_t prev = series.timestamps.back();
            if (ts == prev)
                throw FormatError(path + ":" + std::to_string(line_no) +
                                  ": duplicate timestamp " + std::to_string(ts));
            if (ts < prev)
                throw FormatError(path + ":" + std::to_string(line_no) +
                                  ": non-monotone timestamp " + std::to_string(ts));
            if (ts > prev + 1) {
                const std::int64_t missing = ts - prev - 1;
                gaps.push_back({series.meter_id, prev, missing});
                for (std::int64_t k = 1; k <= missing; ++k) {
                    series.timestamps.push_back(prev + k);
                    for (std::size_t i = 1; i < n_cols; ++i) {
                        auto& q = series.quantities[header[i]];
                        q.push_back(q.back());
                    }
                }
            }
        }
        series.timestamps.push_back(ts);
        for (std::size_t i = 1; i < n_cols; ++i) {
            float value = 0.0f;
            try {
                value = std::stof(fields[i]);
            } catch (const std::exception&) {
                throw FormatError(path + ":" + std::to_string(line_no) + ": bad value '" +
                                  fields[i] + "' in column '" + header[i] + "'");
            }
            series.quantities[header[i]].push_back(value);
        }
    }
    if (series.timestamps.empty()) throw FormatError(path + ": no data rows");
    return series;
}

}  // namespace

IngestResult ingest_csv(std::span<const std::string> paths) {
    if (paths.empty()) throw ContractError("ingest_csv: no input files");
    IngestResult result;
    for (const auto& path : paths) result.meters.push_back(read_meter_csv(path, result.gaps));

    std::int64_t start = result.meters[0].timestamps.front();
    std::int64_t end = result.meters[0].timestamps.back();
    for (const auto& m : result.meters) {
        start = std::max(start, m.timestamps.front());
        end = std::min(end, m.timestamps.back());
    }
    if (start > end) throw ContractError("ingest_csv: meters share no timestamp range");

    for (auto& m : result.meters) {
        const std::size_t offset = static_cast<std::size_t>(start - m.timestamps.front());
        const std::size_t count = static_cast<std::size_t>(end - start + 1);
        m.timestamps.assign(m.timestamps.begin() + static_cast<std::ptrdiff_t>(offset),
                            m.timestamps.begin() + static_cast<std::ptrdiff_t>(offset + count));
        for (auto& [name, values] : m.quantities) {
            values.assign(values.begin() + static_cast<std::ptrdiff_t>(offset),
                          values.begin() + static_cast<std::ptrdiff_t>(offset + count));
        }
    }
    return result;
}

void write_csv(const MeterSeries& series, const std::string& path) {
    std::string out = "timestamp";
    std::vector<const std::vector<float>*> columns;
    for (const auto& name : kQuantityNames) {
        const auto it = series.quantities.find(name);
        if (it == series.quantities.end()) continue;
        out += "," + name;
        columns.push_back(&it->second);
    }
    out += "\n";
    char buf[64];
    for (std::size_t t = 0; t < series.timestamps.size(); ++t) {
        out += std::to_string(series.timestamps[t]);
        for (const auto* col : columns) {
            std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>((*col)[t]));
            out += buf;
        }
        out += "\n";
    }
    atomic_write_file(path, out);
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": invalid JSON: " + e.what());
    }
    if (!doc.is_array()) throw SchemaError(path + ": manifest must be a JSON array");
    std::vector<ManifestEntry> entries;
    for (const auto& item : doc) {
        if (!item.is_object() || !item.contains("meter_id") || !item.contains("role"))
            throw SchemaError(path + ": manifest entries need meter_id and role");
        ManifestEntry e;
        e.meter_id = item.at("meter_id").get<std::string>();
        e.role = item.at("role").get<std::string>();
        e.display_name = item.value("display_name", e.meter_id);
        if (e.role != "aggregate" && e.role != "appliance")
            throw SchemaError(path + ": unknown role '" + e.role + "'");
        entries.push_back(std::move(e));
    }
    return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& e : entries) {
        doc.push_back({{"meter_id", e.meter_id}, {"role", e.role}, {"display_name", e.display_name}});
    }
    atomic_write_file(path, doc.dump(2) + "\n");
}

Dataset assemble_dataset(const IngestResult& ingest, const std::vector<ManifestEntry>& manifest) {
    const auto find_meter = [&](const std::string& id) -> const MeterSeries& {
        for (const auto& m : ingest.meters) {
            if (m.meter_id == id) return m;
        }
        throw SchemaError("manifest meter '" + id + "' has no ingested file");
    };

    const ManifestEntry* aggregate = nullptr;
    for (const auto& e : manifest) {
        if (e.role != "aggregate") continue;
        if (aggregate) throw SchemaError("manifest lists more than one aggregate meter");
        aggregate = &e;
    }
    if (!aggregate) throw SchemaError("manifest lists no aggregate meter");

    Dataset data;
    const MeterSeries& agg = find_meter(aggregate->meter_id);
    data.length = agg.length();
    bool has_active = false;
    for (const auto& name : kQuantityNames) {
        const auto it = agg.quantities.find(name);
        if (it == agg.quantities.end()) continue;
        if (name == "power_active") has_active = true;
        data.aggregate.push_back(it->second);
    }
    if (!has_active) throw SchemaError("aggregate meter lacks power_active");

    for (const auto& e : manifest) {
        if (e.role != "appliance") continue;
        const MeterSeries& m = find_meter(e.meter_id);
        const auto it = m.quantities.find("power_active");
        if (it == m.quantities.end())
            throw SchemaError("appliance meter '" + e.meter_id + "' lacks power_active");
        if (m.length() != data.length)
            throw DimensionError("appliance meter '" + e.meter_id + "' length " +
                                 std::to_string(m.length()) + " != aggregate length " +
                                 std::to_string(data.length));
        data.appliances.push_back(it->second);
        data.appliance_names.push_back(e.display_name);
    }
    if (data.appliances.empty()) throw SchemaError("manifest lists no appliance meters");
    return data;
}

std::vector<WindowSample> make_windows(const Dataset& data, std::int64_t window_len,
                                       std::int64_t stride) {
    if (window_len < 1) throw ContractError("make_windows: window_len must be positive");
    if (stride < 1) throw ContractError("make_windows: stride must be positive");
    if (window_len > data.length)
        throw ContractError("make_windows: window_len " + std::to_string(window_len) +
                            " exceeds series length " + std::to_string(data.length));

    const std::int64_t c_in = static_cast<std::int64_t>(data.aggregate.size());
    const std::int64_t m = static_cast<std::int64_t>(data.appliances.size());
    const std::int64_t count = (data.length - window_len) / stride + 1;
    std::vector<WindowSample> windows;
    windows.reserve(static_cast<std::size_t>(count));
    for (std::int64_t w = 0; w < count; ++w) {
        const std::int64_t start = w * stride;
        WindowSample sample;
        sample.window_start = start;
        std::vector<float> y(static_cast<std::size_t>(c_in * window_len));
        for (std::int64_t c = 0; c < c_in; ++c) {
            const auto& src = data.aggregate[static_cast<std::size_t>(c)];
            std::copy_n(src.begin() + start, window_len,
                        y.begin() + static_cast<std::ptrdiff_t>(c * window_len));
        }
        sample.y = Tensor::from_data({c_in, window_len}, std::move(y));
        std::vector<float> x(static_cast<std::size_t>(m * window_len));
        for (std::int64_t c = 0; c < m; ++c) {
            const auto& src = data.appliances[static_cast<std::size_t>(c)];
            std::copy_n(src.begin() + start, window_len,
                        x.begin() + static_cast<std::ptrdiff_t>(c * window_len));
        }
        sample.x = Tensor::from_data({m, window_len}, std::move(x));
        windows.push_back(std::move(sample));
    }
    return windows;
}

namespace {

struct ChannelStats {
    std::vector<double> mean, stddev;
};

ChannelStats fit_channels(std::span<const WindowSample> windows, bool aggregate_side,
                          const char* label) {
    const Tensor& first = aggregate_side ? windows[0].y : windows[0].x;
    const std::int64_t channels = first.dim(0);
    ChannelStats stats;
    stats.mean.resize(static_cast<std::size_t>(channels));
    stats.stddev.resize(static_cast<std::size_t>(channels));
    for (std::int64_t c = 0; c < channels; ++c) {
        double acc = 0.0, acc2 = 0.0;
        std::int64_t n = 0;
        for (const auto& w : windows) {
            const Tensor& t = aggregate_side ? w.y : w.x;
            const std::int64_t len = t.dim(1);
            const auto d = t.data();
            for (std::int64_t i = 0; i < len; ++i) {
                const double v = d[static_cast<std::size_t>(c * len + i)];
                acc += v;
                acc2 += v * v;
            }
            n += len;
        }
        const double mean = acc / static_cast<double>(n);
        const double var = acc2 / static_cast<double>(n) - mean * mean;
        if (!(var > 1e-12))
            throw DegenerateStatsError(std::string("fit_normalizer: ") + label + " channel " +
                                       std::to_string(c) + " has zero variance");
        stats.mean[static_cast<std::size_t>(c)] = mean;
        stats.stddev[static_cast<std::size_t>(c)] = std::sqrt(var);
    }
    return stats;
}

Tensor affine_per_channel(const Tensor& t, const std::vector<double>& shift,
                          const std::vector<double>& scale) {
    const std::int64_t channels = t.dim(0);
    const std::int64_t len = t.dim(1);
    std::vector<float> out(static_cast<std::size_t>(channels * len));
    const auto d = t.data();
    for (std::int64_t c = 0; c < channels; ++c) {
        const double a = scale[static_cast<std::size_t>(c)];
        const double b = shift[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < len; ++i) {
            const std::size_t idx = static_cast<std::size_t>(c * len + i);
            out[idx] = static_cast<float>((static_cast<double>(d[idx]) - b) / a);
        }
    }
    return Tensor::from_data({channels, len}, std::move(out));
}

Tensor affine_per_channel_inverse(const Tensor& t, const std::vector<double>& shift,
                                  const std::vector<double>& scale) {
    const std::int64_t channels = t.dim(0);
    const std::int64_t len = t.dim(1);
    std::vector<float> out(static_cast<std::size_t>(channels * len));
    const auto d = t.data();
    for (std::int64_t c = 0; c < channels; ++c) {
        const double a = scale[static_cast<std::size_t>(c)];
        const double b = shift[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < len; ++i) {
            const std::size_t idx = static_cast<std::size_t>(c * len + i);
            out[idx] = static_cast<float>(static_cast<double>(d[idx]) * a + b);
        }
    }
    return Tensor::from_data({channels, len}, std::move(out));
}

}  // namespace

NormStats fit_normalizer(std::span<const WindowSample> train_windows) {
    if (train_windows.empty()) throw ContractError("fit_normalizer: no training windows");
    for (const auto& w : train_windows) {
        if (w.normalized) throw ContractError("fit_normalizer: windows already normalized");
    }
    const ChannelStats y = fit_channels(train_windows, true, "aggregate");
    const ChannelStats x = fit_channels(train_windows, false, "appliance");
    NormStats stats;
    stats.y_mean = y.mean;
    stats.y_std = y.stddev;
    stats.x_mean = x.mean;
    stats.x_std = x.stddev;
    return stats;
}

std::vector<WindowSample> apply_normalizer(const NormStats& stats,
                                           std::span<const WindowSample> windows) {
    std::vector<WindowSample> out;
    out.reserve(windows.size());
    for (const auto& w : windows) {
        if (w.normalized) throw ContractError("apply_normalizer: window already normalized");
        if (w.y.dim(0) != stats.y_channels() || w.x.dim(0) != stats.x_channels())
            throw DimensionError("apply_normalizer: channel count does not match stats");
        WindowSample n;
        n.window_start = w.window_start;
        n.y = affine_per_channel(w.y, stats.y_mean, stats.y_std);
        n.x = affine_per_channel(w.x, stats.x_mean, stats.x_std);
        n.normalized = true;
        out.push_back(std::move(n));
    }
    return out;
}

std::vector<WindowSample> inverse_normalizer(const NormStats& stats,
                                             std::span<const WindowSample> windows) {
    std::vector<WindowSample> out;
    out.reserve(windows.size());
    for (const auto& w : windows) {
        if (!w.normalized) throw ContractError("inverse_normalizer: window is not normalized");
        WindowSample n;
        n.window_start = w.window_start;
        n.y = affine_per_channel_inverse(w.y, stats.y_mean, stats.y_std);
        n.x = affine_per_channel_inverse(w.x, stats.x_mean, stats.x_std);
        n.normalized = false;
        out.push_back(std::move(n));
    }
    return out;
}

Tensor denormalize_prediction(const NormStats& stats, const Tensor& x_hat) {
    if (x_hat.ndim() != 2 || x_hat.dim(0) != stats.x_channels())
        throw DimensionError("denormalize_prediction: expected (" +
                             std::to_string(stats.x_channels()) + ", T) input");
    return affine_per_channel_inverse(x_hat, stats.x_mean, stats.x_std);
}

std::vector<std::int64_t> FoldPlan::fold_indices(std::int64_t fold) const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        if (assignments[i] == fold) out.push_back(static_cast<std::int64_t>(i));
    }
    return out;
}

FoldPlan plan_folds(std::int64_t n_windows, std::int64_t n_folds, std::uint64_t seed) {
    if (n_folds < 2) throw ContractError("plan_folds: need at least 2 folds");
    if (n_folds > n_windows)
        throw ContractError("plan_folds: " + std::to_string(n_folds) + " folds exceed " +
                            std::to_string(n_windows) + " windows");
    FoldPlan plan;
    plan.n_folds = n_folds;
    plan.assignments.resize(static_cast<std::size_t>(n_windows));
    const std::int64_t q = n_windows / n_folds;
    const std::int64_t r = n_windows % n_folds;
    const std::int64_t rotation = static_cast<std::int64_t>(seed % static_cast<std::uint64_t>(n_folds));
    std::int64_t w = 0;
    for (std::int64_t block = 0; block < n_folds; ++block) {
        const std::int64_t size = q + (block < r ? 1 : 0);
        const std::int64_t fold = (block + rotation) % n_folds;
        for (std::int64_t i = 0; i < size; ++i) plan.assignments[static_cast<std::size_t>(w++)] = fold;
    }
    return plan;
}

void drop_straddlers(FoldPlan& plan, std::int64_t window_len, std::int64_t stride) {
    if (stride < 1) throw ContractError("drop_straddlers: stride must be positive");
    if (stride >= window_len) return;
    const std::int64_t n = static_cast<std::int64_t>(plan.assignments.size());
    for (std::int64_t b = 1; b < n; ++b) {
        if (plan.assignments[static_cast<std::size_t>(b)] ==
            plan.assignments[static_cast<std::size_t>(b - 1)])
            continue;
        const std::int64_t boundary_sample = b * stride;
        for (std::int64_t v = b - 1; v >= 0; --v) {
            if (v * stride + window_len <= boundary_sample) break;
            plan.assignments[static_cast<std::size_t>(v)] = -1;
        }
    }
    for (std::int64_t f = 0; f < plan.n_folds; ++f) {
        if (plan.fold_indices(f).empty())
            throw ContractError("drop_straddlers: fold " + std::to_string(f) +
                                " emptied by boundary drops");
    }
}

HoldoutSplit holdout_split(std::int64_t n_windows, double fraction, std::int64_t window_len,
                           std::int64_t stride) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw ContractError("holdout_split: fraction must lie in (0, 1)");
    if (stride < 1) throw ContractError("holdout_split: stride must be positive");
    const std::int64_t n_train =
        static_cast<std::int64_t>(fraction * static_cast<double>(n_windows) + 1e-9);
    if (n_train < 1 || n_train >= n_windows)
        throw ContractError("holdout_split: split leaves an empty side");
    HoldoutSplit split;
    const std::int64_t boundary_sample = n_train * stride;
    for (std::int64_t w = 0; w < n_train; ++w) {
        if (stride < window_len && w * stride + window_len > boundary_sample) continue;
        split.train.push_back(w);
    }
    for (std::int64_t w = n_train; w < n_windows; ++w) split.test.push_back(w);
    if (split.train.empty()) throw ContractError("holdout_split: no training windows survive");
    return split;
}

void SynthSpec::validate() const {
    if (n_appliances < 1) throw ContractError("SynthSpec: n_appliances must be positive");
    if (length < 2) throw ContractError("SynthSpec: length must be at least 2");
    if (noise_std < 0.0) throw ContractError("SynthSpec: noise_std must be non-negative");
    if (!(duty_lo > 0.0 && duty_lo <= duty_hi && duty_hi < 1.0))
        throw ContractError("SynthSpec: duty range must satisfy 0 < lo <= hi < 1");
    if (!(power_lo > 0.0 && power_lo <= power_hi))
        throw ContractError("SynthSpec: power range must satisfy 0 < lo <= hi");
}

MeterSeries derive_aggregate(const std::vector<MeterSeries>& appliances,
                             std::span<const float> noise) {
    if (appliances.empty()) throw ContractError("derive_aggregate: no appliances");
    const std::int64_t length = appliances[0].length();
    for (const auto& a : appliances) {
        if (a.length() != length)
            throw DimensionError("derive_aggregate: appliance lengths differ");
        if (a.quantities.find("power_active") == a.quantities.end())
            throw SchemaError("derive_aggregate: appliance '" + a.meter_id +
                              "' lacks power_active");
    }
    if (!noise.empty() && static_cast<std::int64_t>(noise.size()) != length)
        throw DimensionError("derive_aggregate: noise trace length mismatch");

    MeterSeries agg;
    agg.meter_id = "aggregate";
    agg.timestamps = appliances[0].timestamps;
    for (const auto& name : kQuantityNames)
        agg.quantities[name].resize(static_cast<std::size_t>(length));
    for (std::int64_t t = 0; t < length; ++t) {
        double active = 0.0;
        for (const auto& a : appliances)
            active += a.quantities.at("power_active")[static_cast<std::size_t>(t)];
        if (!noise.empty()) active += noise[static_cast<std::size_t>(t)];
        const float p = static_cast<float>(active);
        const float apparent = p / 0.92f;
        agg.quantities["power_active"][static_cast<std::size_t>(t)] = p;
        agg.quantities["power_apparent"][static_cast<std::size_t>(t)] = apparent;
        agg.quantities["power_reactive"][static_cast<std::size_t>(t)] = 0.4259f * p;
        agg.quantities["current_rms"][static_cast<std::size_t>(t)] = apparent / 220.0f;
        agg.quantities["voltage_rms"][static_cast<std::size_t>(t)] = static_cast<float>(
            220.0 + 2.0 * std::sin(2.0 * 3.14159265358979323846 * static_cast<double>(t) / 300.0));
        agg.quantities["energy_active"][static_cast<std::size_t>(t)] = p / 3600.0f;
    }
    return agg;
}

SynthResult synth_dataset(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const std::int64_t base_ts = 1700000000;

    SynthResult result;
    for (std::int64_t a = 0; a < spec.n_appliances; ++a) {
        const double duty = rng.uniform(spec.duty_lo, spec.duty_hi);
        const double cycle = rng.uniform(60.0, 240.0);
        const double level = rng.uniform(spec.power_lo, spec.power_hi);
        const double mean_on = std::max(1.0, duty * cycle);
        const double mean_off = std::max(1.0, (1.0 - duty) * cycle);
        bool on = rng.uniform() < duty;

        MeterSeries m;
        m.meter_id = "appliance_" + std::to_string(a + 1);
        m.timestamps.resize(static_cast<std::size_t>(spec.length));
        auto& power = m.quantities["power_active"];
        power.resize(static_cast<std::size_t>(spec.length));
        for (std::int64_t t = 0; t < spec.length; ++t) {
            m.timestamps[static_cast<std::size_t>(t)] = base_ts + t;
            double v = on ? level : 0.0;
            if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
            power[static_cast<std::size_t>(t)] = static_cast<float>(v);
            const double flip = on ? 1.0 / mean_on : 1.0 / mean_off;
            if (rng.uniform() < flip) on = !on;
        }
        result.appliances.push_back(std::move(m));
    }

    result.noise_trace.resize(static_cast<std::size_t>(spec.length), 0.0f);
    if (spec.noise_std > 0.0) {
        for (auto& v : result.noise_trace)
            v = static_cast<float>(spec.noise_std * rng.normal());
    }
    result.aggregate = derive_aggregate(result.appliances, result.noise_trace);

    result.manifest.push_back({"aggregate", "aggregate", "Aggregate"});
    for (std::int64_t a = 0; a < spec.n_appliances; ++a) {
        result.manifest.push_back({"appliance_" + std::to_string(a + 1), "appliance",
                                   "Appliance " + std::to_string(a + 1)});
    }
    return result;
}

}  // namespace flowdisagg
