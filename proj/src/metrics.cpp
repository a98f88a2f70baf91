#include "flowdisagg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "flowdisagg/exceptions.hpp"
#include "json.hpp"

namespace flowdisagg {

namespace {

using nlohmann::json;

void check_series(std::span<const double> x, std::span<const double> x_hat, const char* name) {
    if (x.size() != x_hat.size()) {
        throw DimensionError(std::string(name) + ": series lengths differ (" +
                             std::to_string(x.size()) + " vs " + std::to_string(x_hat.size()) +
                             ")");
    }
    if (x.empty()) throw ContractError(std::string(name) + ": empty series");
}

std::string format_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

json metrics_to_json(const ApplianceMetrics& m) {
    json j{{"nde", m.nde}, {"sae", m.sae}};
    if (m.nde_sqrt.has_value()) j["nde_sqrt"] = *m.nde_sqrt;
    return j;
}

json report_json(const MetricsReport& report) {
    json per = json::object();
    for (const auto& [name, m] : report.per_appliance) per[name] = metrics_to_json(m);
    json j{{"per_appliance", per},
           {"total", metrics_to_json(report.total)},
           {"averaged", metrics_to_json(report.averaged)}};
    j["excluded"] = report.excluded;
    j["warnings"] = report.warnings;
    return j;
}

std::vector<std::string> metric_columns(const MetricsReport& report) {
    std::vector<std::string> cols = {"SAE", "NDE"};
    if (report.total.nde_sqrt.has_value()) cols.push_back("NDE_SQRT");
    return cols;
}

double metric_value(const ApplianceMetrics& m, const std::string& column) {
    if (column == "SAE") return m.sae;
    if (column == "NDE") return m.nde;
    return m.nde_sqrt.value_or(std::nan(""));
}

// Aligned text table: first column label then right-aligned value columns.
std::string render_table(const std::vector<std::string>& headers,
                         const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> widths(headers.size());
    for (std::size_t c = 0; c < headers.size(); ++c) widths[c] = headers[c].size();
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            widths[c] = std::max(widths[c], row[c].size());
        }
    }
    std::ostringstream out;
    auto emit_row = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c == 0) {
                out << row[c] << std::string(widths[c] - row[c].size(), ' ');
            } else {
                out << "  " << std::string(widths[c] - row[c].size(), ' ') << row[c];
            }
        }
        out << '\n';
    };
    emit_row(headers);
    std::size_t total = 0;
    for (std::size_t c = 0; c < widths.size(); ++c) total += widths[c] + (c > 0 ? 2 : 0);
    out << std::string(total, '-') << '\n';
    for (const auto& row : rows) emit_row(row);
    return out.str();
}

}  // namespace

double nde(std::span<const double> x, std::span<const double> x_hat) {
    check_series(x, x_hat, "nde");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - x_hat[i];
        num += d * d;
        den += x[i] * x[i];
    }
    if (!(den > 0.0)) throw UndefinedMetricError("nde: ground truth is all zero");
    return num / den;
}

double sae(std::span<const double> x, std::span<const double> x_hat) {
    check_series(x, x_hat, "sae");
    double sum_x = 0.0, sum_hat = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sum_x += x[i];
        sum_hat += x_hat[i];
    }
    if (!(sum_x > 0.0)) throw UndefinedMetricError("sae: ground truth has zero energy");
    return std::abs(sum_hat - sum_x) / sum_x;
}

MetricsReport evaluate_windows(const WindowPredictor& predictor,
                               std::span<const WindowSample> test_windows,
                               const NormStats& stats,
                               std::span<const std::string> appliance_names,
                               const EvalOptions& options) {
    if (test_windows.empty()) throw ContractError("evaluate: test set is empty");
    if (options.n_samples < 1) throw ContractError("evaluate: n_samples must be positive");
    const std::int64_t m = static_cast<std::int64_t>(appliance_names.size());
    if (m != stats.x_channels()) {
        throw DimensionError("evaluate: appliance names do not match normalizer channels");
    }
    const std::int64_t t = test_windows.front().x.shape()[1];
    for (const WindowSample& w : test_windows) {
        if (w.x.shape() != Shape{m, t}) {
            throw DimensionError("evaluate: window appliance shape mismatch");
        }
    }

    // Concatenated physical-unit series per appliance. Truth and prediction
    // go through the same denormalization path so an oracle predictor
    // scores exactly zero.
    std::vector<std::vector<double>> truth(static_cast<std::size_t>(m));
    std::vector<std::vector<double>> pred(static_cast<std::size_t>(m));
    Rng rng(options.seed);
    NoGradGuard guard;
    for (const WindowSample& w : test_windows) {
        const Tensor p = denormalize_prediction(stats, predictor(w, options.n_samples, rng));
        const Tensor gt = denormalize_prediction(stats, w.x);
        for (std::int64_t c = 0; c < m; ++c) {
            const std::size_t ci = static_cast<std::size_t>(c);
            for (std::int64_t i = 0; i < t; ++i) {
                truth[ci].push_back(static_cast<double>(gt.at({c, i})));
                pred[ci].push_back(static_cast<double>(p.at({c, i})));
            }
        }
    }

    MetricsReport report;
    std::int64_t included = 0;
    for (std::int64_t c = 0; c < m; ++c) {
        const std::size_t ci = static_cast<std::size_t>(c);
        const std::string& name = appliance_names[ci];
        ApplianceMetrics entry;
        try {
            entry.nde = nde(truth[ci], pred[ci]);
            entry.sae = sae(truth[ci], pred[ci]);
        } catch (const UndefinedMetricError& e) {
            report.excluded.push_back(name);
            report.warnings.push_back("excluding " + name + ": " + e.what());
            continue;
        }
        if (options.nde_sqrt) entry.nde_sqrt = std::sqrt(entry.nde);
        report.per_appliance.emplace_back(name, entry);
        report.total.nde += entry.nde;
        report.total.sae += entry.sae;
        if (options.nde_sqrt) {
            report.total.nde_sqrt = report.total.nde_sqrt.value_or(0.0) + *entry.nde_sqrt;
        }
        ++included;
    }
    if (included == 0) {
        throw UndefinedMetricError("evaluate: every appliance has undefined metrics");
    }
    report.averaged.nde = report.total.nde / static_cast<double>(included);
    report.averaged.sae = report.total.sae / static_cast<double>(included);
    if (options.nde_sqrt) {
        report.averaged.nde_sqrt = *report.total.nde_sqrt / static_cast<double>(included);
    }
    return report;
}

MetricsReport evaluate(PfvaeModel& model, std::span<const WindowSample> test_windows,
                       const NormStats& stats, std::span<const std::string> appliance_names,
                       const EvalOptions& options) {
    const WindowPredictor predictor = [&model](const WindowSample& w, std::int64_t n,
                                               Rng& rng) {
        return model.predict_mean(w.y, n, rng).mean;
    };
    return evaluate_windows(predictor, test_windows, stats, appliance_names, options);
}

// Appliances missing from some folds are aggregated over the folds that
// include them.
CvSummary summarize_folds(const std::vector<MetricsReport>& folds) {
    if (folds.empty()) throw ContractError("summarize_folds: no fold reports");
    CvSummary summary;
    summary.n_folds = static_cast<std::int64_t>(folds.size());

    struct Acc {
        std::vector<double> nde, sae, nde_sqrt;
    };
    auto stats_of = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (const double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        if (v.size() > 1) {
            for (const double x : v) var += (x - mean) * (x - mean);
            var /= static_cast<double>(v.size() - 1);
        }
        return std::pair<double, double>{mean, std::sqrt(var)};
    };
    auto fill = [&](const Acc& acc, ApplianceMetrics& mean_out, ApplianceMetrics& std_out) {
        const auto [mn, sn] = stats_of(acc.nde);
        const auto [ms, ss] = stats_of(acc.sae);
        mean_out.nde = mn;
        std_out.nde = sn;
        mean_out.sae = ms;
        std_out.sae = ss;
        if (!acc.nde_sqrt.empty()) {
            const auto [mq, sq] = stats_of(acc.nde_sqrt);
            mean_out.nde_sqrt = mq;
            std_out.nde_sqrt = sq;
        }
    };
    auto accumulate = [](Acc& acc, const ApplianceMetrics& m) {
        acc.nde.push_back(m.nde);
        acc.sae.push_back(m.sae);
        if (m.nde_sqrt.has_value()) acc.nde_sqrt.push_back(*m.nde_sqrt);
    };

    std::vector<std::string> order;
    std::vector<Acc> accs;
    Acc total_acc, averaged_acc;
    for (const MetricsReport& fold : folds) {
        for (const auto& [name, m] : fold.per_appliance) {
            auto it = std::find(order.begin(), order.end(), name);
            if (it == order.end()) {
                order.push_back(name);
                accs.emplace_back();
                it = order.end() - 1;
            }
            accumulate(accs[static_cast<std::size_t>(it - order.begin())], m);
        }
        accumulate(total_acc, fold.total);
        accumulate(averaged_acc, fold.averaged);
        for (const std::string& w : fold.warnings) summary.mean.warnings.push_back(w);
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
        ApplianceMetrics mean_m, std_m;
        fill(accs[i], mean_m, std_m);
        summary.mean.per_appliance.emplace_back(order[i], mean_m);
        summary.stddev.per_appliance.emplace_back(order[i], std_m);
    }
    fill(total_acc, summary.mean.total, summary.stddev.total);
    fill(averaged_acc, summary.mean.averaged, summary.stddev.averaged);
    return summary;
}

CvResult run_cv(std::span<const WindowSample> raw_windows, const ModelConfig& model_config,
                const TrainOptions& train_options,
                std::span<const std::string> appliance_names, const FoldPlan& plan,
                const EvalOptions& eval_options, std::uint64_t seed) {
    if (plan.n_folds < 2) throw ContractError("run_cv: need at least 2 folds");
    if (plan.assignments.size() != raw_windows.size()) {
        throw DimensionError("run_cv: fold plan does not cover the window set");
    }
    model_config.validate();
    train_options.validate();

    CvResult result;
    result.folds.resize(static_cast<std::size_t>(plan.n_folds));
    run_tasks(plan.n_folds, [&](std::int64_t fold) {
        std::vector<WindowSample> train_raw, test_raw;
        for (std::size_t i = 0; i < raw_windows.size(); ++i) {
            const std::int64_t f = plan.assignments[i];
            if (f < 0) continue;
            (f == fold ? test_raw : train_raw).push_back(raw_windows[i]);
        }
        if (train_raw.empty() || test_raw.empty()) {
            throw ContractError("run_cv: fold " + std::to_string(fold) +
                                " leaves an empty train or test set");
        }
        const NormStats stats = fit_normalizer(train_raw);
        std::vector<WindowSample> train = apply_normalizer(stats, train_raw);
        std::vector<WindowSample> test = apply_normalizer(stats, test_raw);

        const std::uint64_t fold_seed = seed + static_cast<std::uint64_t>(fold);
        Rng rng(fold_seed);
        PfvaeModel model(model_config, rng);
        train_model(model, std::move(train), train_options, rng);

        EvalOptions eopt = eval_options;
        eopt.seed = fold_seed ^ 0x9e3779b97f4a7c15ull;
        result.folds[static_cast<std::size_t>(fold)] =
            evaluate(model, test, stats, appliance_names, eopt);
    });
    result.summary = summarize_folds(result.folds);
    return result;
}

void AblationRunSpec::validate() const {
    const bool has_variant = !variant.empty();
    if (has_variant == step_flow_count.has_value()) {
        throw ContractError("AblationRunSpec: exactly one variant axis must be set");
    }
    if (has_variant && variant != "complete" && variant != "simple_affine" &&
        variant != "standard_normal_base") {
        throw ContractError("AblationRunSpec: unknown variant '" + variant + "'");
    }
    if (step_flow_count.has_value() && *step_flow_count < 1) {
        throw ContractError("AblationRunSpec: step_flow_count must be positive");
    }
}

std::string AblationRunSpec::label() const {
    validate();
    if (!variant.empty()) return variant;
    return "stepflows_" + std::to_string(*step_flow_count);
}

ModelConfig AblationRunSpec::apply(const ModelConfig& base) const {
    validate();
    ModelConfig cfg = base;
    cfg.ablation_simple_affine = false;
    cfg.ablation_standard_normal_base = false;
    if (variant == "simple_affine") cfg.ablation_simple_affine = true;
    if (variant == "standard_normal_base") cfg.ablation_standard_normal_base = true;
    if (step_flow_count.has_value()) cfg.n_flow_blocks = *step_flow_count;
    return cfg;
}

AblationRunSpec conditioning_spec(const std::string& variant) {
    AblationRunSpec spec;
    spec.variant = variant;
    spec.validate();
    return spec;
}

AblationRunSpec stepflow_spec(std::int64_t count) {
    AblationRunSpec spec;
    spec.step_flow_count = count;
    spec.validate();
    return spec;
}

AblationResult run_ablation_suite(std::span<const WindowSample> raw_windows,
                                  const ModelConfig& base_config,
                                  const TrainOptions& train_options,
                                  std::span<const std::string> appliance_names,
                                  const EvalOptions& eval_options, std::uint64_t seed,
                                  std::int64_t window_len, std::int64_t stride) {
    std::vector<AblationRunSpec> specs = {conditioning_spec("complete"),
                                          conditioning_spec("simple_affine"),
                                          conditioning_spec("standard_normal_base")};
    return run_ablation_suite_with(raw_windows, base_config, train_options, appliance_names,
                                   eval_options, seed, window_len, stride, specs);
}

AblationResult run_ablation_suite_with(std::span<const WindowSample> raw_windows,
                                       const ModelConfig& base_config,
                                       const TrainOptions& train_options,
                                       std::span<const std::string> appliance_names,
                                       const EvalOptions& eval_options, std::uint64_t seed,
                                       std::int64_t window_len, std::int64_t stride,
                                       std::span<const AblationRunSpec> specs) {
    if (specs.empty()) throw ContractError("run_ablation_suite: no specs given");
    for (const AblationRunSpec& s : specs) s.validate();
    train_options.validate();

    const HoldoutSplit split =
        holdout_split(static_cast<std::int64_t>(raw_windows.size()), 0.8, window_len, stride);
    std::vector<WindowSample> train_raw, test_raw;
    for (const std::int64_t i : split.train) {
        train_raw.push_back(raw_windows[static_cast<std::size_t>(i)]);
    }
    for (const std::int64_t i : split.test) {
        test_raw.push_back(raw_windows[static_cast<std::size_t>(i)]);
    }
    const NormStats stats = fit_normalizer(train_raw);
    const std::vector<WindowSample> train = apply_normalizer(stats, train_raw);
    const std::vector<WindowSample> test = apply_normalizer(stats, test_raw);

    AblationResult result;
    result.seed = seed;
    result.n_train = static_cast<std::int64_t>(train.size());
    result.n_test = static_cast<std::int64_t>(test.size());
    result.labels.resize(specs.size());
    result.reports.resize(specs.size());
    result.parameter_counts.resize(specs.size());

    run_tasks(static_cast<std::int64_t>(specs.size()), [&](std::int64_t i) {
        const std::size_t si = static_cast<std::size_t>(i);
        const ModelConfig cfg = specs[si].apply(base_config);
        cfg.validate();
        Rng rng(seed);
        PfvaeModel model(cfg, rng);
        std::vector<WindowSample> train_copy = train;
        train_model(model, std::move(train_copy), train_options, rng);

        EvalOptions eopt = eval_options;
        eopt.seed = seed ^ 0x9e3779b97f4a7c15ull;
        result.labels[si] = specs[si].label();
        result.reports[si] = evaluate(model, test, stats, appliance_names, eopt);
        result.parameter_counts[si] = model.parameter_count();
    });
    return result;
}

std::string report_to_json(const MetricsReport& report) {
    return report_json(report).dump(2) + "\n";
}

std::string report_to_table(const MetricsReport& report) {
    const std::vector<std::string> cols = metric_columns(report);
    std::vector<std::string> headers = {"machine"};
    headers.insert(headers.end(), cols.begin(), cols.end());
    std::vector<std::vector<std::string>> rows;
    auto add_row = [&](const std::string& name, const ApplianceMetrics& m) {
        std::vector<std::string> row = {name};
        for (const std::string& c : cols) row.push_back(format_value(metric_value(m, c)));
        rows.push_back(std::move(row));
    };
    for (const auto& [name, m] : report.per_appliance) add_row(name, m);
    add_row("TOTAL", report.total);
    add_row("AVERAGED", report.averaged);
    std::string out = render_table(headers, rows);
    for (const std::string& w : report.warnings) out += "warning: " + w + "\n";
    return out;
}

std::string cv_to_json(const CvResult& result) {
    json folds = json::array();
    for (const MetricsReport& fold : result.folds) folds.push_back(report_json(fold));
    json j{{"folds", folds},
           {"summary",
            {{"n_folds", result.summary.n_folds},
             {"mean", report_json(result.summary.mean)},
             {"std", report_json(result.summary.stddev)}}}};
    return j.dump(2) + "\n";
}

std::string cv_to_table(const CvResult& result) {
    const MetricsReport& mean = result.summary.mean;
    const MetricsReport& stddev = result.summary.stddev;
    const std::vector<std::string> cols = metric_columns(mean);
    std::vector<std::string> headers = {"machine"};
    headers.insert(headers.end(), cols.begin(), cols.end());
    std::vector<std::vector<std::string>> rows;
    auto add_row = [&](const std::string& name, const ApplianceMetrics& m,
                       const ApplianceMetrics& s) {
        std::vector<std::string> row = {name};
        for (const std::string& c : cols) {
            row.push_back(format_value(metric_value(m, c)) + " +/- " +
                          format_value(metric_value(s, c)));
        }
        rows.push_back(std::move(row));
    };
    for (std::size_t i = 0; i < mean.per_appliance.size(); ++i) {
        add_row(mean.per_appliance[i].first, mean.per_appliance[i].second,
                stddev.per_appliance[i].second);
    }
    add_row("TOTAL", mean.total, stddev.total);
    add_row("AVERAGED", mean.averaged, stddev.averaged);
    std::ostringstream out;
    out << result.summary.n_folds << "-fold cross validation (mean +/- sample std)\n";
    out << render_table(headers, rows);
    return out.str();
}

std::string ablation_to_json(const AblationResult& result) {
    json variants = json::object();
    for (std::size_t i = 0; i < result.labels.size(); ++i) {
        json v = report_json(result.reports[i]);
        v["parameter_count"] = result.parameter_counts[i];
        variants[result.labels[i]] = v;
    }
    json j{{"seed", result.seed},
           {"split", {{"train_windows", result.n_train}, {"test_windows", result.n_test}}},
           {"variants", variants},
           {"variant_order", result.labels}};
    return j.dump(2) + "\n";
}

std::string ablation_to_table(const AblationResult& result) {
    // Union of machine names across variants, first-seen order.
    std::vector<std::string> machines;
    for (const MetricsReport& r : result.reports) {
        for (const auto& [name, m] : r.per_appliance) {
            if (std::find(machines.begin(), machines.end(), name) == machines.end()) {
                machines.push_back(name);
            }
        }
    }
    const bool with_sqrt = !result.reports.empty() &&
                           result.reports.front().total.nde_sqrt.has_value();
    std::vector<std::string> cols = {"SAE", "NDE"};
    if (with_sqrt) cols.push_back("NDE_SQRT");

    std::vector<std::string> headers = {"machine"};
    for (const std::string& label : result.labels) {
        for (const std::string& c : cols) headers.push_back(label + " " + c);
    }
    auto find_metrics = [](const MetricsReport& r,
                           const std::string& name) -> const ApplianceMetrics* {
        for (const auto& [n, m] : r.per_appliance) {
            if (n == name) return &m;
        }
        return nullptr;
    };
    std::vector<std::vector<std::string>> rows;
    for (const std::string& machine : machines) {
        std::vector<std::string> row = {machine};
        for (const MetricsReport& r : result.reports) {
            const ApplianceMetrics* m = find_metrics(r, machine);
            for (const std::string& c : cols) {
                row.push_back(m ? format_value(metric_value(*m, c)) : "-");
            }
        }
        rows.push_back(std::move(row));
    }
    auto add_summary_row = [&](const std::string& name, bool averaged) {
        std::vector<std::string> row = {name};
        for (const MetricsReport& r : result.reports) {
            const ApplianceMetrics& m = averaged ? r.averaged : r.total;
            for (const std::string& c : cols) row.push_back(format_value(metric_value(m, c)));
        }
        rows.push_back(std::move(row));
    };
    add_summary_row("TOTAL", false);
    add_summary_row("AVERAGED", true);

    std::ostringstream out;
    out << "ablation suite, seed " << result.seed << ", split " << result.n_train
        << " train / " << result.n_test << " test windows\n";
    out << render_table(headers, rows);
    return out.str();
}

}  // namespace flowdisagg
