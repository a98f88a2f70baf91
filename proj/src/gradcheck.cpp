#include "flowdisagg/gradcheck.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "flowdisagg/exceptions.hpp"

namespace flowdisagg {

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& at,
                               double eps) {
    if (!(eps > 1e-8 && eps < 1e-2)) {
        throw ContractError("finite_difference_check: eps " + std::to_string(eps) +
                            " outside (1e-8, 1e-2)");
    }
    if (!at.defined()) throw ContractError("finite_difference_check: point is not defined");

    const auto base = at.data();
    Tensor x = Tensor::from_data(at.shape(), std::vector<float>(base.begin(), base.end()), true);

    x.zero_grad();
    Tensor loss = f(x);
    loss.backward();
    const auto g = x.grad();
    std::vector<double> analytic(g.begin(), g.end());

    auto probe = [&](std::size_t i, float v) -> double {
        x.raw_data()[i] = v;
        NoGradGuard ng;
        const double out = f(x).item_f64();
        if (!std::isfinite(out)) {
            throw NumericError("finite_difference_check: non-finite probe value at coordinate " +
                               std::to_string(i));
        }
        return out;
    };

    double max_rel = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        if (!std::isfinite(analytic[i])) {
            throw NumericError("finite_difference_check: non-finite gradient at coordinate " +
                               std::to_string(i));
        }
        const float orig = base[i];
        const float plus = static_cast<float>(static_cast<double>(orig) + eps);
        const float minus = static_cast<float>(static_cast<double>(orig) - eps);
        const double fp = probe(i, plus);
        const double fm = probe(i, minus);
        x.raw_data()[i] = orig;
        const double span = static_cast<double>(plus) - static_cast<double>(minus);
        const double numeric = (fp - fm) / span;
        const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        if (rel > max_rel) max_rel = rel;
    }
    return max_rel;
}

ParamCheckResult finite_difference_check_params(const std::function<Tensor()>& loss_fn,
                                                ParamMap& params, double eps,
                                                std::int64_t coords_per_param, Rng& rng) {
    if (!(eps > 1e-8 && eps < 1e-2)) {
        throw ContractError("finite_difference_check_params: eps " + std::to_string(eps) +
                            " outside (1e-8, 1e-2)");
    }
    if (params.empty()) throw ContractError("finite_difference_check_params: no parameters");
    if (coords_per_param < 1)
        throw ContractError("finite_difference_check_params: coords_per_param must be positive");
    for (const auto& [name, p] : params) {
        if (!p.defined() || !p.requires_grad())
            throw ContractError("finite_difference_check_params: parameter '" + name +
                                "' is not a trainable leaf");
    }

    for (auto& [name, p] : params) p.zero_grad();
    Tensor loss = loss_fn();
    if (loss.size() != 1)
        throw ContractError("finite_difference_check_params: loss is not a scalar");
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) {
        const auto g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
    }

    const auto probe = [&](Tensor& p, std::size_t i, float v) -> double {
        const float saved = p.raw_data()[i];
        p.raw_data()[i] = v;
        double out;
        {
            NoGradGuard ng;
            out = loss_fn().item_f64();
        }
        p.raw_data()[i] = saved;
        if (!std::isfinite(out)) {
            throw NumericError("finite_difference_check_params: non-finite probe value");
        }
        return out;
    };

    ParamCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, p] = params[pi];
        const std::size_t numel = p.data().size();
        std::vector<std::size_t> coords;
        if (static_cast<std::int64_t>(numel) <= coords_per_param) {
            coords.resize(numel);
            for (std::size_t i = 0; i < numel; ++i) coords[i] = i;
        } else {
            const auto perm = rng.permutation(numel);
            coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(coords_per_param));
        }
        for (const std::size_t i : coords) {
            const double a = analytic[pi][i];
            if (!std::isfinite(a)) {
                throw NumericError("finite_difference_check_params: non-finite gradient in '" +
                                   name + "'");
            }
            const float orig = p.data()[i];
            const float plus = static_cast<float>(static_cast<double>(orig) + eps);
            const float minus = static_cast<float>(static_cast<double>(orig) - eps);
            const double fp = probe(p, i, plus);
            const double fm = probe(p, i, minus);
            const double span = static_cast<double>(plus) - static_cast<double>(minus);
            const double numeric = (fp - fm) / span;
            const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = name;
            }
        }
    }
    return result;
}

}  // namespace flowdisagg
