#include "flowdisagg/adam.hpp"

#include <cmath>

#include "flowdisagg/exceptions.hpp"

namespace flowdisagg {

void AdamOptions::validate() const {
    if (!(lr > 0.0)) throw ContractError("AdamOptions: lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ContractError("AdamOptions: beta1 must be in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ContractError("AdamOptions: beta2 must be in (0,1)");
    if (!(eps > 0.0)) throw ContractError("AdamOptions: eps must be positive");
}

Adam::Adam(ParamMap params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
    options_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, p] : params_) {
        if (!p.defined()) throw ContractError("Adam: parameter '" + name + "' is not defined");
        if (!p.requires_grad()) {
            throw ContractError("Adam: parameter '" + name + "' does not require grad");
        }
        m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0f);
        v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0f);
    }
}

void Adam::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_count_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        auto& [name, p] = params_[pi];
        if (!p.has_grad()) {
            throw ContractError("Adam::step: parameter '" + name + "' has no gradient");
        }
        const auto g = p.grad();
        auto w = p.raw_data();
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = options_.beta1 * static_cast<double>(m[i]) +
                              (1.0 - options_.beta1) * gi;
            const double vi = options_.beta2 * static_cast<double>(v[i]) +
                              (1.0 - options_.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double update = options_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + options_.eps);
            w[i] = static_cast<float>(static_cast<double>(w[i]) - update);
        }
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

void Adam::set_step_count(std::int64_t n) {
    if (n < 0) throw ContractError("Adam::set_step_count: negative step count");
    step_count_ = n;
}

}  // namespace flowdisagg
