#include "flowdisagg/flow.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <utility>

namespace flowdisagg {

namespace {

constexpr float kLogScaleClamp = 5.0f;
constexpr float kSigmaRawClamp = 7.0f;
constexpr double kLn2Pi = 1.8378770664093453;

void check_latent(const Tensor& z, std::int64_t channels, const char* who) {
    if (!z.defined() || z.ndim() != 2) {
        throw DimensionError(std::string(who) + ": latent must be a 2-D (channels x time) tensor");
    }
    if (z.dim(0) != channels) {
        throw DimensionError(std::string(who) + ": latent has " + std::to_string(z.dim(0)) +
                             " channels on axis 0, layer expects " + std::to_string(channels));
    }
}

using RowMatf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

// ---- ActNorm ---------------------------------------------------------------

ActNorm::ActNorm(std::int64_t channels) {
    if (channels <= 0) throw DimensionError("ActNorm: channel count must be positive");
    scale = Tensor::full({channels, 1}, 1.0f, true);
    bias = Tensor::zeros({channels, 1}, true);
}

void ActNorm::initialize(const Tensor& first_batch) {
    if (initialized_) throw ContractError("ActNorm::initialize: layer is already initialized");
    if (!first_batch.defined() || first_batch.ndim() != 3) {
        throw DimensionError("ActNorm::initialize: first batch must be 3-D (batch x C x T)");
    }
    const std::int64_t c = channels();
    if (first_batch.dim(1) != c) {
        throw DimensionError("ActNorm::initialize: batch has " +
                             std::to_string(first_batch.dim(1)) + " channels on axis 1, expected " +
                             std::to_string(c));
    }
    const std::int64_t b = first_batch.dim(0), t = first_batch.dim(2);
    if (b * t < 2) {
        throw ContractError("ActNorm::initialize: need at least 2 values per channel");
    }
    const auto v = first_batch.data();
    auto s = scale.raw_data();
    auto bi = bias.raw_data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0, acc2 = 0.0;
        for (std::int64_t sample = 0; sample < b; ++sample) {
            const float* row = v.data() + (sample * c + ch) * t;
            for (std::int64_t j = 0; j < t; ++j) {
                acc += row[j];
                acc2 += static_cast<double>(row[j]) * row[j];
            }
        }
        const double n = static_cast<double>(b * t);
        const double mean = acc / n;
        const double var = acc2 / n - mean * mean;
        if (!(var > 1e-12)) {
            throw DegenerateStatsError("ActNorm::initialize: channel " + std::to_string(ch) +
                                       " has zero variance");
        }
        const double stddev = std::sqrt(var);
        s[static_cast<std::size_t>(ch)] = static_cast<float>(1.0 / stddev);
        bi[static_cast<std::size_t>(ch)] = static_cast<float>(-mean / stddev);
    }
    initialized_ = true;
}

void ActNorm::initialize_identity() {
    if (initialized_) throw ContractError("ActNorm::initialize_identity: already initialized");
    initialized_ = true;
}

FlowResult ActNorm::forward(const Tensor& z) const {
    if (!initialized_) throw ContractError("ActNorm::forward: layer is not initialized");
    check_latent(z, channels(), "ActNorm::forward");
    const std::int64_t t = z.dim(1);
    FlowResult r;
    r.code = add(mul(z, scale), bias);
    // T * sum_c log|s_c|, written as T/2 * sum log(s^2) to stay on the tape
    r.log_det = mul_scalar(sum(log(square(scale))), 0.5f * static_cast<float>(t));
    return r;
}

Tensor ActNorm::inverse(const Tensor& code) const {
    if (!initialized_) throw ContractError("ActNorm::inverse: layer is not initialized");
    check_latent(code, channels(), "ActNorm::inverse");
    const std::int64_t c = code.dim(0), t = code.dim(1);
    Tensor out = Tensor::zeros(code.shape());
    auto o = out.raw_data();
    const auto v = code.data();
    const auto s = scale.data();
    const auto b = bias.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const float sc = s[static_cast<std::size_t>(ch)];
        if (std::abs(sc) < 1e-20f) {
            throw NumericError("ActNorm::inverse: scale of channel " + std::to_string(ch) +
                               " is numerically zero");
        }
        for (std::int64_t j = 0; j < t; ++j) {
            o[static_cast<std::size_t>(ch * t + j)] =
                (v[static_cast<std::size_t>(ch * t + j)] - b[static_cast<std::size_t>(ch)]) / sc;
        }
    }
    return out;
}

void ActNorm::collect_params(ParamMap& out, const std::string& prefix) {
    out.emplace_back(prefix + ".scale", scale);
    out.emplace_back(prefix + ".bias", bias);
}

// ---- InvConv1x1 -------------------------------------------------------------

InvConv1x1::InvConv1x1(std::int64_t channels, Rng& rng) {
    if (channels <= 0) throw DimensionError("InvConv1x1: channel count must be positive");
    Eigen::MatrixXd g(channels, channels);
    for (std::int64_t i = 0; i < channels; ++i) {
        for (std::int64_t j = 0; j < channels; ++j) g(i, j) = rng.normal();
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (std::int64_t j = 0; j < channels; ++j) {
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    }
    weight = Tensor::zeros({channels, channels}, true);
    auto w = weight.raw_data();
    for (std::int64_t i = 0; i < channels; ++i) {
        for (std::int64_t j = 0; j < channels; ++j) {
            w[static_cast<std::size_t>(i * channels + j)] = static_cast<float>(q(i, j));
        }
    }
}

FlowResult InvConv1x1::forward(const Tensor& z) const {
    if (!weight.defined()) throw ContractError("InvConv1x1: layer is not constructed");
    check_latent(z, weight.dim(0), "InvConv1x1::forward");
    FlowResult r;
    r.code = matmul(weight, z);
    r.log_det = mul_scalar(log_abs_det(weight), static_cast<float>(z.dim(1)));
    return r;
}

Tensor InvConv1x1::inverse(const Tensor& code) const {
    if (!weight.defined()) throw ContractError("InvConv1x1: layer is not constructed");
    check_latent(code, weight.dim(0), "InvConv1x1::inverse");
    const std::int64_t c = weight.dim(0), t = code.dim(1);
    Eigen::Map<const RowMatf> w(weight.data().data(), c, c);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(w.cast<double>());
    double log_abs = 0.0;
    for (std::int64_t i = 0; i < c; ++i) {
        const double d = std::abs(lu.matrixLU()(i, i));
        if (d == 0.0) throw SingularMatrixError("InvConv1x1::inverse: singular weight matrix");
        log_abs += std::log(d);
    }
    if (log_abs < std::log(1e-12)) {
        throw SingularMatrixError("InvConv1x1::inverse: |det W| below 1e-12");
    }
    Eigen::Map<const RowMatf> y(code.data().data(), c, t);
    const Eigen::MatrixXd x = lu.solve(y.cast<double>());
    Tensor out = Tensor::zeros({c, t});
    auto o = out.raw_data();
    for (std::int64_t i = 0; i < c; ++i) {
        for (std::int64_t j = 0; j < t; ++j) {
            o[static_cast<std::size_t>(i * t + j)] = static_cast<float>(x(i, j));
        }
    }
    return out;
}

void InvConv1x1::collect_params(ParamMap& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", weight);
}

// ---- AffineCoupling ---------------------------------------------------------

AffineCoupling::AffineCoupling(std::int64_t channels, std::int64_t h_channels,
                               std::int64_t hidden, bool conditional, Rng& rng)
    : conditional_(conditional), h_channels_(h_channels) {
    if (channels < 2) {
        throw DimensionError("AffineCoupling: need at least 2 channels to split, got " +
                             std::to_string(channels));
    }
    if (hidden <= 0) throw DimensionError("AffineCoupling: hidden width must be positive");
    if (conditional_ && h_channels_ <= 0) {
        throw DimensionError("AffineCoupling: conditional layer needs conditioning channels");
    }
    c_a_ = (channels + 1) / 2;
    c_b_ = channels - c_a_;
    const std::int64_t body_in = c_a_ + (conditional_ ? h_channels_ : 0);
    body = GatedConv(body_in, hidden, 3, 1, 1, rng);
    head = Conv1dLayer::zero_init(hidden, 2 * c_b_, 3, 1, 1);
}

std::pair<Tensor, Tensor> AffineCoupling::scale_translation(const Tensor& z_a,
                                                            const Tensor& h) const {
    Tensor body_in = z_a;
    if (conditional_) {
        if (!h.defined() || h.ndim() != 2 || h.dim(0) != h_channels_) {
            throw DimensionError("AffineCoupling: conditioning features must be 2-D with " +
                                 std::to_string(h_channels_) + " channels");
        }
        body_in = concat_rows(z_a, resample_nearest(h, z_a.dim(1)));
    }
    Tensor raw = head.forward(body.forward(body_in));
    Tensor logs = clamp(slice_rows(raw, 0, c_b_), -kLogScaleClamp, kLogScaleClamp);
    Tensor translation = slice_rows(raw, c_b_, c_b_);
    return {logs, translation};
}

FlowResult AffineCoupling::forward(const Tensor& z, const Tensor& h) const {
    check_latent(z, c_a_ + c_b_, "AffineCoupling::forward");
    Tensor z_a = slice_rows(z, 0, c_a_);
    Tensor z_b = slice_rows(z, c_a_, c_b_);
    auto [logs, translation] = scale_translation(z_a, h);
    FlowResult r;
    r.code = concat_rows(z_a, add(mul(z_b, exp(logs)), translation));
    r.log_det = sum(logs);
    return r;
}

Tensor AffineCoupling::inverse(const Tensor& code, const Tensor& h) const {
    check_latent(code, c_a_ + c_b_, "AffineCoupling::inverse");
    NoGradGuard ng;
    Tensor z_a = slice_rows(code, 0, c_a_);
    Tensor code_b = slice_rows(code, c_a_, c_b_);
    auto [logs, translation] = scale_translation(z_a, h);
    Tensor z_b = mul(sub(code_b, translation), exp(neg(logs)));
    return concat_rows(z_a, z_b);
}

void AffineCoupling::collect_params(ParamMap& out, const std::string& prefix) {
    body.collect_params(out, prefix + ".body");
    head.collect_params(out, prefix + ".head");
}

// ---- StepFlowBlock ----------------------------------------------------------

StepFlowBlock::StepFlowBlock(std::int64_t channels, std::int64_t h_channels,
                             std::int64_t hidden, bool conditional_coupling, Rng& rng)
    : actnorm(channels), perm(channels, rng) {
    if (channels >= 2) {
        coupling.emplace(channels, h_channels, hidden, conditional_coupling, rng);
    }
}

FlowResult StepFlowBlock::forward(const Tensor& z, const Tensor& h, const TraceFn& trace,
                                  const std::string& name) const {
    if (trace) trace(name + ".actnorm.forward");
    FlowResult r = actnorm.forward(z);
    if (trace) trace(name + ".invconv.forward");
    FlowResult p = perm.forward(r.code);
    Tensor code = p.code;
    Tensor log_det = add(r.log_det, p.log_det);
    if (coupling) {
        if (trace) trace(name + ".coupling.forward");
        FlowResult c = coupling->forward(code, h);
        code = c.code;
        log_det = add(log_det, c.log_det);
    }
    return {code, log_det};
}

Tensor StepFlowBlock::inverse(const Tensor& code, const Tensor& h, const TraceFn& trace,
                              const std::string& name) const {
    Tensor z = code;
    if (coupling) {
        if (trace) trace(name + ".coupling.inverse");
        z = coupling->inverse(z, h);
    }
    if (trace) trace(name + ".invconv.inverse");
    z = perm.inverse(z);
    if (trace) trace(name + ".actnorm.inverse");
    return actnorm.inverse(z);
}

void StepFlowBlock::collect_params(ParamMap& out, const std::string& prefix) {
    actnorm.collect_params(out, prefix + ".actnorm");
    perm.collect_params(out, prefix + ".invconv");
    if (coupling) coupling->collect_params(out, prefix + ".coupling");
}

// ---- ConditionalBase ---------------------------------------------------------

ConditionalBase::ConditionalBase(std::int64_t h_channels, std::int64_t latent_channels,
                                 Rng& rng)
    : mu_head(h_channels, latent_channels, 3, 1, 1, rng),
      sigma_head(h_channels, latent_channels, 3, 1, 1, rng) {}

std::pair<Tensor, Tensor> ConditionalBase::params_for(const Tensor& h,
                                                      std::int64_t t_latent) const {
    if (!mu_head.kernels.defined()) {
        throw ContractError("ConditionalBase: heads are not constructed");
    }
    Tensor mu = resample_nearest(mu_head.forward(h), t_latent);
    Tensor raw = resample_nearest(sigma_head.forward(h), t_latent);
    Tensor sigma = exp(clamp(raw, -kSigmaRawClamp, kSigmaRawClamp));
    return {mu, sigma};
}

void ConditionalBase::collect_params(ParamMap& out, const std::string& prefix) {
    mu_head.collect_params(out, prefix + ".mu_head");
    sigma_head.collect_params(out, prefix + ".sigma_head");
}

// ---- base distribution ---------------------------------------------------------

Tensor base_log_prob(const Tensor& z, const Tensor& mu, const Tensor& sigma) {
    if (!z.defined() || !mu.defined() || !sigma.defined()) {
        throw ContractError("base_log_prob: undefined operand");
    }
    if (z.shape() != mu.shape() || z.shape() != sigma.shape()) {
        throw DimensionError("base_log_prob: z " + shape_to_string(z.shape()) + ", mu " +
                             shape_to_string(mu.shape()) + ", sigma " +
                             shape_to_string(sigma.shape()) + " must agree");
    }
    const double d = static_cast<double>(z.size());
    Tensor log_sigma = log(sigma);  // also enforces sigma > 0
    Tensor quad = sum(mul(square(sub(z, mu)), exp(mul_scalar(log_sigma, -2.0f))));
    Tensor lp = add(mul_scalar(sum(log_sigma), -1.0f), mul_scalar(quad, -0.5f));
    return add(lp, Tensor::scalar(static_cast<float>(-0.5 * d * kLn2Pi)));
}

Tensor base_sample(const Tensor& mu, const Tensor& sigma, const Tensor& noise) {
    if (!mu.defined() || !sigma.defined() || !noise.defined()) {
        throw ContractError("base_sample: undefined operand");
    }
    if (mu.shape() != sigma.shape() || mu.shape() != noise.shape()) {
        throw DimensionError("base_sample: mu " + shape_to_string(mu.shape()) + ", sigma " +
                             shape_to_string(sigma.shape()) + ", noise " +
                             shape_to_string(noise.shape()) + " must agree");
    }
    for (const float s : sigma.data()) {
        if (!(s > 0.0f)) throw NumericError("base_sample: sigma must be strictly positive");
    }
    return add(mul(sigma, noise), mu);
}

// ---- CnfModel -----------------------------------------------------------------

CnfModel::CnfModel(std::int64_t channels, std::int64_t h_channels, std::int64_t hidden,
                   std::int64_t depth, bool conditional_coupling, Rng& rng) {
    if (depth < 1) throw ContractError("CnfModel: depth must be at least 1");
    blocks.reserve(static_cast<std::size_t>(depth));
    for (std::int64_t i = 0; i < depth; ++i) {
        blocks.emplace_back(channels, h_channels, hidden, conditional_coupling, rng);
    }
    base = ConditionalBase(h_channels, channels, rng);
}

void CnfModel::initialize(std::span<const Tensor> z0_batch, std::span<const Tensor> h_batch) {
    if (blocks.empty()) throw ContractError("CnfModel::initialize: model is not constructed");
    if (initialized()) throw ContractError("CnfModel::initialize: already initialized");
    if (z0_batch.empty()) throw ContractError("CnfModel::initialize: empty batch");
    if (h_batch.size() != z0_batch.size()) {
        throw DimensionError("CnfModel::initialize: batch sizes differ (" +
                             std::to_string(z0_batch.size()) + " latents, " +
                             std::to_string(h_batch.size()) + " conditionings)");
    }
    NoGradGuard ng;
    std::vector<Tensor> current(z0_batch.begin(), z0_batch.end());
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        blocks[bi].actnorm.initialize(stack0(current));
        for (std::size_t i = 0; i < current.size(); ++i) {
            current[i] = blocks[bi].forward(current[i], h_batch[i]).code;
        }
    }
}

void CnfModel::initialize_identity() {
    for (auto& b : blocks) b.actnorm.initialize_identity();
}

bool CnfModel::initialized() const {
    if (blocks.empty()) return false;
    for (const auto& b : blocks) {
        if (!b.actnorm.initialized()) return false;
    }
    return true;
}

FlowResult CnfModel::forward(const Tensor& z0, const Tensor& h) const {
    if (!initialized()) throw ContractError("CnfModel::forward: actnorms are not initialized");
    Tensor code = z0;
    Tensor log_det;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        FlowResult r = blocks[i].forward(code, h, trace_hook, "block" + std::to_string(i));
        code = r.code;
        log_det = log_det.defined() ? add(log_det, r.log_det) : r.log_det;
    }
    return {code, log_det};
}

Tensor CnfModel::inverse(const Tensor& z_k, const Tensor& h) const {
    if (!initialized()) throw ContractError("CnfModel::inverse: actnorms are not initialized");
    Tensor z = z_k;
    for (std::size_t i = blocks.size(); i-- > 0;) {
        z = blocks[i].inverse(z, h, trace_hook, "block" + std::to_string(i));
    }
    return z;
}

Tensor CnfModel::log_prob(const Tensor& z0, const Tensor& h, const Tensor& mu,
                          const Tensor& sigma) const {
    FlowResult fr = forward(z0, h);
    return add(base_log_prob(fr.code, mu, sigma), fr.log_det);
}

void CnfModel::collect_params(ParamMap& out, const std::string& prefix) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].collect_params(out, prefix + ".block" + std::to_string(i));
    }
    base.collect_params(out, prefix + ".base");
}

}  // namespace flowdisagg
