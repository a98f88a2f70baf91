#include "flowdisagg/model.hpp"

#include <algorithm>
#include <cmath>

#include "flowdisagg/exceptions.hpp"

namespace flowdisagg {

void ModelConfig::validate(std::vector<std::string>* warnings) const {
    const auto positive = [](std::int64_t v, const char* name) {
        if (v < 1) throw ContractError(std::string("ModelConfig: ") + name + " must be positive");
    };
    positive(window_len, "window_len");
    positive(n_input_channels, "n_input_channels");
    positive(n_appliances, "n_appliances");
    positive(latent_channels, "latent_channels");
    positive(latent_len, "latent_len");
    positive(n_encoder_blocks, "n_encoder_blocks");
    positive(n_decoder_blocks, "n_decoder_blocks");
    positive(n_flow_blocks, "n_flow_blocks");
    positive(hidden_channels, "hidden_channels");
    if (!(prior_weight >= 0.0) || !std::isfinite(prior_weight))
        throw ContractError("ModelConfig: prior_weight must be finite and non-negative");
    if (n_encoder_blocks >= 62 || (window_len >> n_encoder_blocks) << n_encoder_blocks != window_len)
        throw ContractError("ModelConfig: window_len must be divisible by 2^n_encoder_blocks");
    if (latent_len != window_len >> n_encoder_blocks)
        throw ContractError("ModelConfig: latent_len must equal window_len / 2^n_encoder_blocks");
    if (latent_len << n_decoder_blocks != window_len)
        throw ContractError(
            "ModelConfig: latent_len * 2^n_decoder_blocks must reconstruct window_len");
    const bool usual = n_flow_blocks == 2 || n_flow_blocks == 4 || n_flow_blocks == 8 ||
                       n_flow_blocks == 16 || n_flow_blocks == 32;
    if (!usual && warnings) {
        warnings->push_back("n_flow_blocks=" + std::to_string(n_flow_blocks) +
                            " is outside the studied sweep {2,4,8,16,32}");
    }
}

GatedBlock::GatedBlock(std::int64_t c_in, std::int64_t c_out, Rng& rng)
    : stage0(c_in, c_out, 3, 1, 1, rng), stage1(c_out, c_out, 4, 2, 1, rng) {}

Tensor GatedBlock::forward(const Tensor& x) const { return stage1.forward(stage0.forward(x)); }

void GatedBlock::collect_params(ParamMap& out, const std::string& prefix) {
    stage0.collect_params(out, prefix + ".stage0");
    stage1.collect_params(out, prefix + ".stage1");
}

DecoderBlock::DecoderBlock(std::int64_t c_in, std::int64_t c_out, Rng& rng)
    : conv(c_in, c_out, 3, 1, 1, rng) {}

Tensor DecoderBlock::forward(const Tensor& x) const { return conv.forward(upsample2x(x)); }

void DecoderBlock::collect_params(ParamMap& out, const std::string& prefix) {
    conv.collect_params(out, prefix + ".conv");
}

PfvaeModel::PfvaeModel(const ModelConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const std::int64_t hidden = config_.hidden_channels;

    std::int64_t c = config_.n_appliances + config_.n_input_channels;
    for (std::int64_t i = 0; i < config_.n_encoder_blocks; ++i) {
        encoder_blocks.emplace_back(c, hidden, rng);
        c = hidden;
    }
    encoder_head = Conv1dLayer(hidden, config_.latent_channels, 3, 1, 1, rng);

    c = config_.n_input_channels;
    for (std::int64_t i = 0; i < config_.n_encoder_blocks; ++i) {
        cond_blocks.emplace_back(c, hidden, rng);
        c = hidden;
    }

    cnf = CnfModel(config_.latent_channels, hidden, hidden, config_.n_flow_blocks,
                   !config_.ablation_simple_affine, rng);

    c = config_.latent_channels + hidden;
    for (std::int64_t i = 0; i < config_.n_decoder_blocks; ++i) {
        decoder_blocks.emplace_back(c, hidden, rng);
        c = hidden;
    }
    decoder_head0 = Conv1dLayer(hidden, hidden, 3, 1, 1, rng);
    decoder_head1 = Conv1dLayer(hidden, config_.n_appliances, 1, 1, 0, rng);

    mu_fixed_ = Tensor::zeros({config_.latent_channels, config_.latent_len});
    sigma_fixed_ = Tensor::full({config_.latent_channels, config_.latent_len}, 1.0f);
}

void PfvaeModel::check_x(const Tensor& x) const {
    if (!x.defined() || x.ndim() != 2 || x.dim(0) != config_.n_appliances ||
        x.dim(1) != config_.window_len)
        throw DimensionError("PfvaeModel: x must be (" + std::to_string(config_.n_appliances) +
                             ", " + std::to_string(config_.window_len) + "), got " +
                             (x.defined() ? shape_to_string(x.shape()) : "undefined"));
}

void PfvaeModel::check_y(const Tensor& y) const {
    if (!y.defined() || y.ndim() != 2 || y.dim(0) != config_.n_input_channels ||
        y.dim(1) != config_.window_len)
        throw DimensionError("PfvaeModel: y must be (" + std::to_string(config_.n_input_channels) +
                             ", " + std::to_string(config_.window_len) + "), got " +
                             (y.defined() ? shape_to_string(y.shape()) : "undefined"));
}

Tensor PfvaeModel::encode(const Tensor& x, const Tensor& y) const {
    check_x(x);
    check_y(y);
    Tensor cur = concat_rows(x, y);
    for (const auto& block : encoder_blocks) cur = block.forward(cur);
    return encoder_head.forward(cur);
}

ConditioningOutput PfvaeModel::condition(const Tensor& y) const {
    check_y(y);
    Tensor cur = y;
    for (const auto& block : cond_blocks) cur = block.forward(cur);
    ConditioningOutput out;
    out.h = cur;
    if (config_.ablation_standard_normal_base) {
        out.mu = mu_fixed_;
        out.sigma = sigma_fixed_;
    } else {
        auto [mu, sigma] = cnf.base.params_for(cur, config_.latent_len);
        out.mu = mu;
        out.sigma = sigma;
    }
    return out;
}

Tensor PfvaeModel::decode(const Tensor& z0, const Tensor& h) const {
    if (!z0.defined() || z0.ndim() != 2 || z0.dim(0) != config_.latent_channels ||
        z0.dim(1) != config_.latent_len)
        throw DimensionError("PfvaeModel::decode: z0 must be (" +
                             std::to_string(config_.latent_channels) + ", " +
                             std::to_string(config_.latent_len) + ")");
    if (!h.defined() || h.ndim() != 2 || h.dim(0) != config_.hidden_channels ||
        h.dim(1) != config_.latent_len)
        throw DimensionError("PfvaeModel::decode: h must be (" +
                             std::to_string(config_.hidden_channels) + ", " +
                             std::to_string(config_.latent_len) + ")");
    Tensor cur = concat_rows(z0, h);
    for (const auto& block : decoder_blocks) cur = block.forward(cur);
    return decoder_head1.forward(decoder_head0.forward(cur));
}

LossBreakdown PfvaeModel::training_step(std::span<const WindowSample> batch) {
    if (batch.empty()) throw ContractError("training_step: empty batch");
    for (const auto& s : batch) {
        check_x(s.x);
        check_y(s.y);
    }

    if (!cnf.initialized()) {
        NoGradGuard ng;
        std::vector<Tensor> z0s, hs;
        z0s.reserve(batch.size());
        hs.reserve(batch.size());
        for (const auto& s : batch) {
            z0s.push_back(encode(s.x, s.y));
            hs.push_back(condition(s.y).h);
        }
        cnf.initialize(z0s, hs);
    }

    Tensor recon_sum, prior_sum;
    for (const auto& s : batch) {
        const Tensor z0 = encode(s.x, s.y);
        const ConditioningOutput co = condition(s.y);
        const Tensor x_hat = decode(z0, co.h);
        const Tensor recon_i = mse(x_hat, s.x);
        const Tensor prior_i = neg(cnf.log_prob(z0, co.h, co.mu, co.sigma));
        recon_sum = recon_sum.defined() ? add(recon_sum, recon_i) : recon_i;
        prior_sum = prior_sum.defined() ? add(prior_sum, prior_i) : prior_i;
    }
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    LossBreakdown loss;
    loss.reconstruction = mul_scalar(recon_sum, inv_b);
    loss.prior = mul_scalar(prior_sum, inv_b);
    if (!std::isfinite(loss.reconstruction.item()))
        throw NumericError("training_step: reconstruction term is not finite");
    if (!std::isfinite(loss.prior.item()))
        throw NumericError("training_step: prior term is not finite");
    loss.total = add(loss.reconstruction,
                     mul_scalar(loss.prior, static_cast<float>(config_.prior_weight)));
    return loss;
}

std::vector<Tensor> PfvaeModel::sample(const Tensor& y, std::int64_t n_samples, Rng& rng) const {
    if (n_samples < 0) throw ContractError("sample: n_samples must be non-negative");
    std::vector<Tensor> out;
    if (n_samples == 0) return out;
    if (!cnf.initialized()) throw ContractError("sample: model is not initialized");
    NoGradGuard ng;
    const ConditioningOutput co = condition(y);
    out.reserve(static_cast<std::size_t>(n_samples));
    for (std::int64_t i = 0; i < n_samples; ++i) {
        const Tensor noise = Tensor::randn({config_.latent_channels, config_.latent_len}, rng);
        const Tensor z_k = base_sample(co.mu, co.sigma, noise);
        const Tensor z0 = cnf.inverse(z_k, co.h);
        out.push_back(decode(z0, co.h));
    }
    return out;
}

PredictSummary PfvaeModel::predict_mean(const Tensor& y, std::int64_t n_samples,
                                        Rng& rng) const {
    if (n_samples < 2) throw ContractError("predict_mean: need n_samples >= 2 for intervals");
    const std::vector<Tensor> samples = sample(y, n_samples, rng);
    const std::size_t numel = samples[0].data().size();
    std::vector<double> acc(numel, 0.0), acc2(numel, 0.0);
    for (const auto& s : samples) {
        const auto d = s.data();
        for (std::size_t i = 0; i < numel; ++i) {
            acc[i] += d[i];
            acc2[i] += static_cast<double>(d[i]) * d[i];
        }
    }
    const double n = static_cast<double>(n_samples);
    std::vector<float> mean(numel), half(numel);
    for (std::size_t i = 0; i < numel; ++i) {
        const double m = acc[i] / n;
        // n-1 denominator; guard tiny negatives from cancellation
        const double var = std::max(0.0, (acc2[i] - n * m * m) / (n - 1.0));
        mean[i] = static_cast<float>(m);
        half[i] = static_cast<float>(1.96 * std::sqrt(var) / std::sqrt(n));
    }
    PredictSummary out;
    out.mean = Tensor::from_data(samples[0].shape(), std::move(mean));
    out.half_width = Tensor::from_data(samples[0].shape(), std::move(half));
    return out;
}

ParamMap PfvaeModel::parameters() {
    ParamMap out;
    for (std::size_t i = 0; i < encoder_blocks.size(); ++i)
        encoder_blocks[i].collect_params(out, "encoder.block" + std::to_string(i));
    encoder_head.collect_params(out, "encoder.head");
    for (std::size_t i = 0; i < cond_blocks.size(); ++i)
        cond_blocks[i].collect_params(out, "conditioning.block" + std::to_string(i));
    for (std::size_t i = 0; i < cnf.blocks.size(); ++i)
        cnf.blocks[i].collect_params(out, "cnf.block" + std::to_string(i));
    if (!config_.ablation_standard_normal_base) cnf.base.collect_params(out, "cnf.base");
    for (std::size_t i = 0; i < decoder_blocks.size(); ++i)
        decoder_blocks[i].collect_params(out, "decoder.block" + std::to_string(i));
    decoder_head0.collect_params(out, "decoder.head0");
    decoder_head1.collect_params(out, "decoder.head1");
    return out;
}

std::int64_t PfvaeModel::parameter_count() {
    std::int64_t count = 0;
    for (const auto& [name, p] : parameters()) count += p.size();
    return count;
}

}  // namespace flowdisagg
