#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowdisagg/data.hpp"
#include "flowdisagg/flow.hpp"
#include "flowdisagg/nn.hpp"

namespace flowdisagg {

struct ModelConfig {
    std::int64_t window_len = 256;       // T
    std::int64_t n_input_channels = 6;   // C_in (aggregate quantities)
    std::int64_t n_appliances = 3;       // M
    std::int64_t latent_channels = 16;   // C_z
    std::int64_t latent_len = 32;        // T_z = T / 2^n_encoder_blocks
    std::int64_t n_encoder_blocks = 3;
    std::int64_t n_decoder_blocks = 3;
    std::int64_t n_flow_blocks = 8;      // K
    std::int64_t hidden_channels = 64;
    double prior_weight = 1.0;
    bool ablation_simple_affine = false;
    bool ablation_standard_normal_base = false;

    // Throws on hard violations; soft advisories (unusual flow depth) are
    // appended to `warnings` when given.
    void validate(std::vector<std::string>* warnings = nullptr) const;

    bool operator==(const ModelConfig&) const = default;
};

struct ConditioningOutput {
    Tensor h;      // (hidden, T_z)
    Tensor mu;     // (C_z, T_z)
    Tensor sigma;  // (C_z, T_z), strictly positive
};

struct LossBreakdown {
    Tensor total;           // reconstruction + prior_weight * prior
    Tensor reconstruction;  // batch-mean MSE
    Tensor prior;           // batch-mean of -log pi(z0 | y)
};

struct PredictSummary {
    Tensor mean;        // (M, T)
    Tensor half_width;  // (M, T): 1.96 * sample std / sqrt(n)
};

// conv(k3, s1, p1)+GLU then conv(k4, s2, p1)+GLU; the second stage halves
// the temporal length.
struct GatedBlock {
    GatedBlock() = default;
    GatedBlock(std::int64_t c_in, std::int64_t c_out, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    GatedConv stage0, stage1;
};

// nearest x2 temporal upsample then conv(k3, p1)+GLU.
struct DecoderBlock {
    DecoderBlock() = default;
    DecoderBlock(std::int64_t c_in, std::int64_t c_out, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    GatedConv conv;
};

// The full conditional VAE with a conditional-normalizing-flow prior:
// deterministic encoder z0 = f([x;y]), conditioning trunk h(y) with mu/sigma
// heads, decoder x_hat = g([z0; h]), and the CNF over z0.
class PfvaeModel {
public:
    PfvaeModel() = default;
    PfvaeModel(const ModelConfig& config, Rng& rng);

    Tensor encode(const Tensor& x, const Tensor& y) const;
    ConditioningOutput condition(const Tensor& y) const;
    Tensor decode(const Tensor& z0, const Tensor& h) const;

    // Mean over the batch of MSE(x, x_hat) - log pi(z0 | y). Primes the
    // flow's actnorms from this batch on the first call.
    LossBreakdown training_step(std::span<const WindowSample> batch);

    // n_samples reparameterized draws: z_k = mu + sigma*eps, z0 through the
    // CNF inverse, decoded. Untaped.
    std::vector<Tensor> sample(const Tensor& y, std::int64_t n_samples, Rng& rng) const;
    PredictSummary predict_mean(const Tensor& y, std::int64_t n_samples, Rng& rng) const;

    ParamMap parameters();
    std::int64_t parameter_count();
    const ModelConfig& config() const { return config_; }

    std::vector<GatedBlock> encoder_blocks;
    Conv1dLayer encoder_head;  // hidden -> C_z, k3 p1
    std::vector<GatedBlock> cond_blocks;
    CnfModel cnf;
    std::vector<DecoderBlock> decoder_blocks;
    Conv1dLayer decoder_head0;  // hidden -> hidden, k3 p1
    Conv1dLayer decoder_head1;  // hidden -> M, k1

private:
    void check_x(const Tensor& x) const;
    void check_y(const Tensor& y) const;

    ModelConfig config_;
    Tensor mu_fixed_, sigma_fixed_;  // standard-normal-base ablation buffers
};

}  // namespace flowdisagg
