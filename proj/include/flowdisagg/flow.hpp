#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowdisagg/nn.hpp"
#include "flowdisagg/tensor.hpp"

namespace flowdisagg {

// Output of an invertible map: the transformed code plus the accumulated
// log-|det Jacobian| of the forward direction (a taped scalar).
struct FlowResult {
    Tensor code;
    Tensor log_det;
};

// Optional call-order instrumentation threaded through the flow stack.
using TraceFn = std::function<void(const std::string&)>;

// Per-channel affine map z -> s*z + b with data-dependent initialization
// from the first training batch. s and b stay trainable afterwards.
class ActNorm {
public:
    ActNorm() = default;
    explicit ActNorm(std::int64_t channels);

    // first_batch is B x C x T; sets s, b so each channel of s*x + b has
    // mean 0 and std 1 (population statistics) on this batch.
    void initialize(const Tensor& first_batch);
    // Adopt s=1, b=0 without statistics (identity map). Used when
    // parameters are about to be restored from a checkpoint and in tests.
    void initialize_identity();
    bool initialized() const { return initialized_; }

    FlowResult forward(const Tensor& z) const;
    Tensor inverse(const Tensor& code) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    std::int64_t channels() const { return scale.defined() ? scale.dim(0) : 0; }

    Tensor scale;  // (C, 1)
    Tensor bias;   // (C, 1)

private:
    bool initialized_ = false;
};

// Invertible 1x1 convolution: one dense C x C matrix applied per timestep.
// Initialized to a random orthogonal matrix so the starting log-det is 0.
class InvConv1x1 {
public:
    InvConv1x1() = default;
    InvConv1x1(std::int64_t channels, Rng& rng);

    FlowResult forward(const Tensor& z) const;
    Tensor inverse(const Tensor& code) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    Tensor weight;  // C x C
};

// Affine coupling: the first ceil(C/2) channels pass through and drive a
// small gated-conv backbone that outputs log-scale and translation for the
// rest. With `conditional` set, the conditioning features h are
// concatenated onto the pass-through half (nearest-resampled in time).
// The final backbone layer is zero-initialized, so a fresh layer is the
// identity map.
class AffineCoupling {
public:
    AffineCoupling() = default;
    AffineCoupling(std::int64_t channels, std::int64_t h_channels, std::int64_t hidden,
                   bool conditional, Rng& rng);

    FlowResult forward(const Tensor& z, const Tensor& h) const;
    Tensor inverse(const Tensor& code, const Tensor& h) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    bool conditional() const { return conditional_; }
    std::int64_t pass_channels() const { return c_a_; }
    std::int64_t transform_channels() const { return c_b_; }

    GatedConv body;
    Conv1dLayer head;  // hidden -> 2*c_b, zero-initialized

private:
    // (clamped log-scale, translation) for the transformed half
    std::pair<Tensor, Tensor> scale_translation(const Tensor& z_a, const Tensor& h) const;

    bool conditional_ = true;
    std::int64_t c_a_ = 0;
    std::int64_t c_b_ = 0;
    std::int64_t h_channels_ = 0;
};

// actnorm -> invertible 1x1 conv -> affine coupling. With a single latent
// channel the coupling stage is omitted (its split would produce an empty
// half); actnorm and the 1x1 conv still form a valid invertible block.
class StepFlowBlock {
public:
    StepFlowBlock() = default;
    StepFlowBlock(std::int64_t channels, std::int64_t h_channels, std::int64_t hidden,
                  bool conditional_coupling, Rng& rng);

    FlowResult forward(const Tensor& z, const Tensor& h, const TraceFn& trace = {},
                       const std::string& name = {}) const;
    Tensor inverse(const Tensor& code, const Tensor& h, const TraceFn& trace = {},
                   const std::string& name = {}) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    ActNorm actnorm;
    InvConv1x1 perm;
    std::optional<AffineCoupling> coupling;
};

// Convolutional heads mapping conditioning features h to the base
// distribution parameters mu and sigma over the latent shape.
// sigma = exp(clamp(raw, -7, 7)) keeps it strictly positive.
class ConditionalBase {
public:
    ConditionalBase() = default;
    ConditionalBase(std::int64_t h_channels, std::int64_t latent_channels, Rng& rng);

    std::pair<Tensor, Tensor> params_for(const Tensor& h, std::int64_t t_latent) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    Conv1dLayer mu_head;
    Conv1dLayer sigma_head;
};

// log N(z; mu, sigma) summed over all elements. sigma must be positive.
Tensor base_log_prob(const Tensor& z, const Tensor& mu, const Tensor& sigma);

// mu + sigma * noise with caller-supplied unit normals.
Tensor base_sample(const Tensor& mu, const Tensor& sigma, const Tensor& noise);

// The conditional normalizing flow: K step-flow blocks over a fixed latent
// shape plus the conditional base. Forward maps z0 -> z_k and accumulates
// the log-det; log_prob is the exact change-of-variables density.
class CnfModel {
public:
    CnfModel() = default;
    CnfModel(std::int64_t channels, std::int64_t h_channels, std::int64_t hidden,
             std::int64_t depth, bool conditional_coupling, Rng& rng);

    // Data-dependent actnorm priming: the batch is pushed through the
    // stack so each block's actnorm sees its own input distribution.
    void initialize(std::span<const Tensor> z0_batch, std::span<const Tensor> h_batch);
    // Identity priming for all actnorms (checkpoint restore path).
    void initialize_identity();
    bool initialized() const;

    FlowResult forward(const Tensor& z0, const Tensor& h) const;
    Tensor inverse(const Tensor& z_k, const Tensor& h) const;
    Tensor log_prob(const Tensor& z0, const Tensor& h, const Tensor& mu,
                    const Tensor& sigma) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    std::vector<StepFlowBlock> blocks;
    ConditionalBase base;

    // When set, receives one string per layer call, e.g. "block1.actnorm.inverse".
    TraceFn trace_hook;
};

}  // namespace flowdisagg
