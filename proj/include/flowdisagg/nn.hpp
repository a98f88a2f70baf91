#pragma once

#include <cstdint>
#include <string>

#include "flowdisagg/adam.hpp"
#include "flowdisagg/rng.hpp"
#include "flowdisagg/tensor.hpp"

namespace flowdisagg {

// Conv1d layer owning its kernels (C_out x C_in x K) and bias (C_out).
// Weights are drawn from U(-1/sqrt(C_in*K), 1/sqrt(C_in*K)).
class Conv1dLayer {
public:
    Conv1dLayer() = default;
    Conv1dLayer(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel, std::int64_t stride,
                std::int64_t padding, Rng& rng);

    // All-zero weights; used where a layer must start as the identity map.
    static Conv1dLayer zero_init(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                                 std::int64_t stride, std::int64_t padding);

    Tensor forward(const Tensor& x) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    std::int64_t in_channels() const { return kernels.dim(1); }
    std::int64_t out_channels() const { return kernels.dim(0); }

    Tensor kernels;
    Tensor bias;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
};

// conv(c_in -> 2*c_out) followed by a gated linear unit down to c_out.
class GatedConv {
public:
    GatedConv() = default;
    GatedConv(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel, std::int64_t stride,
              std::int64_t padding, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void collect_params(ParamMap& out, const std::string& prefix);

    Conv1dLayer conv;
};

}  // namespace flowdisagg
