#include "flowdisagg/nn.hpp"

#include <cmath>

namespace flowdisagg {

Conv1dLayer::Conv1dLayer(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                         std::int64_t stride_, std::int64_t padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
    if (c_in <= 0 || c_out <= 0 || kernel <= 0) {
        throw DimensionError("Conv1dLayer: channel counts and kernel width must be positive");
    }
    const float bound = 1.0f / std::sqrt(static_cast<float>(c_in * kernel));
    kernels = Tensor::uniform({c_out, c_in, kernel}, bound, rng, true);
    bias = Tensor::uniform({c_out}, bound, rng, true);
}

Conv1dLayer Conv1dLayer::zero_init(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                                   std::int64_t stride, std::int64_t padding) {
    Conv1dLayer layer;
    layer.kernels = Tensor::zeros({c_out, c_in, kernel}, true);
    layer.bias = Tensor::zeros({c_out}, true);
    layer.stride = stride;
    layer.padding = padding;
    return layer;
}

Tensor Conv1dLayer::forward(const Tensor& x) const {
    if (!kernels.defined()) throw ContractError("Conv1dLayer: layer is not constructed");
    return conv1d(x, kernels, bias, stride, padding);
}

void Conv1dLayer::collect_params(ParamMap& out, const std::string& prefix) {
    out.emplace_back(prefix + ".kernels", kernels);
    out.emplace_back(prefix + ".bias", bias);
}

GatedConv::GatedConv(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                     std::int64_t stride, std::int64_t padding, Rng& rng)
    : conv(c_in, 2 * c_out, kernel, stride, padding, rng) {}

Tensor GatedConv::forward(const Tensor& x) const {
    return gated_linear_unit(conv.forward(x));
}

void GatedConv::collect_params(ParamMap& out, const std::string& prefix) {
    conv.collect_params(out, prefix + ".conv");
}

}  // namespace flowdisagg
