#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flowdisagg/tensor.hpp"

namespace flowdisagg {

// Named parameter group. Names are stable identifiers used by the
// optimizer's error messages and by checkpoint serialization.
using ParamMap = std::vector<std::pair<std::string, Tensor>>;

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;  // contract error on out-of-range values
};

// Adam with bias correction. Moment buffers are f32 like the parameters;
// the update itself runs in f64. Gradients are left untouched by step();
// the caller decides when to zero them.
class Adam {
public:
    Adam(ParamMap params, AdamOptions options = {});

    void step();
    void zero_grad();

    std::int64_t step_count() const { return step_count_; }
    const AdamOptions& options() const { return options_; }
    const ParamMap& params() const { return params_; }

    // Checkpoint access. Buffers are ordered like params().
    std::vector<float>& moment1(std::size_t i) { return m_[i]; }
    std::vector<float>& moment2(std::size_t i) { return v_[i]; }
    const std::vector<float>& moment1(std::size_t i) const { return m_[i]; }
    const std::vector<float>& moment2(std::size_t i) const { return v_[i]; }
    void set_step_count(std::int64_t n);

private:
    ParamMap params_;
    std::vector<std::vector<float>> m_, v_;
    AdamOptions options_;
    std::int64_t step_count_ = 0;
};

}  // namespace flowdisagg
