#pragma once

#include <functional>
#include <string>

#include "flowdisagg/adam.hpp"
#include "flowdisagg/tensor.hpp"

namespace flowdisagg {

// Compares the tape gradient of f at `at` against central finite
// differences, coordinate by coordinate, and returns the maximum of
// |analytic - numeric| / max(1, |analytic|).
//
// `f` must be deterministic and must treat its argument as the only
// differentiable input. Probe points are materialized in f32, so the
// realized step (read back from the perturbed tensor) is used as the
// divisor rather than the nominal eps. eps must lie in (1e-8, 1e-2).
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& at,
                               double eps);

struct ParamCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
};

// Parameter-space variant: checks the tape gradient of a scalar loss with
// respect to every tensor in `params`. `loss_fn` must rebuild the taped
// loss from the live parameter values on each call (probes mutate them in
// place and restore). At most `coords_per_param` coordinates are probed per
// parameter; larger tensors get a seeded random subsample.
ParamCheckResult finite_difference_check_params(const std::function<Tensor()>& loss_fn,
                                                ParamMap& params, double eps,
                                                std::int64_t coords_per_param, Rng& rng);

}  // namespace flowdisagg
