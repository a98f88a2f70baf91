#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flowdisagg/exceptions.hpp"
#include "flowdisagg/rng.hpp"

namespace flowdisagg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

// One vertex of the reverse-mode tape. `backward_fn` reads this node's
// grad and accumulates into the parents' grads; `parents` keeps the graph
// alive and supplies the topological order.
struct TensorNode {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated lazily, same extent as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    // Scalar reductions keep their f64 accumulation here so that probe
    // losses (finite differences) are not quantized to f32.
    double precise = 0.0;
    bool has_precise = false;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
};

class Tensor_;  // not defined; tag for friendship below

}  // namespace detail

// Dense row-major f32 tensor participating in a reverse-mode gradient
// tape. Copies are shallow: a Tensor is a handle onto a shared tape node.
// Values are immutable through the public API once created, except for
// `raw_data()`, which exists so optimizers can update leaf parameters
// in place.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    // Uniform(-bound, bound) draw for every element.
    static Tensor uniform(Shape shape, float bound, Rng& rng, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t ndim() const;
    std::int64_t dim(std::int64_t axis) const;
    std::int64_t size() const;  // total element count

    bool requires_grad() const;

    std::span<const float> data() const;
    // In-place mutation hook for leaf parameters. Using it on a non-leaf
    // node would silently desynchronize the tape, so that is rejected.
    std::span<float> raw_data();
    float item() const;  // scalar tensors only
    // Scalar value at f64 precision where the producing op tracked it
    // (reductions and scalar arithmetic on them); falls back to the f32 value.
    double item_f64() const;
    float at(std::initializer_list<std::int64_t> index) const;

    bool has_grad() const;
    std::span<const float> grad() const;
    void zero_grad();  // allocates the buffer if needed

    // Reverse pass from a scalar loss; grads accumulate across calls.
    void backward() const;

    // Value copy that is detached from the tape.
    Tensor detach() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor wrap_node(std::shared_ptr<detail::TensorNode>);
};

Tensor wrap_node(std::shared_ptr<detail::TensorNode> node);

// While at least one guard is alive on this thread, ops do not record
// backward closures and their outputs do not require grad.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

void backward(const Tensor& scalar_loss);

// ---- elementwise / broadcast ops -------------------------------------
// add and mul broadcast over matching trailing shapes (an extent must
// match or be 1). The rest are strictly elementwise.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, float c);
Tensor mul_scalar(const Tensor& a, float c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, float lo, float hi);

// ---- reductions (f64 accumulation, scalar result) ---------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

// ---- structure ops -----------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const Tensor& a, const Tensor& b);                 // 2-D, axis 0
Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t count);
Tensor upsample2x(const Tensor& a);                                   // 2-D, nearest along time
Tensor resample_nearest(const Tensor& a, std::int64_t t_out);         // 2-D, nearest along time

// ---- linear algebra ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)
// log |det W| of a square matrix; errors when |det| < 1e-12.
Tensor log_abs_det(const Tensor& w);

// ---- network primitives -------------------------------------------------

// input (C_in, T), kernels (C_out, C_in, K), bias (C_out); zero padding.
Tensor conv1d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              std::int64_t stride, std::int64_t padding);
// input (2C, T) -> (C, T): value half gated by sigmoid of the other half.
Tensor gated_linear_unit(const Tensor& input);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

bool all_finite(const Tensor& a);

// Untaped stack of same-shaped tensors along a new leading axis.
Tensor stack0(std::span<const Tensor> parts);

}  // namespace flowdisagg
