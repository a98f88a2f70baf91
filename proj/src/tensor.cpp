#include "flowdisagg/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace flowdisagg {

using detail::TensorNode;

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (const std::int64_t e : shape) n *= e;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

thread_local int g_no_grad_depth = 0;

void check_shape(const Shape& shape, const char* who) {
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] <= 0) {
            throw DimensionError(std::string(who) + ": extent of axis " + std::to_string(i) +
                                 " must be positive, got " + std::to_string(shape[i]));
        }
    }
}

void check_defined(const Tensor& t, const char* who) {
    if (!t.defined()) throw ContractError(std::string(who) + ": tensor is not defined");
}

std::shared_ptr<TensorNode> new_node(Shape shape) {
    auto n = std::make_shared<TensorNode>();
    n->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
    n->shape = std::move(shape);
    return n;
}

bool track(std::initializer_list<const Tensor*> inputs) {
    if (g_no_grad_depth > 0) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void attach(const std::shared_ptr<TensorNode>& out,
            std::vector<std::shared_ptr<TensorNode>> parents,
            std::function<void(TensorNode&)> fn) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

void set_precise(const std::shared_ptr<TensorNode>& n, double v) {
    n->precise = v;
    n->has_precise = true;
}

bool is_precise_scalar(const std::shared_ptr<TensorNode>& n) {
    return n->shape.empty() && n->has_precise;
}

double scalar_f64(const std::shared_ptr<TensorNode>& n) {
    return n->has_precise ? n->precise : static_cast<double>(n->value[0]);
}

// Trailing-shape broadcast: per output axis, the element strides into each
// operand (0 where that operand is broadcast).
struct BroadcastPlan {
    Shape out;
    std::vector<std::int64_t> sa, sb;
};

BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b, const char* who) {
    const std::size_t ra = a.size(), rb = b.size();
    const std::size_t r = std::max(ra, rb);
    BroadcastPlan p;
    p.out.assign(r, 0);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    std::vector<std::int64_t> na(ra), nb(rb);
    std::int64_t acc = 1;
    for (std::size_t i = ra; i-- > 0;) { na[i] = acc; acc *= a[i]; }
    acc = 1;
    for (std::size_t i = rb; i-- > 0;) { nb[i] = acc; acc *= b[i]; }
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t oi = r - 1 - i;
        const std::int64_t ea = i < ra ? a[ra - 1 - i] : 1;
        const std::int64_t eb = i < rb ? b[rb - 1 - i] : 1;
        std::int64_t eo;
        if (ea == eb) {
            eo = ea;
        } else if (ea == 1) {
            eo = eb;
        } else if (eb == 1) {
            eo = ea;
        } else {
            throw DimensionError(std::string(who) + ": extents " + std::to_string(ea) + " vs " +
                                 std::to_string(eb) + " do not broadcast on axis " +
                                 std::to_string(oi) + " (" + shape_to_string(a) + " vs " +
                                 shape_to_string(b) + ")");
        }
        p.out[oi] = eo;
        if (i < ra && ea != 1) p.sa[oi] = na[ra - 1 - i];
        if (i < rb && eb != 1) p.sb[oi] = nb[rb - 1 - i];
    }
    return p;
}

// f(linear_out_index, offset_a, offset_b), iterated in row-major order.
template <class F>
void broadcast_for_each(const BroadcastPlan& p, F&& f) {
    const std::size_t r = p.out.size();
    if (r == 0) {
        f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
        return;
    }
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t offa = 0, offb = 0, lin = 0;
    const std::int64_t inner = p.out[r - 1];
    const std::int64_t ia = p.sa[r - 1], ib = p.sb[r - 1];
    for (;;) {
        std::int64_t oa = offa, ob = offb;
        for (std::int64_t t = 0; t < inner; ++t, oa += ia, ob += ib) f(lin++, oa, ob);
        std::size_t d = r - 1;
        for (;;) {
            if (d == 0) return;
            --d;
            ++idx[d];
            offa += p.sa[d];
            offb += p.sb[d];
            if (idx[d] < p.out[d]) break;
            offa -= p.sa[d] * p.out[d];
            offb -= p.sb[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

using RowMatf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

Tensor wrap_node(std::shared_ptr<TensorNode> node) { return Tensor(std::move(node)); }

// ---- Tensor methods ----------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape(shape, "zeros");
    auto n = new_node(std::move(shape));
    n->requires_grad = requires_grad && g_no_grad_depth == 0;
    return wrap_node(std::move(n));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
    check_shape(shape, "from_data");
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw DimensionError("from_data: shape " + shape_to_string(shape) + " wants " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad && g_no_grad_depth == 0;
    return wrap_node(std::move(n));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, float bound, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& v : t.node_->value) v = static_cast<float>(rng.uniform(-bound, bound));
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& v : t.node_->value) v = static_cast<float>(rng.normal());
    return t;
}

const Shape& Tensor::shape() const {
    check_defined(*this, "shape");
    return node_->shape;
}

std::int64_t Tensor::ndim() const { return static_cast<std::int64_t>(shape().size()); }

std::int64_t Tensor::dim(std::int64_t axis) const {
    const Shape& s = shape();
    if (axis < 0 || axis >= static_cast<std::int64_t>(s.size())) {
        throw DimensionError("dim: axis " + std::to_string(axis) + " out of range for " +
                             shape_to_string(s));
    }
    return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const {
    check_defined(*this, "size");
    return node_->numel();
}

bool Tensor::requires_grad() const { return node_ != nullptr && node_->requires_grad; }

std::span<const float> Tensor::data() const {
    check_defined(*this, "data");
    return {node_->value.data(), node_->value.size()};
}

std::span<float> Tensor::raw_data() {
    check_defined(*this, "raw_data");
    if (node_->backward_fn) {
        throw ContractError("raw_data: in-place mutation is only allowed on leaf tensors");
    }
    return {node_->value.data(), node_->value.size()};
}

float Tensor::item() const {
    check_defined(*this, "item");
    if (!node_->shape.empty() || node_->value.size() != 1) {
        throw ContractError("item: tensor of shape " + shape_to_string(node_->shape) +
                            " is not a scalar");
    }
    return node_->value[0];
}

double Tensor::item_f64() const {
    check_defined(*this, "item_f64");
    if (!node_->shape.empty() || node_->value.size() != 1) {
        throw ContractError("item_f64: tensor of shape " + shape_to_string(node_->shape) +
                            " is not a scalar");
    }
    return node_->has_precise ? node_->precise : static_cast<double>(node_->value[0]);
}

float Tensor::at(std::initializer_list<std::int64_t> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) {
        throw DimensionError("at: index rank " + std::to_string(index.size()) +
                             " does not match tensor rank " + std::to_string(s.size()));
    }
    std::int64_t off = 0;
    std::size_t axis = 0;
    for (const std::int64_t i : index) {
        if (i < 0 || i >= s[axis]) {
            throw DimensionError("at: index " + std::to_string(i) + " out of range on axis " +
                                 std::to_string(axis));
        }
        off = off * s[axis] + i;
        ++axis;
    }
    return node_->value[static_cast<std::size_t>(off)];
}

bool Tensor::has_grad() const { return node_ != nullptr && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
    check_defined(*this, "grad");
    return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
    check_defined(*this, "zero_grad");
    node_->grad.assign(node_->value.size(), 0.0f);
}

void Tensor::backward() const { flowdisagg::backward(*this); }

Tensor Tensor::detach() const {
    check_defined(*this, "detach");
    auto n = std::make_shared<TensorNode>();
    n->shape = node_->shape;
    n->value = node_->value;
    return wrap_node(std::move(n));
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const Tensor& scalar_loss) {
    check_defined(scalar_loss, "backward");
    auto root = scalar_loss.node();
    if (!root->shape.empty() || root->value.size() != 1) {
        throw ContractError("backward: loss has shape " + shape_to_string(root->shape) +
                            ", expected a scalar");
    }
    if (!root->requires_grad) return;  // nothing on the tape depends on it

    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            TensorNode* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // The pass owns intermediate grads; only leaves accumulate across calls.
    for (TensorNode* n : order) {
        if (n->backward_fn) {
            n->grad.assign(n->value.size(), 0.0f);
        } else {
            n->ensure_grad();
        }
    }
    root->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

// ---- elementwise / broadcast ops ----------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    auto pa = a.node(), pb = b.node();
    if (pa->shape == pb->shape) {
        auto out = new_node(pa->shape);
        const std::size_t n = out->value.size();
        for (std::size_t i = 0; i < n; ++i) out->value[i] = pa->value[i] + pb->value[i];
        if (pa->shape.empty() && (pa->has_precise || pb->has_precise)) {
            set_precise(out, scalar_f64(pa) + scalar_f64(pb));
        }
        if (track({&a, &b})) {
            attach(out, {pa, pb}, [pa, pb](TensorNode& self) {
                if (pa->requires_grad) {
                    pa->ensure_grad();
                    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
                }
            });
        }
        return wrap_node(out);
    }
    BroadcastPlan plan = make_broadcast_plan(pa->shape, pb->shape, "add");
    auto out = new_node(plan.out);
    broadcast_for_each(plan, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
        out->value[static_cast<std::size_t>(lin)] =
            pa->value[static_cast<std::size_t>(oa)] + pb->value[static_cast<std::size_t>(ob)];
    });
    if (track({&a, &b})) {
        attach(out, {pa, pb}, [pa, pb, plan](TensorNode& self) {
            const bool ga = pa->requires_grad, gb = pb->requires_grad;
            if (ga) pa->ensure_grad();
            if (gb) pb->ensure_grad();
            broadcast_for_each(plan, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                const float g = self.grad[static_cast<std::size_t>(lin)];
                if (ga) pa->grad[static_cast<std::size_t>(oa)] += g;
                if (gb) pb->grad[static_cast<std::size_t>(ob)] += g;
            });
        });
    }
    return wrap_node(out);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    auto pa = a.node(), pb = b.node();
    if (pa->shape == pb->shape) {
        auto out = new_node(pa->shape);
        const std::size_t n = out->value.size();
        for (std::size_t i = 0; i < n; ++i) out->value[i] = pa->value[i] * pb->value[i];
        if (pa->shape.empty() && (pa->has_precise || pb->has_precise)) {
            set_precise(out, scalar_f64(pa) * scalar_f64(pb));
        }
        if (track({&a, &b})) {
            attach(out, {pa, pb}, [pa, pb](TensorNode& self) {
                if (pa->requires_grad) {
                    pa->ensure_grad();
                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                        pa->grad[i] += self.grad[i] * pb->value[i];
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                        pb->grad[i] += self.grad[i] * pa->value[i];
                }
            });
        }
        return wrap_node(out);
    }
    BroadcastPlan plan = make_broadcast_plan(pa->shape, pb->shape, "mul");
    auto out = new_node(plan.out);
    broadcast_for_each(plan, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
        out->value[static_cast<std::size_t>(lin)] =
            pa->value[static_cast<std::size_t>(oa)] * pb->value[static_cast<std::size_t>(ob)];
    });
    if (track({&a, &b})) {
        attach(out, {pa, pb}, [pa, pb, plan](TensorNode& self) {
            const bool ga = pa->requires_grad, gb = pb->requires_grad;
            if (ga) pa->ensure_grad();
            if (gb) pb->ensure_grad();
            broadcast_for_each(plan, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                const float g = self.grad[static_cast<std::size_t>(lin)];
                if (ga)
                    pa->grad[static_cast<std::size_t>(oa)] +=
                        g * pb->value[static_cast<std::size_t>(ob)];
                if (gb)
                    pb->grad[static_cast<std::size_t>(ob)] +=
                        g * pa->value[static_cast<std::size_t>(oa)];
            });
        });
    }
    return wrap_node(out);
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

Tensor add_scalar(const Tensor& a, float c) {
    check_defined(a, "add_scalar");
    auto pa = a.node();
    auto out = new_node(pa->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = pa->value[i] + c;
    if (is_precise_scalar(pa)) set_precise(out, pa->precise + static_cast<double>(c));
    if (track({&a})) {
        attach(out, {pa}, [pa](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        });
    }
    return wrap_node(out);
}

Tensor mul_scalar(const Tensor& a, float c) {
    check_defined(a, "mul_scalar");
    auto pa = a.node();
    auto out = new_node(pa->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = pa->value[i] * c;
    if (is_precise_scalar(pa)) set_precise(out, pa->precise * static_cast<double>(c));
    if (track({&a})) {
        attach(out, {pa}, [pa, c](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
        });
    }
    return wrap_node(out);
}

Tensor exp(const Tensor& a) {
    check_defined(a, "exp");
    auto pa = a.node();
    auto out = new_node(pa->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i) {
        const float v = std::exp(pa->value[i]);
        if (!std::isfinite(v)) {
            throw NumericError("exp: overflow at flat index " + std::to_string(i) +
                               " (input " + std::to_string(pa->value[i]) + ")");
        }
        out->value[i] = v;
    }
    if (track({&a})) {
        attach(out, {pa}, [pa](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * self.value[i];
        });
    }
    return wrap_node(out);
}

Tensor log(const Tensor& a) {
    check_defined(a, "log");
    auto pa = a.node();
    auto out = new_node(pa->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i) {
        if (!(pa->value[i] > 0.0f)) {
            throw NumericError("log: non-positive input " + std::to_string(pa->value[i]) +
                               " at flat index " + std::to_string(i));
        }
        out->value[i] = std::log(pa->value[i]);
    }
    if (track({&a})) {
        attach(out, {pa}, [pa](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] / pa->value[i];
        });
    }
    return wrap_node(out);
}

Tensor tanh(const Tensor& a) {
    check_defined(a, "tanh");
    auto pa = a.node();
    auto out = new_node(pa->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::tanh(pa->value[i]);
    if (track({&a})) {
        attach(out, {pa}, [pa](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * (1.0f - self.value[i] * self.value[i]);
        });
    }
    return wrap_node(out);
}

Tensor sigmoid(const Tensor& a) {
    check_defined(a, "sigmoid");
    auto pa = a.node();
    auto out = new_node(pa->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i)
        out->value[i] = 1.0f / (1.0f + std::exp(-pa->value[i]));
    if (track({&a})) {
        attach(out, {pa}, [pa](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const float s = self.value[i];
                pa->grad[i] += self.grad[i] * s * (1.0f - s);
            }
        });
    }
    return wrap_node(out);
}

Tensor square(const Tensor& a) {
    check_defined(a, "square");
    auto pa = a.node();
    auto out = new_node(pa->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i)
        out->value[i] = pa->value[i] * pa->value[i];
    if (track({&a})) {
        attach(out, {pa}, [pa](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * 2.0f * pa->value[i];
        });
    }
    return wrap_node(out);
}

Tensor clamp(const Tensor& a, float lo, float hi) {
    check_defined(a, "clamp");
    if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
    auto pa = a.node();
    auto out = new_node(pa->shape);
    for (std::size_t i = 0; i < out->value.size(); ++i)
        out->value[i] = std::min(hi, std::max(lo, pa->value[i]));
    if (track({&a})) {
        attach(out, {pa}, [pa, lo, hi](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const float v = pa->value[i];
                if (v >= lo && v <= hi) pa->grad[i] += self.grad[i];
            }
        });
    }
    return wrap_node(out);
}

// ---- reductions ----------------------------------------------------------

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    auto pa = a.node();
    double acc = 0.0;
    for (const float v : pa->value) acc += v;
    auto out = new_node(Shape{});
    out->value[0] = static_cast<float>(acc);
    set_precise(out, acc);
    if (track({&a})) {
        attach(out, {pa}, [pa](TensorNode& self) {
            pa->ensure_grad();
            const float g = self.grad[0];
            for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
        });
    }
    return wrap_node(out);
}

Tensor mean(const Tensor& a) {
    check_defined(a, "mean");
    auto pa = a.node();
    const double inv_n = 1.0 / static_cast<double>(pa->value.size());
    double acc = 0.0;
    for (const float v : pa->value) acc += v;
    auto out = new_node(Shape{});
    out->value[0] = static_cast<float>(acc * inv_n);
    set_precise(out, acc * inv_n);
    if (track({&a})) {
        attach(out, {pa}, [pa, inv_n](TensorNode& self) {
            pa->ensure_grad();
            const float g = self.grad[0] * static_cast<float>(inv_n);
            for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
        });
    }
    return wrap_node(out);
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_defined(a, "mse");
    check_defined(b, "mse");
    auto pa = a.node(), pb = b.node();
    if (pa->shape != pb->shape) {
        throw DimensionError("mse: shape " + shape_to_string(pa->shape) + " vs " +
                             shape_to_string(pb->shape));
    }
    const std::size_t n = pa->value.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pa->value[i]) - static_cast<double>(pb->value[i]);
        acc += d * d;
    }
    auto out = new_node(Shape{});
    out->value[0] = static_cast<float>(acc / static_cast<double>(n));
    set_precise(out, acc / static_cast<double>(n));
    if (track({&a, &b})) {
        attach(out, {pa, pb}, [pa, pb, n](TensorNode& self) {
            const float scale = self.grad[0] * 2.0f / static_cast<float>(n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    pa->grad[i] += scale * (pa->value[i] - pb->value[i]);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    pb->grad[i] -= scale * (pa->value[i] - pb->value[i]);
            }
        });
    }
    return wrap_node(out);
}

// ---- structure ops --------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    check_defined(a, "reshape");
    check_shape(shape, "reshape");
    auto pa = a.node();
    if (shape_numel(shape) != pa->numel()) {
        throw DimensionError("reshape: " + shape_to_string(pa->shape) + " -> " +
                             shape_to_string(shape) + " changes the element count");
    }
    auto out = std::make_shared<TensorNode>();
    out->shape = std::move(shape);
    out->value = pa->value;
    if (track({&a})) {
        attach(out, {pa}, [pa](TensorNode& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        });
    }
    return wrap_node(out);
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check_defined(a, "concat_rows");
    check_defined(b, "concat_rows");
    auto pa = a.node(), pb = b.node();
    if (pa->shape.size() != 2 || pb->shape.size() != 2) {
        throw DimensionError("concat_rows: both operands must be 2-D");
    }
    if (pa->shape[1] != pb->shape[1]) {
        throw DimensionError("concat_rows: column counts differ on axis 1 (" +
                             std::to_string(pa->shape[1]) + " vs " +
                             std::to_string(pb->shape[1]) + ")");
    }
    auto out = new_node(Shape{pa->shape[0] + pb->shape[0], pa->shape[1]});
    std::copy(pa->value.begin(), pa->value.end(), out->value.begin());
    std::copy(pb->value.begin(), pb->value.end(),
              out->value.begin() + static_cast<std::ptrdiff_t>(pa->value.size()));
    if (track({&a, &b})) {
        const std::size_t na = pa->value.size();
        attach(out, {pa, pb}, [pa, pb, na](TensorNode& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < na; ++i) pa->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < pb->grad.size(); ++i)
                    pb->grad[i] += self.grad[na + i];
            }
        });
    }
    return wrap_node(out);
}

Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t count) {
    check_defined(a, "slice_rows");
    auto pa = a.node();
    if (pa->shape.size() != 2) throw DimensionError("slice_rows: operand must be 2-D");
    if (begin < 0 || count <= 0 || begin + count > pa->shape[0]) {
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") out of bounds on axis 0 of " +
                             shape_to_string(pa->shape));
    }
    const std::int64_t cols = pa->shape[1];
    auto out = new_node(Shape{count, cols});
    std::copy(pa->value.begin() + static_cast<std::ptrdiff_t>(begin * cols),
              pa->value.begin() + static_cast<std::ptrdiff_t>((begin + count) * cols),
              out->value.begin());
    if (track({&a})) {
        attach(out, {pa}, [pa, begin, cols](TensorNode& self) {
            pa->ensure_grad();
            const std::size_t off = static_cast<std::size_t>(begin * cols);
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[off + i] += self.grad[i];
        });
    }
    return wrap_node(out);
}

Tensor upsample2x(const Tensor& a) {
    check_defined(a, "upsample2x");
    auto pa = a.node();
    if (pa->shape.size() != 2) throw DimensionError("upsample2x: operand must be 2-D");
    const std::int64_t c = pa->shape[0], t = pa->shape[1];
    auto out = new_node(Shape{c, 2 * t});
    for (std::int64_t i = 0; i < c; ++i) {
        const float* src = pa->value.data() + i * t;
        float* dst = out->value.data() + i * 2 * t;
        for (std::int64_t j = 0; j < t; ++j) {
            dst[2 * j] = src[j];
            dst[2 * j + 1] = src[j];
        }
    }
    if (track({&a})) {
        attach(out, {pa}, [pa, c, t](TensorNode& self) {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < c; ++i) {
                const float* g = self.grad.data() + i * 2 * t;
                float* dst = pa->grad.data() + i * t;
                for (std::int64_t j = 0; j < t; ++j) dst[j] += g[2 * j] + g[2 * j + 1];
            }
        });
    }
    return wrap_node(out);
}

Tensor resample_nearest(const Tensor& a, std::int64_t t_out) {
    check_defined(a, "resample_nearest");
    auto pa = a.node();
    if (pa->shape.size() != 2) throw DimensionError("resample_nearest: operand must be 2-D");
    if (t_out <= 0) throw DimensionError("resample_nearest: target length must be positive");
    const std::int64_t c = pa->shape[0], t_in = pa->shape[1];
    if (t_in == t_out) return a;
    auto out = new_node(Shape{c, t_out});
    for (std::int64_t i = 0; i < c; ++i) {
        const float* src = pa->value.data() + i * t_in;
        float* dst = out->value.data() + i * t_out;
        for (std::int64_t j = 0; j < t_out; ++j) dst[j] = src[(j * t_in) / t_out];
    }
    if (track({&a})) {
        attach(out, {pa}, [pa, c, t_in, t_out](TensorNode& self) {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < c; ++i) {
                const float* g = self.grad.data() + i * t_out;
                float* dst = pa->grad.data() + i * t_in;
                for (std::int64_t j = 0; j < t_out; ++j) dst[(j * t_in) / t_out] += g[j];
            }
        });
    }
    return wrap_node(out);
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    auto pa = a.node(), pb = b.node();
    if (pa->shape.size() != 2 || pb->shape.size() != 2) {
        throw DimensionError("matmul: operands must be 2-D");
    }
    if (pa->shape[1] != pb->shape[0]) {
        throw DimensionError("matmul: inner extents differ (" + shape_to_string(pa->shape) +
                             " x " + shape_to_string(pb->shape) + ")");
    }
    const std::int64_t m = pa->shape[0], k = pa->shape[1], n = pb->shape[1];
    auto out = new_node(Shape{m, n});
    Eigen::Map<const RowMatf> A(pa->value.data(), m, k);
    Eigen::Map<const RowMatf> B(pb->value.data(), k, n);
    Eigen::Map<RowMatf> O(out->value.data(), m, n);
    O.noalias() = A * B;
    if (track({&a, &b})) {
        attach(out, {pa, pb}, [pa, pb, m, k, n](TensorNode& self) {
            Eigen::Map<const RowMatf> G(self.grad.data(), m, n);
            Eigen::Map<const RowMatf> A2(pa->value.data(), m, k);
            Eigen::Map<const RowMatf> B2(pb->value.data(), k, n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                Eigen::Map<RowMatf> GA(pa->grad.data(), m, k);
                GA.noalias() += G * B2.transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                Eigen::Map<RowMatf> GB(pb->grad.data(), k, n);
                GB.noalias() += A2.transpose() * G;
            }
        });
    }
    return wrap_node(out);
}

Tensor log_abs_det(const Tensor& w) {
    check_defined(w, "log_abs_det");
    auto pw = w.node();
    if (pw->shape.size() != 2 || pw->shape[0] != pw->shape[1]) {
        throw DimensionError("log_abs_det: operand must be square, got " +
                             shape_to_string(pw->shape));
    }
    const std::int64_t c = pw->shape[0];
    Eigen::Map<const RowMatf> W(pw->value.data(), c, c);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(W.cast<double>());
    double log_abs = 0.0;
    for (std::int64_t i = 0; i < c; ++i) {
        const double d = std::abs(lu.matrixLU()(i, i));
        if (d == 0.0) throw SingularMatrixError("log_abs_det: exactly singular matrix");
        log_abs += std::log(d);
    }
    if (log_abs < std::log(1e-12)) {
        throw SingularMatrixError("log_abs_det: |det| below 1e-12 (log|det| = " +
                                  std::to_string(log_abs) + ")");
    }
    auto out = new_node(Shape{});
    out->value[0] = static_cast<float>(log_abs);
    set_precise(out, log_abs);
    if (track({&w})) {
        attach(out, {pw}, [pw, c](TensorNode& self) {
            pw->ensure_grad();
            Eigen::Map<const RowMatf> W2(pw->value.data(), c, c);
            const Eigen::MatrixXd inv_t =
                Eigen::PartialPivLU<Eigen::MatrixXd>(W2.cast<double>()).inverse().transpose();
            Eigen::Map<RowMatf> GW(pw->grad.data(), c, c);
            GW += self.grad[0] * inv_t.cast<float>();
        });
    }
    return wrap_node(out);
}

// ---- network primitives ------------------------------------------------------

namespace {

std::vector<float> pad_rows(const std::vector<float>& v, std::int64_t c, std::int64_t t,
                            std::int64_t padding) {
    std::vector<float> padded(static_cast<std::size_t>(c * (t + 2 * padding)), 0.0f);
    const std::int64_t tp = t + 2 * padding;
    for (std::int64_t i = 0; i < c; ++i) {
        std::copy(v.begin() + static_cast<std::ptrdiff_t>(i * t),
                  v.begin() + static_cast<std::ptrdiff_t>((i + 1) * t),
                  padded.begin() + static_cast<std::ptrdiff_t>(i * tp + padding));
    }
    return padded;
}

}  // namespace

Tensor conv1d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              std::int64_t stride, std::int64_t padding) {
    check_defined(input, "conv1d");
    check_defined(kernels, "conv1d");
    check_defined(bias, "conv1d");
    auto pi = input.node(), pk = kernels.node(), pb = bias.node();
    if (pi->shape.size() != 2) {
        throw DimensionError("conv1d: input must be 2-D (channels x time), got " +
                             shape_to_string(pi->shape));
    }
    if (pk->shape.size() != 3) {
        throw DimensionError("conv1d: kernels must be 3-D (out x in x width), got " +
                             shape_to_string(pk->shape));
    }
    if (pb->shape.size() != 1) {
        throw DimensionError("conv1d: bias must be 1-D, got " + shape_to_string(pb->shape));
    }
    const std::int64_t c_in = pi->shape[0], t = pi->shape[1];
    const std::int64_t c_out = pk->shape[0], k = pk->shape[2];
    if (pk->shape[1] != c_in) {
        throw DimensionError("conv1d: kernel axis 1 (input channels) is " +
                             std::to_string(pk->shape[1]) + " but input has " +
                             std::to_string(c_in) + " channels");
    }
    if (pb->shape[0] != c_out) {
        throw DimensionError("conv1d: bias axis 0 is " + std::to_string(pb->shape[0]) +
                             " but kernels produce " + std::to_string(c_out) + " channels");
    }
    if (stride < 1) throw ContractError("conv1d: stride must be >= 1");
    if (padding < 0) throw ContractError("conv1d: padding must be >= 0");
    if (k > t + 2 * padding) {
        throw DimensionError("conv1d: kernel width axis 2 (" + std::to_string(k) +
                             ") exceeds padded input length " + std::to_string(t + 2 * padding));
    }

    const std::int64_t tp = t + 2 * padding;
    const std::int64_t t_out = (tp - k) / stride + 1;
    const std::vector<float> padded = pad_rows(pi->value, c_in, t, padding);

    auto out = new_node(Shape{c_out, t_out});
    for (std::int64_t o = 0; o < c_out; ++o) {
        float* orow = out->value.data() + o * t_out;
        Eigen::Map<Eigen::ArrayXf> dst(orow, t_out);
        dst.setConstant(pb->value[static_cast<std::size_t>(o)]);
        for (std::int64_t c = 0; c < c_in; ++c) {
            const float* prow = padded.data() + c * tp;
            const float* wrow = pk->value.data() + (o * c_in + c) * k;
            for (std::int64_t j = 0; j < k; ++j) {
                const float wv = wrow[j];
                if (stride == 1) {
                    dst += wv * Eigen::Map<const Eigen::ArrayXf>(prow + j, t_out);
                } else {
                    Eigen::Map<const Eigen::ArrayXf, 0, Eigen::InnerStride<>> src(
                        prow + j, t_out, Eigen::InnerStride<>(static_cast<Eigen::Index>(stride)));
                    dst += wv * src;
                }
            }
        }
    }

    if (track({&input, &kernels, &bias})) {
        attach(out, {pi, pk, pb},
               [pi, pk, pb, c_in, c_out, t, k, tp, t_out, stride, padding](TensorNode& self) {
                   const std::vector<float> padded2 = pad_rows(pi->value, c_in, t, padding);
                   if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (std::int64_t o = 0; o < c_out; ++o) {
                           double acc = 0.0;
                           const float* g = self.grad.data() + o * t_out;
                           for (std::int64_t j = 0; j < t_out; ++j) acc += g[j];
                           pb->grad[static_cast<std::size_t>(o)] += static_cast<float>(acc);
                       }
                   }
                   if (pk->requires_grad) {
                       pk->ensure_grad();
                       for (std::int64_t o = 0; o < c_out; ++o) {
                           const float* g = self.grad.data() + o * t_out;
                           Eigen::Map<const Eigen::ArrayXf> gmap(g, t_out);
                           for (std::int64_t c = 0; c < c_in; ++c) {
                               const float* prow = padded2.data() + c * tp;
                               float* gw = pk->grad.data() + (o * c_in + c) * k;
                               for (std::int64_t j = 0; j < k; ++j) {
                                   if (stride == 1) {
                                       gw[j] += (gmap * Eigen::Map<const Eigen::ArrayXf>(
                                                            prow + j, t_out))
                                                    .sum();
                                   } else {
                                       Eigen::Map<const Eigen::ArrayXf, 0, Eigen::InnerStride<>>
                                           src(prow + j, t_out,
                                               Eigen::InnerStride<>(
                                                   static_cast<Eigen::Index>(stride)));
                                       gw[j] += (gmap * src).sum();
                                   }
                               }
                           }
                       }
                   }
                   if (pi->requires_grad) {
                       pi->ensure_grad();
                       std::vector<float> gpad(static_cast<std::size_t>(c_in * tp), 0.0f);
                       for (std::int64_t o = 0; o < c_out; ++o) {
                           const float* g = self.grad.data() + o * t_out;
                           Eigen::Map<const Eigen::ArrayXf> gmap(g, t_out);
                           for (std::int64_t c = 0; c < c_in; ++c) {
                               float* gp = gpad.data() + c * tp;
                               const float* wrow = pk->value.data() + (o * c_in + c) * k;
                               for (std::int64_t j = 0; j < k; ++j) {
                                   const float wv = wrow[j];
                                   if (stride == 1) {
                                       Eigen::Map<Eigen::ArrayXf>(gp + j, t_out) += wv * gmap;
                                   } else {
                                       Eigen::Map<Eigen::ArrayXf, 0, Eigen::InnerStride<>> dst(
                                           gp + j, t_out,
                                           Eigen::InnerStride<>(
                                               static_cast<Eigen::Index>(stride)));
                                       dst += wv * gmap;
                                   }
                               }
                           }
                       }
                       for (std::int64_t c = 0; c < c_in; ++c) {
                           const float* gp = gpad.data() + c * tp + padding;
                           float* gi = pi->grad.data() + c * t;
                           for (std::int64_t j = 0; j < t; ++j) gi[j] += gp[j];
                       }
                   }
               });
    }
    return wrap_node(out);
}

Tensor gated_linear_unit(const Tensor& input) {
    check_defined(input, "gated_linear_unit");
    auto pi = input.node();
    if (pi->shape.size() != 2) {
        throw DimensionError("gated_linear_unit: input must be 2-D, got " +
                             shape_to_string(pi->shape));
    }
    if (pi->shape[0] % 2 != 0) {
        throw DimensionError("gated_linear_unit: channel axis 0 must be even, got " +
                             std::to_string(pi->shape[0]));
    }
    const std::int64_t c = pi->shape[0] / 2, t = pi->shape[1];
    auto out = new_node(Shape{c, t});
    std::vector<float> sig(static_cast<std::size_t>(c * t));
    const float* value_half = pi->value.data();
    const float* gate_half = pi->value.data() + c * t;
    for (std::int64_t i = 0; i < c * t; ++i) {
        sig[static_cast<std::size_t>(i)] = 1.0f / (1.0f + std::exp(-gate_half[i]));
        out->value[static_cast<std::size_t>(i)] =
            value_half[i] * sig[static_cast<std::size_t>(i)];
    }
    if (track({&input})) {
        attach(out, {pi}, [pi, c, t, sig = std::move(sig)](TensorNode& self) {
            pi->ensure_grad();
            const float* value_half2 = pi->value.data();
            float* gv = pi->grad.data();
            float* gg = pi->grad.data() + c * t;
            for (std::int64_t i = 0; i < c * t; ++i) {
                const float s = sig[static_cast<std::size_t>(i)];
                const float g = self.grad[static_cast<std::size_t>(i)];
                gv[i] += g * s;
                gg[i] += g * value_half2[i] * s * (1.0f - s);
            }
        });
    }
    return wrap_node(out);
}

bool all_finite(const Tensor& a) {
    check_defined(a, "all_finite");
    for (const float v : a.node()->value) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor stack0(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("stack0: empty input");
    const Shape& base = parts.front().shape();
    Shape out_shape;
    out_shape.push_back(static_cast<std::int64_t>(parts.size()));
    out_shape.insert(out_shape.end(), base.begin(), base.end());
    std::vector<float> values;
    values.reserve(static_cast<std::size_t>(shape_numel(out_shape)));
    for (const Tensor& p : parts) {
        if (p.shape() != base) {
            throw DimensionError("stack0: mixed shapes " + shape_to_string(base) + " vs " +
                                 shape_to_string(p.shape()));
        }
        const auto d = p.data();
        values.insert(values.end(), d.begin(), d.end());
    }
    return Tensor::from_data(std::move(out_shape), std::move(values));
}

}  // namespace flowdisagg
