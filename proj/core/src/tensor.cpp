// SPDX-License-Identifier: Apache-2.0
#include "cbdes/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace cbdes {

namespace detail {

struct Node {
    std::vector<Tensor> inputs;
    BackwardFn backward;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

const detail::TensorImpl& checked(const std::shared_ptr<detail::TensorImpl>& impl) {
    if (!impl) throw std::logic_error("use of an undefined tensor");
    return *impl;
}

}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) {
    for (auto d : shape)
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->data.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) {
    for (auto d : shape)
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    if (numel(shape) != data.size())
        throw DimensionError("shape " + to_string(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size())
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
    return s[axis];
}

std::size_t Tensor::size() const { return checked(impl_).data.size(); }

std::span<const double> Tensor::data() const { return checked(impl_).data; }

std::span<double> Tensor::data() {
    checked(impl_);
    return impl_->data;
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() needs a single-element tensor, got " + to_string(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    checked(impl_);
    impl_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return !checked(impl_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(impl_).grad; }

void Tensor::zero_grad() {
    checked(impl_);
    impl_->grad.clear();
}

Tensor Tensor::clone() const {
    const auto& src = checked(impl_);
    return Tensor(src.shape, src.data);
}

std::span<double> grad_sink(const Tensor& t) {
    if (!t.defined() || !t.requires_grad()) return {};
    auto& impl = *t.impl();
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
    return impl.grad;
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   BackwardFn backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!g_grad_enabled) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (!any) return out;
    auto node = std::make_shared<detail::Node>();
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->node = std::move(node);
    return out;
}

void Tensor::backward() const {
    auto& root = *impl_;
    if (root.data.size() != 1)
        throw GraphError("backward() requires a scalar, got shape " + to_string(root.shape));
    if (root.graph_released) throw GraphError("backward() through a graph that was already released");
    if (!root.requires_grad) throw GraphError("backward() on a tensor that does not require grad");

    // Post-order DFS gives a topological order over recorded results.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [cur, next] = stack.back();
        if (cur->node && next < cur->node->inputs.size()) {
            auto* child = cur->node->inputs[next++].impl().get();
            if (child && child->node && seen.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(cur);
        stack.pop_back();
    }

    if (root.grad.empty()) root.grad.assign(1, 0.0);
    root.grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* t = *it;
        if (!t->node || t->grad.empty()) continue;
        t->node->backward(t->data, t->grad);
    }
    for (auto* t : order) {
        if (!t->node) continue;
        t->node.reset();
        t->grad.clear();
        t->grad.shrink_to_fit();
        t->graph_released = true;
    }
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() noexcept : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
    if (t.shape() != expected)
        throw DimensionError(std::string(what) + ": expected shape " + to_string(expected) + ", got " +
                             to_string(t.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                             to_string(t.shape()));
}

}  // namespace cbdes
