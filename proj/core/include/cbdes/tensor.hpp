// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbdes {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when tensor shapes are incompatible with an operation.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for invalid hyper-parameters or model configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for misuse of the differentiation graph (non-scalar backward,
/// backward through a released graph).
class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {

struct Node;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    bool graph_released = false;
    std::shared_ptr<Node> node;  // null for leaves
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage, the way
/// parameters are shared between a model and its optimizer. Use clone()
/// for an independent copy. Results of differentiable ops remember how they
/// were produced while gradient recording is enabled; backward() on a
/// scalar result walks that graph once and then releases it.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const;

    std::span<const double> data() const;
    std::span<double> data();
    double item() const;
    double operator[](std::size_t i) const { return data()[i]; }

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on = true);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// Independent copy of the values; no gradient, no history.
    Tensor clone() const;
    /// Same values, cut off from the graph.
    Tensor detach() const { return clone(); }

    /// Reverse-mode pass from this scalar. Gradients accumulate into every
    /// reachable tensor that requires them; the graph is released afterwards.
    void backward() const;

    const std::shared_ptr<detail::TensorImpl>& impl() const noexcept { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Backward closure of a recorded op: receives the op output's values and
/// its incoming gradient, and accumulates into its inputs via grad_sink().
using BackwardFn =
    std::function<void(std::span<const double> out_data, std::span<const double> out_grad)>;

/// Builds an op result. The graph edge is recorded only when recording is
/// enabled and at least one input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   BackwardFn backward);

/// Gradient buffer of `t` for accumulation, or an empty span when `t` does
/// not take gradients.
std::span<double> grad_sink(const Tensor& t);

bool grad_enabled() noexcept;

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() noexcept;
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

void require_shape(const Tensor& t, const Shape& expected, const char* what);
void require_rank(const Tensor& t, std::size_t rank, const char* what);

}  // namespace cbdes
