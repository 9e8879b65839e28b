#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "headsearch/errors.hpp"

namespace headsearch::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

// While positive, new op results never record a graph.
inline thread_local int no_grad_depth = 0;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // lazily allocated, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    double* grad_buffer() {
        if (grad.empty()) {
            grad.assign(value.size(), 0.0);
        }
        return grad.data();
    }
};

} // namespace detail

// Row-major 64-bit tensor with reverse-mode gradient support.
//
// Tensor is a handle: copies share the same storage and graph node, which is
// how parameters are shared between a model's registry and the graphs built
// from it. Use clone() for an independent deep copy.
class Tensor {
  public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_size(shape) != data.size()) {
            throw DimensionError("Tensor: shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    // Leading dimension; cols() is the product of the rest.
    std::size_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
    std::size_t cols() const { return rows() == 0 ? 0 : size() / rows(); }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    double item() const {
        if (size() != 1) {
            throw DimensionError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
        }
        return node_->value[0];
    }
    double operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return !node_->grad.empty(); }
    // Empty span when no gradient has been accumulated yet.
    std::span<const double> grad() const { return node_->grad; }
    // Handles share storage, so accumulating into the gradient is allowed through a const handle.
    std::span<double> mutable_grad() const { return {node_->grad_buffer(), size()}; }
    void zero_grad() { node_->grad.clear(); }

    // Detached deep copy with the same requires_grad flag.
    Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

    // Reverse-mode sweep from this scalar. The graph is released afterwards,
    // so call at most once per graph.
    void backward() {
        if (size() != 1) {
            throw DimensionError("backward: expected a scalar, got shape " + shape_str(shape()));
        }
        if (!requires_grad()) {
            return;
        }
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) {
                    stack.emplace_back(parent, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        node_->grad_buffer()[0] += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward) {
                (*it)->backward(**it);
            }
        }
        // inputs-first: a node is still owned by its not-yet-cut consumers
        for (detail::Node* node : order) {
            node->backward = nullptr;
            node->parents.clear();
        }
    }

    // Identity of the underlying storage (two handles to one parameter compare equal).
    const void* id() const { return node_.get(); }

    // Op construction: output node whose requires_grad is inherited from parents.
    static Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents) {
        Tensor out(std::move(shape), std::move(value), false);
        if (detail::no_grad_depth > 0) {
            return out;
        }
        for (auto& p : parents) {
            if (p.requires_grad()) {
                out.node_->requires_grad = true;
            }
        }
        if (out.node_->requires_grad) {
            for (auto& p : parents) {
                out.node_->parents.push_back(p.node_);
            }
        }
        return out;
    }

    // Backward closure receives (upstream grad of this node). Only installed
    // when the result participates in differentiation.
    void set_backward(std::function<void(std::span<const double>)> fn) {
        if (!node_->requires_grad) {
            return;
        }
        node_->backward = [fn = std::move(fn)](detail::Node& self) {
            if (!self.grad.empty()) {
                fn(self.grad);
            }
        };
    }

  private:
    std::shared_ptr<detail::Node> node_;
};

// Scope in which ops build no graph (evaluation passes).
class NoGradGuard {
  public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

} // namespace headsearch::nn
