#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace corrflow {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace detail {

// Thread-local switch disabling graph recording (eval / inference paths).
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

template <typename R>
struct Node {
    Shape shape;
    std::vector<R> value;
    std::vector<R> grad;  // allocated lazily, same extent as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // adds into parents' grads

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

    std::vector<R>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), R(0));
        return grad;
    }
};

}  // namespace detail

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Dense row-major multi-dimensional array with optional reverse-mode
/// gradient participation. Copying a Tensor copies the handle, not the data.
template <typename R>
class Tensor {
public:
    using Real = R;

    Tensor() : node_(std::make_shared<detail::Node<R>>()) {}

    explicit Tensor(Shape shape, R fill = R(0), bool requires_grad = false)
        : node_(std::make_shared<detail::Node<R>>()) {
        node_->shape = std::move(shape);
        node_->value.assign(static_cast<size_t>(shape_numel(node_->shape)), fill);
        node_->requires_grad = requires_grad;
    }

    static Tensor from(Shape shape, std::vector<R> values, bool requires_grad = false) {
        Tensor t;
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw std::invalid_argument("value count does not match shape " + shape_str(shape));
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(R v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    int extent(int axis) const { return node_->shape.at(static_cast<size_t>(axis)); }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return node_->numel(); }

    std::vector<R>& data() { return node_->value; }
    const std::vector<R>& data() const { return node_->value; }
    R item() const {
        if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<R>& grad() const {
        if (node_->grad.empty()) throw std::runtime_error("tensor has no populated gradient");
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), R(0));
    }

    /// Value copy with no graph history and no gradient requirement.
    Tensor detach() const {
        Tensor t;
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        return t;
    }

    bool all_finite() const {
        for (R v : node_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<detail::Node<R>> node() const { return node_; }

    /// Creates the result of a recorded operation. The backward function
    /// receives the result node and must add into the parents' grads.
    static Tensor make_op(Shape shape, std::vector<R> value,
                          std::vector<Tensor> parents,
                          std::function<void(detail::Node<R>&)> backward_fn) {
        Tensor out = from(std::move(shape), std::move(value));
        bool track = detail::grad_mode();
        bool any = false;
        if (track)
            for (const Tensor& p : parents) any = any || p.requires_grad();
        if (track && any) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(parents.size());
            for (const Tensor& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

private:
    std::shared_ptr<detail::Node<R>> node_;
};

/// Ordered record of the differentiable operations reachable from a loss,
/// in execution (topological) order. Built on demand by backward().
template <typename R>
class GradientTape {
public:
    explicit GradientTape(const Tensor<R>& root) {
        // Iterative post-order DFS; each node enters the tape exactly once.
        std::unordered_set<detail::Node<R>*> seen;
        std::vector<std::pair<std::shared_ptr<detail::Node<R>>, size_t>> stack;
        stack.emplace_back(root.node(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                auto parent = node->parents[next++];
                if (seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    const std::vector<std::shared_ptr<detail::Node<R>>>& order() const { return order_; }

    /// Runs every recorded operation's backward once, in reverse execution
    /// order, then releases the graph (the tape is consumed).
    void replay_reverse() {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            auto& node = **it;
            if (node.backward_fn && !node.grad.empty()) node.backward_fn(node);
        }
        for (auto& node : order_) {
            node->backward_fn = nullptr;
            node->parents.clear();
        }
    }

private:
    std::vector<std::shared_ptr<detail::Node<R>>> order_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every requires_grad tensor reachable from the loss.
template <typename R>
inline void backward(const Tensor<R>& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward() requires a scalar loss");
    if (!loss.requires_grad())
        throw std::invalid_argument("loss is not connected to any recorded operation");
    GradientTape<R> tape(loss);
    loss.node()->ensure_grad()[0] += R(1);
    tape.replay_reverse();
}

}  // namespace corrflow
