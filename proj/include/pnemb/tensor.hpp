#pragma once

// Dense float64 tensors and the reverse-mode tape that differentiates them.
//
// A Tensor is a cheap handle onto shared storage (copying a Tensor aliases
// the same buffer). Operations in ops.hpp read their inputs, allocate a new
// output and, when a Graph is recording and any input requires a gradient,
// append a node whose closure maps the output gradient back onto the inputs.
// Graph::backward replays those closures in exact reverse append order.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pnemb/errors.hpp"

namespace pnemb {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : s_(std::make_shared<Storage>()) {
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor dimension sizes must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                                 std::to_string(data.size()) + " values");
        }
        s_->shape = std::move(shape);
        s_->data = std::move(data);
        s_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(s_); }

    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
    std::size_t numel() const { return s_->data.size(); }

    std::span<const double> data() const { return s_->data; }
    std::span<double> mutable_data() const { return s_->data; }
    const std::vector<double>& values() const { return s_->data; }

    double item() const {
        if (numel() != 1) throw InvalidInput("item() on tensor of shape " + shape_str(shape()));
        return s_->data[0];
    }

    double operator[](std::size_t i) const { return s_->data[i]; }
    double at(std::size_t i, std::size_t j) const { return s_->data[i * s_->shape.back() + j]; }

    bool requires_grad() const { return s_ && s_->requires_grad; }
    void set_requires_grad(bool flag) { s_->requires_grad = flag; }

    /// True for tensors not produced by a recorded operation (parameters, inputs).
    bool is_leaf() const { return s_->is_leaf; }

    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const double> grad() const { return s_->grad; }

    // Tensor is a handle: the mutators below write through shared storage and
    // are const like std::shared_ptr::operator*.

    /// Gradient buffer, allocated (zeroed) on first access.
    std::span<double> mutable_grad() const {
        if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
        return s_->grad;
    }

    void zero_grad() const {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
    }
    void drop_grad() { s_->grad.clear(); }

    /// Deep copy of the values, detached from any graph.
    Tensor clone() const { return Tensor(shape(), s_->data, false); }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    // Used by ops to mark freshly allocated outputs.
    void mark_computed(bool requires_grad) {
        s_->is_leaf = false;
        s_->requires_grad = requires_grad;
    }

private:
    struct Storage {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
        bool is_leaf = true;
    };
    std::shared_ptr<Storage> s_;
};

/// Append-only record of differentiable operations.
///
/// backward() zeroes every non-leaf gradient, seeds the loss with 1 and visits
/// nodes newest-first. Leaf gradients accumulate: calling backward() twice
/// without Tensor::zero_grad() on the parameters doubles them.
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }

    template <typename... Ts>
    bool wants(const Ts&... inputs) const {
        return recording_ && (inputs.requires_grad() || ...);
    }

    bool wants_any(const std::vector<Tensor>& inputs) const {
        if (!recording_) return false;
        for (const auto& t : inputs) {
            if (t.requires_grad()) return true;
        }
        return false;
    }

    void record(std::string op, Tensor output, std::function<void()> backward_fn) {
        output.mark_computed(true);
        nodes_.push_back(Node{std::move(op), std::move(output), std::move(backward_fn)});
    }

    std::size_t size() const { return nodes_.size(); }

    /// Folds discrete choices made during the forward (neighbour indices,
    /// ReLU signs, max-pool winners) into a fingerprint. The loss is smooth in
    /// the parameters wherever the fingerprint stays fixed.
    void note_choice(std::size_t v) { selection_ ^= v + 0x9e3779b97f4a7c15ull + (selection_ << 6) + (selection_ >> 2); }
    void note_selection(const std::vector<std::size_t>& choice) {
        for (std::size_t v : choice) note_choice(v);
        selection_ ^= choice.size() * 0xff51afd7ed558ccdull;
    }
    std::uint64_t selection_fingerprint() const { return selection_; }
    const std::string& op_name(std::size_t i) const { return nodes_.at(i).op; }

    void backward(Tensor loss) {
        if (loss.numel() != 1) {
            throw InvalidInput("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
        }
        for (auto& node : nodes_) {
            node.output.mutable_grad();
            node.output.zero_grad();
        }
        loss.mutable_grad()[0] += 1.0;
        visit_order_.clear();
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            visit_order_.push_back(i);
            nodes_[i].backward();
        }
    }

    /// Node indices in the order the last backward() visited them.
    const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

private:
    struct Node {
        std::string op;
        Tensor output;
        std::function<void()> backward;
    };
    bool recording_;
    std::uint64_t selection_ = 0;
    std::vector<Node> nodes_;
    std::vector<std::size_t> visit_order_;
};

inline bool all_finite(std::span<const double> values) {
    for (double v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace pnemb
