#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "slmprop/nn/tensor.hpp"

namespace slmprop::nn {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    Tape* tape() const noexcept { return tape_; }
    int id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr && id_ >= 0; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    int64_t dim(int axis) const { return value().dim(axis); }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Ordered record of primitive operations. backward() replays adjoints in exact reverse
// execution order. A tape built with grad disabled only stores values.
class Tape {
public:
    // Called with the tape and the adjoint of the node's output.
    using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }
    size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor value);
    Var leaf(Tensor value);

    // The node requires grad iff grad is enabled and any input requires grad; otherwise the
    // backward closure is dropped.
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
    Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);

    const Tensor& value(const Var& v) const;
    bool requires_grad(const Var& v) const;

    // Gradient accumulated at v (zeros if v received none).
    Tensor grad(const Var& v) const;

    // Mutable adjoint buffer for v, zero-allocated on first use. Only valid for vars that
    // require grad.
    Tensor& grad_buffer(const Var& v);

    void backward(const Var& loss);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Backward backward;
    };

    void check(const Var& v) const;

    bool grad_enabled_;
    std::deque<Node> nodes_; // stable references across pushes
};

} // namespace slmprop::nn
