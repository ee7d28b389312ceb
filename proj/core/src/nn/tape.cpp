#include "slmprop/nn/tape.hpp"

#include "slmprop/error.hpp"

namespace slmprop::nn {

const Tensor& Var::value() const {
    if (!valid()) throw Error(ErrorCode::ShapeMismatch, "use of unbound Var");
    return tape_->value(*this);
}

bool Var::requires_grad() const { return valid() && tape_->requires_grad(*this); }

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, grad_enabled_, {}});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    if (grad_enabled_) {
        for (const auto& in : inputs) {
            check(in);
            needs = needs || nodes_[static_cast<size_t>(in.id())].requires_grad;
        }
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    if (grad_enabled_) {
        for (const auto& in : inputs) {
            check(in);
            needs = needs || nodes_[static_cast<size_t>(in.id())].requires_grad;
        }
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check(const Var& v) const {
    if (v.tape() != this || v.id() < 0 || static_cast<size_t>(v.id()) >= nodes_.size()) {
        throw Error(ErrorCode::ShapeMismatch, "Var does not belong to this tape");
    }
}

const Tensor& Tape::value(const Var& v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.id())].value;
}

bool Tape::requires_grad(const Var& v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.id())].requires_grad;
}

Tensor Tape::grad(const Var& v) const {
    check(v);
    const auto& node = nodes_[static_cast<size_t>(v.id())];
    if (node.grad.empty()) return Tensor(node.value.shape(), 0.0);
    return node.grad;
}

Tensor& Tape::grad_buffer(const Var& v) {
    check(v);
    auto& node = nodes_[static_cast<size_t>(v.id())];
    if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
    return node.grad;
}

void Tape::backward(const Var& loss) {
    check(loss);
    if (!grad_enabled_) throw Error(ErrorCode::MissingGrad, "backward on a tape with grad disabled");
    auto& root = nodes_[static_cast<size_t>(loss.id())];
    if (root.value.numel() != 1) throw Error(ErrorCode::ShapeMismatch, "backward requires a scalar loss");
    if (!root.requires_grad) return;
    grad_buffer(loss)[0] += 1.0;
    for (int id = loss.id(); id >= 0; --id) {
        auto& node = nodes_[static_cast<size_t>(id)];
        if (!node.backward || node.grad.empty()) continue;
        node.backward(*this, node.grad);
    }
}

} // namespace slmprop::nn
