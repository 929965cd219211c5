#include "frailt/autograd.hpp"

#include "frailt/error.hpp"

namespace frailt {

template <class T>
BasicVar<T> BasicTape<T>::constant(Tensor value) {
    Node node;
    node.owned = std::move(value);
    nodes_.push_back(std::move(node));
    std::size_t id = nodes_.size() - 1;
    records_.push_back({"constant", {}, id});
    return {this, id};
}

template <class T>
BasicVar<T> BasicTape<T>::parameter(const Tensor& value) {
    Node node;
    node.external = &value;
    node.needs_grad = requires_grad_;
    nodes_.push_back(std::move(node));
    std::size_t id = nodes_.size() - 1;
    records_.push_back({"parameter", {}, id});
    return {this, id};
}

template <class T>
BasicVar<T> BasicTape<T>::record(std::string op, std::vector<std::size_t> inputs, Tensor value,
                                 BackwardFn backward, double scalar, bool has_scalar) {
    Node node;
    node.owned = std::move(value);
    node.has_scalar = has_scalar;
    node.scalar = scalar;
    for (std::size_t in : inputs) {
        if (in >= nodes_.size()) {
            throw IndexError("op '" + op + "' consumes node " + std::to_string(in) + " that does not exist yet");
        }
        node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
    }
    if (node.needs_grad) {
        node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    std::size_t id = nodes_.size() - 1;
    records_.push_back({std::move(op), std::move(inputs), id});
    return {this, id};
}

template <class T>
const BasicTensor<T>& BasicTape<T>::value(std::size_t id) const {
    if (id >= nodes_.size()) {
        throw IndexError("tape node " + std::to_string(id) + " out of range");
    }
    return nodes_[id].value();
}

template <class T>
double BasicTape<T>::scalar(Var v) const {
    const Node& node = nodes_.at(v.id);
    if (node.has_scalar) {
        return node.scalar;
    }
    const Tensor& t = node.value();
    if (t.numel() != 1) {
        throw DimensionError("scalar() on tensor of shape " + shape_to_string(t.shape()));
    }
    return t[0];
}

template <class T>
std::span<const T> BasicTape<T>::grad(Var v) const {
    return nodes_.at(v.id).grad;
}

template <class T>
std::span<T> BasicTape<T>::grad_mut(std::size_t id) {
    Node& node = nodes_.at(id);
    if (node.grad.size() != node.value().numel()) {
        node.grad.assign(node.value().numel(), T(0));
    }
    return node.grad;
}

template <class T>
void BasicTape<T>::backward(Var root, T seed) {
    if (!requires_grad_) {
        throw EvaluationError("backward() on a tape recorded without gradients");
    }
    if (value(root).numel() != 1) {
        throw DimensionError("backward() needs a scalar root, got " + shape_to_string(value(root).shape()));
    }
    grad_mut(root.id)[0] += seed;
    for (std::size_t id = root.id + 1; id-- > 0;) {
        Node& node = nodes_[id];
        if (!node.backward || node.grad.empty()) {
            continue;
        }
        node.backward(*this, id);
    }
}

template class BasicTape<float>;
template class BasicTape<double>;

}  // namespace frailt
