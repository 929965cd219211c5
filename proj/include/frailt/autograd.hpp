#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "frailt/tensor.hpp"

namespace frailt {

template <class T>
class BasicTape;

/// Handle to a value recorded on a tape.
template <class T>
struct BasicVar {
    BasicTape<T>* tape = nullptr;
    std::size_t id = 0;

    const BasicTensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    explicit operator bool() const noexcept { return tape != nullptr; }
};

/// One replayable step of the forward pass.
struct ComputationRecord {
    std::string op;
    std::vector<std::size_t> inputs;
    std::size_t output = 0;
};

/// Reverse-mode tape. Values are appended in evaluation order, so the
/// record list is topologically sorted by construction and backward simply
/// walks it in reverse.
template <class T>
class BasicTape {
public:
    using Tensor = BasicTensor<T>;
    using Var = BasicVar<T>;
    // Propagates gradient from the output node into its inputs.
    using BackwardFn = std::function<void(BasicTape&, std::size_t out)>;

    explicit BasicTape(bool requires_grad = true) : requires_grad_(requires_grad) {}
    BasicTape(const BasicTape&) = delete;
    BasicTape& operator=(const BasicTape&) = delete;

    bool requires_grad() const noexcept { return requires_grad_; }

    Var constant(Tensor value);
    // Leaf that reads from an external tensor; the tensor must outlive the tape.
    Var parameter(const Tensor& value);

    Var record(std::string op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward,
               double scalar = 0.0, bool has_scalar = false);

    const Tensor& value(std::size_t id) const;
    const Tensor& value(Var v) const { return value(v.id); }

    // Full-precision value for scalar reductions (loss, sums); falls back to
    // the stored value for everything else.
    double scalar(Var v) const;

    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    std::span<const T> grad(Var v) const;
    std::span<T> grad_mut(std::size_t id);

    void backward(Var root, T seed = T(1));

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<ComputationRecord>& records() const noexcept { return records_; }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        std::vector<T> grad;
        BackwardFn backward;
        bool needs_grad = false;
        bool has_scalar = false;
        double scalar = 0.0;

        const Tensor& value() const { return external ? *external : owned; }
    };

    bool requires_grad_;
    std::deque<Node> nodes_;
    std::vector<ComputationRecord> records_;
};

template <class T>
const BasicTensor<T>& BasicVar<T>::value() const {
    return tape->value(id);
}

using Var = BasicVar<float>;
using Tape = BasicTape<float>;
using VarD = BasicVar<double>;
using TapeD = BasicTape<double>;

extern template class BasicTape<float>;
extern template class BasicTape<double>;

}  // namespace frailt
