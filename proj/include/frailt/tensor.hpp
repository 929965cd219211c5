#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace frailt {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);
[[noreturn]] void throw_size_mismatch(const Shape& shape, std::size_t got);

/// Dense row-major tensor with an optional gradient buffer of the same shape.
/// Training and inference run on BasicTensor<float>; the double instantiation
/// lets finite-difference oracles evaluate the same code above the f32
/// rounding floor.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;
    explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size()) {
            throw_size_mismatch(shape_, data_.size());
        }
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
    static BasicTensor filled(Shape shape, T value) {
        BasicTensor t(std::move(shape));
        for (T& v : t.data_) {
            v = value;
        }
        return t;
    }
    static BasicTensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t n_rows = rows.size();
        const std::size_t n_cols = n_rows == 0 ? 0 : rows.begin()->size();
        std::vector<T> data;
        data.reserve(n_rows * n_cols);
        for (const auto& row : rows) {
            if (row.size() != n_cols) {
                throw_size_mismatch({n_rows, n_cols}, data.size() + row.size());
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return BasicTensor({n_rows, n_cols}, std::move(data));
    }

    // Same shape and values converted to another scalar type; no gradient.
    template <class U>
    BasicTensor<U> cast() const {
        return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }

    // Matrix view: the trailing dim is the row length, leading dims flatten.
    std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t rows() const noexcept { return cols() == 0 ? 0 : numel() / cols(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }
    T& at(std::size_t row, std::size_t col) { return data_[row * cols() + col]; }
    T at(std::size_t row, std::size_t col) const { return data_[row * cols() + col]; }

    bool has_grad() const noexcept { return !data_.empty() && grad_.size() == data_.size(); }
    void ensure_grad() {
        if (grad_.size() != data_.size()) {
            grad_.assign(data_.size(), T(0));
        }
    }
    void clear_grad() { grad_.clear(); }
    std::span<T> grad() noexcept { return grad_; }
    std::span<const T> grad() const noexcept { return grad_; }

    // Bitwise equality of shape and values.
    bool same_values(const BasicTensor& other) const {
        return shape_ == other.shape_ &&
               (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
    }

private:
    Shape shape_;
    std::vector<T> data_;
    std::vector<T> grad_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

}  // namespace frailt
