#include "frailt/tensor.hpp"

#include "frailt/error.hpp"

namespace frailt {

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out += "x";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) {
        n *= s;
    }
    return n;
}

void throw_size_mismatch(const Shape& shape, std::size_t got) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(got));
}

}  // namespace frailt
