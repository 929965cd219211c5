#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "frailt/autograd.hpp"

// Every op is instantiated for float (production) and double (oracles).
namespace frailt::ops {

inline constexpr double kRmsNormEps = 1e-5;

// Matrix product of two rank-2 tensors.
template <class T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b);

// Elementwise ops over identically shaped operands.
template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b);
template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b);
template <class T>
BasicVar<T> scale(BasicVar<T> x, double factor);
template <class T>
BasicVar<T> silu(BasicVar<T> x);

// Adds a length-d vector to every row of a [..., d] tensor.
template <class T>
BasicVar<T> add_row(BasicVar<T> x, BasicVar<T> row);

// Row `row` of a [n, d] table, returned as shape [d].
template <class T>
BasicVar<T> select_row(BasicVar<T> table, std::size_t row);

// Gathers table rows for each id: [V, d] -> [T, d].
template <class T>
BasicVar<T> embedding(BasicVar<T> table, std::span<const TokenId> ids);

// Softmax over the trailing dimension with max subtraction.
template <class T>
BasicVar<T> softmax_rows(BasicVar<T> x);

// Rows scaled to unit RMS, then multiplied elementwise by `weight`.
template <class T>
BasicVar<T> rms_norm(BasicVar<T> x, BasicVar<T> weight, double eps = kRmsNormEps);

// Mean next-token negative log-likelihood (natural log) of [T, V] logits.
template <class T>
BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const TokenId> targets);

// Scalar reductions; the result keeps full double precision (Tape::scalar).
template <class T>
BasicVar<T> sum(BasicVar<T> x);
template <class T>
BasicVar<T> sum_squares(BasicVar<T> x);
template <class T>
BasicVar<T> dot(BasicVar<T> a, BasicVar<T> b);

/// Precomputed rotary angles for positions [0, max_positions) and one head.
struct RopeCache {
    std::size_t head_dim = 0;
    std::size_t max_positions = 0;
    std::vector<double> cos;  // [max_positions, head_dim / 2]
    std::vector<double> sin;

    static RopeCache build(std::size_t head_dim, std::size_t max_positions, double base = 10000.0);
};

// Rotates interleaved (even, odd) pairs of every head of a [T, n_heads * head_dim] tensor.
template <class T>
BasicVar<T> rope(BasicVar<T> x, std::size_t n_heads, const RopeCache& cache);

// Causal multi-head scaled dot-product attention; q, k, v are [T, n_heads * head_dim].
template <class T>
BasicVar<T> causal_attention(BasicVar<T> q, BasicVar<T> k, BasicVar<T> v, std::size_t n_heads);

}  // namespace frailt::ops
