#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "frailt/autograd.hpp"

namespace frailt {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t entries_checked = 0;
    // Location of the worst entry.
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    // Per-tensor maxima, same order as the params argument.
    std::vector<double> per_tensor;
};

// Builds a scalar from parameter leaves already placed on the tape.
template <class T>
using ScalarFunction = std::function<BasicVar<T>(BasicTape<T>&, std::span<const BasicVar<T>>)>;

using Gradients = std::vector<std::vector<double>>;

inline constexpr double kFiniteDiffEpsilon = 1e-3;
inline constexpr std::size_t kGradCheckSamples = 64;

// One reverse pass; unreachable parameters get all-zero gradients.
template <class T>
Gradients analytic_gradients(const ScalarFunction<T>& f, const std::vector<BasicTensor<T>>& params);

/// Checks `analytic` against central finite differences of `f` at `params`.
/// Up to `max_samples` entries per tensor are checked (all of them for small
/// tensors). The relative error of an entry is |a - n| / max(|a|, |n|, 1e-6).
/// `params` are perturbed in place and restored before returning.
///
/// The analytic gradients may come from a different precision than `f`:
/// f32 gradients checked against a double-precision evaluation of the same
/// function are not limited by f32 rounding in the difference quotient.
template <class T>
GradCheckResult compare_with_finite_differences(const Gradients& analytic, const ScalarFunction<T>& f,
                                                std::vector<BasicTensor<T>>& params,
                                                double epsilon = kFiniteDiffEpsilon,
                                                std::size_t max_samples = kGradCheckSamples, std::uint64_t seed = 0);

// Analytic and numeric gradients computed at the same precision.
template <class T>
GradCheckResult grad_check(const ScalarFunction<T>& f, std::vector<BasicTensor<T>>& params,
                           double epsilon = kFiniteDiffEpsilon, std::size_t max_samples = kGradCheckSamples,
                           std::uint64_t seed = 0) {
    return compare_with_finite_differences(analytic_gradients(f, params), f, params, epsilon, max_samples, seed);
}

}  // namespace frailt
