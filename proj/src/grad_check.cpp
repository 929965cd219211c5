#include "frailt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "frailt/error.hpp"
#include "frailt/rng.hpp"

namespace frailt {
namespace {

template <class T>
double evaluate(const ScalarFunction<T>& f, const std::vector<BasicTensor<T>>& params, Gradients* grads) {
    BasicTape<T> tape(grads != nullptr);
    std::vector<BasicVar<T>> vars;
    vars.reserve(params.size());
    for (const BasicTensor<T>& p : params) {
        vars.push_back(tape.parameter(p));
    }
    BasicVar<T> out = f(tape, vars);
    const double value = tape.scalar(out);
    if (!std::isfinite(value)) {
        throw EvaluationError("grad_check: function returned a non-finite value");
    }
    if (grads != nullptr) {
        tape.backward(out);
        grads->clear();
        for (std::size_t i = 0; i < vars.size(); ++i) {
            auto g = tape.grad(vars[i]);
            if (g.empty()) {
                grads->emplace_back(params[i].numel(), 0.0);
            } else {
                grads->emplace_back(g.begin(), g.end());
            }
        }
    }
    return value;
}

std::vector<std::size_t> sample_indices(std::size_t numel, std::size_t max_samples, std::uint64_t seed) {
    std::vector<std::size_t> idx(numel);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (numel <= max_samples) {
        return idx;
    }
    Rng rng(seed);
    for (std::size_t i = 0; i < max_samples; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(numel - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(max_samples);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

template <class T>
Gradients analytic_gradients(const ScalarFunction<T>& f, const std::vector<BasicTensor<T>>& params) {
    Gradients grads;
    evaluate(f, params, &grads);
    return grads;
}

template <class T>
GradCheckResult compare_with_finite_differences(const Gradients& analytic, const ScalarFunction<T>& f,
                                                std::vector<BasicTensor<T>>& params, double epsilon,
                                                std::size_t max_samples, std::uint64_t seed) {
    if (analytic.size() != params.size()) {
        throw DimensionError("grad_check: " + std::to_string(analytic.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    }
    GradCheckResult result;
    result.per_tensor.assign(params.size(), 0.0);
    for (std::size_t ti = 0; ti < params.size(); ++ti) {
        BasicTensor<T>& p = params[ti];
        if (analytic[ti].size() != p.numel()) {
            throw DimensionError("grad_check: gradient " + std::to_string(ti) + " has " +
                                 std::to_string(analytic[ti].size()) + " entries for shape " +
                                 shape_to_string(p.shape()));
        }
        for (std::size_t idx : sample_indices(p.numel(), max_samples, mix_seed(seed, ti))) {
            const T original = p[idx];
            const T up = static_cast<T>(original + epsilon);
            const T down = static_cast<T>(original - epsilon);
            p[idx] = up;
            const double f_up = evaluate<T>(f, params, nullptr);
            p[idx] = down;
            const double f_down = evaluate<T>(f, params, nullptr);
            p[idx] = original;

            // The representable step, not 2 * epsilon, is what was taken.
            const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
            const double a = analytic[ti][idx];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            const double rel = std::abs(a - numeric) / denom;
            ++result.entries_checked;
            result.per_tensor[ti] = std::max(result.per_tensor[ti], rel);
            if (rel > result.max_relative_error || result.entries_checked == 1) {
                result.max_relative_error = rel;
                result.worst_tensor = ti;
                result.worst_index = idx;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

template Gradients analytic_gradients(const ScalarFunction<float>&, const std::vector<Tensor>&);
template Gradients analytic_gradients(const ScalarFunction<double>&, const std::vector<TensorD>&);
template GradCheckResult compare_with_finite_differences(const Gradients&, const ScalarFunction<float>&,
                                                         std::vector<Tensor>&, double, std::size_t, std::uint64_t);
template GradCheckResult compare_with_finite_differences(const Gradients&, const ScalarFunction<double>&,
                                                         std::vector<TensorD>&, double, std::size_t, std::uint64_t);

}  // namespace frailt
