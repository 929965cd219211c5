#include <doctest.h>

#include <cmath>
#include <string>

#include "frailt/error.hpp"
#include "frailt/grad_check.hpp"
#include "frailt/ops.hpp"
#include "frailt/rng.hpp"

using namespace frailt;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    Tensor t(std::move(shape));
    for (float& v : t.data()) {
        v = lo + static_cast<float>(rng.uniform()) * (hi - lo);
    }
    return t;
}

// Weighted sum so every output entry gets a distinct upstream gradient.
template <class T>
BasicVar<T> weighted_sum(BasicTape<T>& tape, BasicVar<T> x, std::uint64_t seed) {
    Rng rng(seed);
    return ops::dot(x, tape.constant(random_tensor(x.shape(), rng).template cast<T>()));
}

struct BackwardCheck {
    GradCheckResult f64;    // double analytic vs double differences
    GradCheckResult mixed;  // production f32 analytic vs double differences
};

// `f` is a generic lambda usable at both precisions.
template <class F>
BackwardCheck check_backward(F f, const std::vector<Tensor>& params, double eps = kFiniteDiffEpsilon) {
    const ScalarFunction<float> f32 = f;
    const ScalarFunction<double> f64 = f;
    const Gradients g32 = analytic_gradients(f32, params);
    std::vector<TensorD> p64;
    for (const Tensor& t : params) {
        p64.push_back(t.template cast<double>());
    }
    BackwardCheck out;
    out.f64 = grad_check(f64, p64, eps);
    out.mixed = compare_with_finite_differences(g32, f64, p64, eps);
    return out;
}

}  // namespace

TEST_CASE("matmul examples") {
    Tape tape;
    SUBCASE("identity") {
        Var a = tape.constant(Tensor::from_rows({{1, 0}, {0, 1}}));
        Var b = tape.constant(Tensor::from_rows({{3, 4}, {5, 6}}));
        CHECK(ops::matmul(a, b).value().same_values(Tensor::from_rows({{3, 4}, {5, 6}})));
    }
    SUBCASE("hand arithmetic") {
        Var a = tape.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
        Var b = tape.constant(Tensor::from_rows({{5, 6}, {7, 8}}));
        CHECK(ops::matmul(a, b).value().same_values(Tensor::from_rows({{19, 22}, {43, 50}})));
    }
    SUBCASE("annihilator") {
        Rng rng(3);
        Var a = tape.constant(Tensor::zeros({2, 3}));
        Var b = tape.constant(random_tensor({3, 2}, rng));
        CHECK(ops::matmul(a, b).value().same_values(Tensor::zeros({2, 2})));
    }
    SUBCASE("shape mismatch names both shapes") {
        Var a = tape.constant(Tensor::zeros({2, 3}));
        Var b = tape.constant(Tensor::zeros({2, 2}));
        try {
            ops::matmul(a, b);
            FAIL("expected DimensionError");
        } catch (const DimensionError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("[2x3]") != std::string::npos);
            CHECK(msg.find("[2x2]") != std::string::npos);
        }
    }
}

TEST_CASE("softmax_rows examples") {
    Tape tape;
    SUBCASE("uniform row") {
        Tensor p = ops::softmax_rows(tape.constant(Tensor::from_rows({{0, 0, 0, 0}}))).value();
        for (float v : p.data()) {
            CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
        }
    }
    SUBCASE("saturation without overflow") {
        Tensor p = ops::softmax_rows(tape.constant(Tensor::from_rows({{1000, 0}}))).value();
        CHECK(p[0] == 1.0f);
        CHECK(p[1] == 0.0f);
    }
    SUBCASE("closed form") {
        Tensor p = ops::softmax_rows(tape.constant(Tensor::from_rows({{std::log(2.0f), 0}}))).value();
        CHECK(p[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
        CHECK(p[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax rows sum to one for finite inputs") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Tape tape(false);
        const float spread = static_cast<float>(std::pow(10.0, rng.uniform() * 4.0));
        Tensor p = ops::softmax_rows(tape.constant(random_tensor({3, 1 + rng.below(40)}, rng, -spread, spread))).value();
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < p.cols(); ++c) {
                total += p.at(r, c);
            }
            CHECK(std::abs(total - 1.0) <= 1e-5);
        }
    }
}

TEST_CASE("rms_norm examples") {
    Tape tape;
    SUBCASE("uniform row") {
        Var x = tape.constant(Tensor::filled({1, 5}, -3.5f));
        Tensor y = ops::rms_norm(x, tape.constant(Tensor::filled({5}, 1.0f))).value();
        for (float v : y.data()) {
            CHECK(std::abs(v) == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
    SUBCASE("zero row stays zero") {
        Tensor y = ops::rms_norm(tape.constant(Tensor::zeros({1, 4})), tape.constant(Tensor::filled({4}, 1.0f))).value();
        for (float v : y.data()) {
            CHECK(v == 0.0f);
        }
    }
    SUBCASE("hand RMS with eps 0") {
        Tensor y = ops::rms_norm(tape.constant(Tensor::from_rows({{3, 4}})), tape.constant(Tensor::filled({2}, 1.0f)), 0.0f)
                       .value();
        CHECK(y[0] == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-6));
        CHECK(y[1] == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-6));
        CHECK(y[0] == doctest::Approx(0.8485).epsilon(1e-4));
        CHECK(y[1] == doctest::Approx(1.1314).epsilon(1e-4));
    }
}

TEST_CASE("cross_entropy examples") {
    Tape tape;
    SUBCASE("uniform logits give ln V") {
        Var z = tape.constant(Tensor::zeros({3, 512}));
        const std::vector<TokenId> targets{0, 17, 511};
        CHECK(tape.scalar(ops::cross_entropy(z, targets)) == doctest::Approx(std::log(512.0)).epsilon(1e-12));
        CHECK(std::log(512.0) == doctest::Approx(6.2383).epsilon(1e-4));
    }
    SUBCASE("dominant target") {
        Tensor logits = Tensor::zeros({2, 8});
        logits.at(0, 3) = 1e4f;
        logits.at(1, 5) = 1e4f;
        const std::vector<TokenId> targets{3, 5};
        CHECK(tape.scalar(ops::cross_entropy(tape.constant(logits), targets)) == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("closed form") {
        const std::vector<TokenId> targets{0};
        Var z = tape.constant(Tensor::from_rows({{std::log(2.0f), 0}}));
        CHECK(tape.scalar(ops::cross_entropy(z, targets)) == doctest::Approx(-std::log(2.0 / 3.0)).epsilon(1e-7));
        CHECK(-std::log(2.0 / 3.0) == doctest::Approx(0.4055).epsilon(1e-4));
    }
    SUBCASE("out-of-range target") {
        const std::vector<TokenId> targets{4};
        CHECK_THROWS_AS(ops::cross_entropy(tape.constant(Tensor::zeros({1, 4})), targets), IndexError);
    }
}

TEST_CASE("grad_check examples") {
    SUBCASE("sum of squares") {
        std::vector<Tensor> params{Tensor({3}, {1, 2, 3})};
        const ScalarFunction<float> f = [](Tape&, std::span<const Var> p) { return ops::sum_squares(p[0]); };
        Tape tape;
        Var x = tape.parameter(params[0]);
        tape.backward(f(tape, std::vector<Var>{x}));
        const auto g = tape.grad(x);
        CHECK(g[0] == 2.0f);
        CHECK(g[1] == 4.0f);
        CHECK(g[2] == 6.0f);
        CHECK(grad_check(f, params).max_relative_error < 1e-3);
        CHECK(params[0].same_values(Tensor({3}, {1, 2, 3})));
    }
    SUBCASE("constant function") {
        std::vector<Tensor> params{Tensor({3}, {1, 2, 3})};
        const ScalarFunction<float> f = [](Tape& tape, std::span<const Var>) {
            return ops::sum(tape.constant(Tensor({2}, {4, 5})));
        };
        GradCheckResult r = grad_check(f, params);
        CHECK(r.max_relative_error == 0.0);
        CHECK(r.entries_checked == 3);
    }
    SUBCASE("non-finite value") {
        std::vector<Tensor> params{Tensor({1}, {std::numeric_limits<float>::infinity()})};
        const ScalarFunction<float> f = [](Tape&, std::span<const Var> p) { return ops::sum(p[0]); };
        CHECK_THROWS_AS(grad_check(f, params), EvaluationError);
    }
    SUBCASE("samples at most 64 entries per tensor") {
        std::vector<Tensor> params{Tensor::filled({10, 10}, 0.5f)};
        const ScalarFunction<float> f = [](Tape&, std::span<const Var> p) { return ops::sum_squares(p[0]); };
        CHECK(grad_check(f, params).entries_checked == 64);
    }
    SUBCASE("wrong gradient is caught") {
        std::vector<TensorD> params{TensorD({2}, {0.5, -1.0})};
        const ScalarFunction<double> f = [](TapeD&, std::span<const VarD> p) { return ops::sum_squares(p[0]); };
        const Gradients wrong{{1.0, -2.0 * 1.1}};
        CHECK(compare_with_finite_differences(wrong, f, params).max_relative_error ==
              doctest::Approx(0.1 / 1.1).epsilon(1e-6));
    }
}

// Each op is checked on five random draws in [-1, 1] with epsilon 1e-3.
// Differences are taken in double precision; f32 output rounding would
// otherwise put ~1e-5 of noise on every difference quotient.
TEST_CASE("backward matches central differences on random inputs") {
    Rng rng(2024);
    auto expect_close = [](const BackwardCheck& r, const char* op) {
        CHECK_MESSAGE(r.f64.max_relative_error < 1e-2, op, " (f64)");
        CHECK_MESSAGE(r.mixed.max_relative_error < 1e-2, op, " (f32 analytic)");
    };
    for (int trial = 0; trial < 5; ++trial) {
        CAPTURE(trial);
        const std::uint64_t wseed = rng.next();
        expect_close(check_backward([wseed](auto& t, auto v) { return weighted_sum(t, ops::matmul(v[0], v[1]), wseed); },
                                    {random_tensor({4, 5}, rng), random_tensor({5, 3}, rng)}),
                     "matmul");
        expect_close(check_backward([wseed](auto& t, auto v) { return weighted_sum(t, ops::softmax_rows(v[0]), wseed); },
                                    {random_tensor({3, 6}, rng)}),
                     "softmax_rows");
        expect_close(
            check_backward([wseed](auto& t, auto v) { return weighted_sum(t, ops::rms_norm(v[0], v[1]), wseed); },
                           {random_tensor({3, 8}, rng), random_tensor({8}, rng)}),
            "rms_norm");
        std::vector<TokenId> targets;
        for (int i = 0; i < 5; ++i) {
            targets.push_back(static_cast<TokenId>(rng.below(7)));
        }
        expect_close(check_backward([targets](auto&, auto v) { return ops::cross_entropy(v[0], targets); },
                                    {random_tensor({5, 7}, rng)}),
                     "cross_entropy");
        expect_close(check_backward(
                         [wseed](auto& t, auto v) {
                             auto x = ops::add_row(v[0], ops::select_row(v[1], 2));
                             return weighted_sum(t, ops::mul(ops::silu(x), ops::scale(x, 0.5)), wseed);
                         },
                         {random_tensor({4, 6}, rng), random_tensor({3, 6}, rng)}),
                     "silu/mul/scale/add_row/select_row");
        const std::vector<TokenId> ids{1, 4, 1, 0};
        expect_close(check_backward([wseed, ids](auto& t, auto v) { return weighted_sum(t, ops::embedding(v[0], ids), wseed); },
                                    {random_tensor({6, 4}, rng)}),
                     "embedding");
        expect_close(check_backward([](auto&, auto v) { return ops::add(ops::sum(v[0]), ops::sum_squares(v[0])); },
                                    {random_tensor({2, 3}, rng)}),
                     "sum/sum_squares/add");
    }
}

TEST_CASE("rope and causal attention backward match central differences") {
    static const ops::RopeCache cache = ops::RopeCache::build(4, 16);
    Rng rng(77);
    for (int trial = 0; trial < 5; ++trial) {
        CAPTURE(trial);
        const std::uint64_t wseed = rng.next();
        const BackwardCheck r = check_backward(
            [wseed](auto& t, auto v) {
                auto q = ops::rope(v[0], 2, cache);
                auto k = ops::rope(v[1], 2, cache);
                return weighted_sum(t, ops::causal_attention(q, k, v[2], 2), wseed);
            },
            {random_tensor({5, 8}, rng), random_tensor({5, 8}, rng), random_tensor({5, 8}, rng)});
        CHECK(r.f64.max_relative_error < 1e-2);
        CHECK(r.mixed.max_relative_error < 1e-2);
    }
}

TEST_CASE("causal attention ignores future positions") {
    Rng rng(5);
    Tensor q = random_tensor({6, 8}, rng);
    Tensor k = random_tensor({6, 8}, rng);
    Tensor v = random_tensor({6, 8}, rng);
    Tape a(false);
    Tensor base = ops::causal_attention(a.constant(q), a.constant(k), a.constant(v), 2).value();
    for (std::size_t c = 0; c < 8; ++c) {
        k.at(4, c) += 3.0f;
        v.at(5, c) -= 2.0f;
    }
    Tape b(false);
    Tensor changed = ops::causal_attention(b.constant(q), b.constant(k), b.constant(v), 2).value();
    for (std::size_t i = 0; i < 4 * 8; ++i) {
        CHECK(base[i] == changed[i]);
    }
}

TEST_CASE("forward ops are deterministic") {
    Rng rng(9);
    Tensor x = random_tensor({4, 8}, rng);
    Tensor w = random_tensor({8, 8}, rng);
    Tensor g = random_tensor({8}, rng);
    auto run = [&] {
        Tape t(false);
        return ops::softmax_rows(ops::rms_norm(ops::matmul(t.constant(x), t.constant(w)), t.constant(g))).value();
    };
    CHECK(run().same_values(run()));
}

TEST_CASE("computation record is topologically ordered") {
    Rng rng(1);
    Tensor pa = random_tensor({2, 3}, rng);
    Tape tape;
    Var a = tape.parameter(pa);
    Var b = tape.constant(random_tensor({3, 2}, rng));
    Var c = ops::softmax_rows(ops::matmul(a, b));
    tape.backward(ops::sum_squares(c));
    for (const ComputationRecord& rec : tape.records()) {
        for (std::size_t in : rec.inputs) {
            CHECK(in < rec.output);
        }
    }
    CHECK(tape.records().back().op == "sum_squares");
}

TEST_CASE("tensor shape invariants") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK_FALSE(t.has_grad());
    t.ensure_grad();
    CHECK(t.grad().size() == t.numel());
}
