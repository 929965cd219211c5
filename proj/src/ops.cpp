#include "frailt/ops.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "frailt/error.hpp"

namespace frailt::ops {
namespace {

template <class T>
void require_same_shape(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
}

template <class T>
void require_rank(const char* op, const BasicTensor<T>& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_to_string(t.shape()));
    }
}

// Gradient buffer of an input, or an empty span when it does not need one.
template <class T>
std::span<T> input_grad(BasicTape<T>& tape, std::size_t id) {
    return tape.needs_grad(id) ? tape.grad_mut(id) : std::span<T>{};
}

}  // namespace

template <class T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_rank("matmul", A, 2);
    require_rank("matmul", B, 2);
    if (A.dim(1) != B.dim(0)) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(A.shape()) + " x " +
                             shape_to_string(B.shape()));
    }
    const std::size_t m = A.dim(0);
    const std::size_t k = A.dim(1);
    const std::size_t n = B.dim(1);
    Tensor out({m, n});
    const T* pa = A.data().data();
    const T* pb = B.data().data();
    T* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* row = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] += av * brow[j];
            }
        }
    }
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return a.tape->record("matmul", {ia, ib}, std::move(out), [ia, ib, m, k, n](Tape& tape, std::size_t o) {
        const T* gout = tape.grad_mut(o).data();
        const T* pa = tape.value(ia).data().data();
        const T* pb = tape.value(ib).data().data();
        if (auto ga = input_grad(tape, ia); !ga.empty()) {
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = gout + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const T* brow = pb + p * n;
                    T acc = T(0);
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += grow[j] * brow[j];
                    }
                    ga[i * k + p] += acc;
                }
            }
        }
        if (auto gb = input_grad(tape, ib); !gb.empty()) {
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = gout + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = pa[i * k + p];
                    T* gbrow = gb.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        gbrow[j] += av * grow[j];
                    }
                }
            }
        }
    });
}

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_same_shape("add", A, B);
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = A[i] + B[i];
    }
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return a.tape->record("add", {ia, ib}, std::move(out), [ia, ib](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        for (std::size_t id : {ia, ib}) {
            if (auto gi = input_grad(tape, id); !gi.empty()) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gi[i] += g[i];
                }
            }
        }
    });
}

template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_same_shape("mul", A, B);
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = A[i] * B[i];
    }
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return a.tape->record("mul", {ia, ib}, std::move(out), [ia, ib](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        const Tensor& A = tape.value(ia);
        const Tensor& B = tape.value(ib);
        if (auto ga = input_grad(tape, ia); !ga.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * B[i];
            }
        }
        if (auto gb = input_grad(tape, ib); !gb.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += g[i] * A[i];
            }
        }
    });
}

template <class T>
BasicVar<T> scale(BasicVar<T> x, double factor_in) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const T factor = static_cast<T>(factor_in);
    const Tensor& X = x.value();
    Tensor out(X.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = X[i] * factor;
    }
    const std::size_t ix = x.id;
    return x.tape->record("scale", {ix}, std::move(out), [ix, factor](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        auto gx = tape.grad_mut(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * factor;
        }
    });
}

template <class T>
BasicVar<T> silu(BasicVar<T> x) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& X = x.value();
    Tensor out(X.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-X[i]));
        out[i] = X[i] * s;
    }
    const std::size_t ix = x.id;
    return x.tape->record("silu", {ix}, std::move(out), [ix](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        const Tensor& X = tape.value(ix);
        auto gx = tape.grad_mut(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-X[i]));
            gx[i] += g[i] * s * (T(1) + X[i] * (T(1) - s));
        }
    });
}

template <class T>
BasicVar<T> add_row(BasicVar<T> x, BasicVar<T> row) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& X = x.value();
    const Tensor& R = row.value();
    if (R.numel() != X.cols()) {
        throw DimensionError("add_row: row of shape " + shape_to_string(R.shape()) + " does not match " +
                             shape_to_string(X.shape()));
    }
    const std::size_t d = X.cols();
    Tensor out(X.shape());
    for (std::size_t r = 0; r < X.rows(); ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            out[r * d + c] = X[r * d + c] + R[c];
        }
    }
    const std::size_t ix = x.id;
    const std::size_t ir = row.id;
    return x.tape->record("add_row", {ix, ir}, std::move(out), [ix, ir, d](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        if (auto gx = input_grad(tape, ix); !gx.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
            }
        }
        if (auto gr = input_grad(tape, ir); !gr.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                gr[i % d] += g[i];
            }
        }
    });
}

template <class T>
BasicVar<T> select_row(BasicVar<T> table, std::size_t row) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& tab = table.value();
    require_rank("select_row", tab, 2);
    if (row >= tab.dim(0)) {
        throw IndexError("select_row: row " + std::to_string(row) + " out of range for " +
                         shape_to_string(tab.shape()));
    }
    const std::size_t d = tab.dim(1);
    std::vector<T> values(tab.data().begin() + static_cast<std::ptrdiff_t>(row * d),
                              tab.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
    const std::size_t it = table.id;
    return table.tape->record("select_row", {it}, Tensor({d}, std::move(values)),
                              [it, row, d](Tape& tape, std::size_t o) {
                                  auto g = tape.grad_mut(o);
                                  auto gt = tape.grad_mut(it);
                                  for (std::size_t c = 0; c < d; ++c) {
                                      gt[row * d + c] += g[c];
                                  }
                              });
}

template <class T>
BasicVar<T> embedding(BasicVar<T> table, std::span<const TokenId> ids) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& tab = table.value();
    require_rank("embedding", tab, 2);
    const std::size_t vocab = tab.dim(0);
    const std::size_t d = tab.dim(1);
    Tensor out({ids.size(), d});
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
            throw IndexError("embedding: id " + std::to_string(ids[t]) + " outside [0, " + std::to_string(vocab) + ")");
        }
        const std::size_t src = static_cast<std::size_t>(ids[t]) * d;
        for (std::size_t c = 0; c < d; ++c) {
            out[t * d + c] = tab[src + c];
        }
    }
    const std::size_t it = table.id;
    std::vector<TokenId> kept(ids.begin(), ids.end());
    return table.tape->record("embedding", {it}, std::move(out), [it, d, kept = std::move(kept)](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        auto gt = tape.grad_mut(it);
        for (std::size_t t = 0; t < kept.size(); ++t) {
            const std::size_t dst = static_cast<std::size_t>(kept[t]) * d;
            for (std::size_t c = 0; c < d; ++c) {
                gt[dst + c] += g[t * d + c];
            }
        }
    });
}

template <class T>
BasicVar<T> softmax_rows(BasicVar<T> x) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& X = x.value();
    const std::size_t n = X.cols();
    Tensor out(X.shape());
    for (std::size_t r = 0; r < X.rows(); ++r) {
        const T* in = X.data().data() + r * n;
        T* dst = out.data().data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < n; ++c) {
            mx = std::max(mx, in[c]);
        }
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            total += std::exp(static_cast<double>(in[c]) - mx);
        }
        for (std::size_t c = 0; c < n; ++c) {
            dst[c] = static_cast<T>(std::exp(static_cast<double>(in[c]) - mx) / total);
        }
    }
    const std::size_t ix = x.id;
    return x.tape->record("softmax_rows", {ix}, std::move(out), [ix, n](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        const Tensor& P = tape.value(o);
        auto gx = tape.grad_mut(ix);
        for (std::size_t r = 0; r < P.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                dot += static_cast<double>(g[r * n + c]) * P[r * n + c];
            }
            for (std::size_t c = 0; c < n; ++c) {
                gx[r * n + c] += static_cast<T>(P[r * n + c] * (g[r * n + c] - dot));
            }
        }
    });
}

template <class T>
BasicVar<T> rms_norm(BasicVar<T> x, BasicVar<T> weight, double eps) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& X = x.value();
    const Tensor& W = weight.value();
    const std::size_t d = X.cols();
    if (W.numel() != d) {
        throw DimensionError("rms_norm: weight " + shape_to_string(W.shape()) + " does not match " +
                             shape_to_string(X.shape()));
    }
    const std::size_t rows = X.rows();
    Tensor out(X.shape());
    auto inv_rms = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = X.data().data() + r * d;
        double ms = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            ms += static_cast<double>(in[c]) * in[c];
        }
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + eps);
        (*inv_rms)[r] = inv;
        for (std::size_t c = 0; c < d; ++c) {
            out[r * d + c] = static_cast<T>(in[c] * inv * W[c]);
        }
    }
    const std::size_t ix = x.id;
    const std::size_t iw = weight.id;
    return x.tape->record("rms_norm", {ix, iw}, std::move(out), [ix, iw, d, rows, inv_rms](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        const Tensor& X = tape.value(ix);
        const Tensor& W = tape.value(iw);
        auto gx = input_grad(tape, ix);
        auto gw = input_grad(tape, iw);
        for (std::size_t r = 0; r < rows; ++r) {
            const double inv = (*inv_rms)[r];
            const T* in = X.data().data() + r * d;
            const T* gr = g.data() + r * d;
            if (!gw.empty()) {
                for (std::size_t c = 0; c < d; ++c) {
                    gw[c] += static_cast<T>(gr[c] * in[c] * inv);
                }
            }
            if (!gx.empty()) {
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dot += static_cast<double>(gr[c]) * W[c] * in[c];
                }
                const double coeff = dot * inv * inv * inv / static_cast<double>(d);
                for (std::size_t c = 0; c < d; ++c) {
                    gx[r * d + c] += static_cast<T>(gr[c] * W[c] * inv - in[c] * coeff);
                }
            }
        }
    });
}

template <class T>
BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const TokenId> targets) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& Z = logits.value();
    require_rank("cross_entropy", Z, 2);
    const std::size_t n_pos = Z.dim(0);
    const std::size_t V = Z.dim(1);
    if (targets.size() != n_pos) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n_pos) +
                             " positions");
    }
    if (n_pos == 0) {
        throw DimensionError("cross_entropy: no positions");
    }
    auto lse = std::make_shared<std::vector<double>>(n_pos);
    double total = 0.0;
    for (std::size_t t = 0; t < n_pos; ++t) {
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[t]) + " outside [0, " +
                             std::to_string(V) + ")");
        }
        const T* row = Z.data().data() + t * V;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < V; ++c) {
            mx = std::max(mx, row[c]);
        }
        double s = 0.0;
        for (std::size_t c = 0; c < V; ++c) {
            s += std::exp(static_cast<double>(row[c]) - mx);
        }
        (*lse)[t] = mx + std::log(s);
        total += (*lse)[t] - row[targets[t]];
    }
    const double loss = total / static_cast<double>(n_pos);
    std::vector<TokenId> kept(targets.begin(), targets.end());
    const std::size_t iz = logits.id;
    return logits.tape->record(
        "cross_entropy", {iz}, Tensor({1}, {static_cast<T>(loss)}),
        [iz, n_pos, V, lse, kept = std::move(kept)](Tape& tape, std::size_t o) {
            const double g = tape.grad_mut(o)[0] / static_cast<double>(n_pos);
            const Tensor& Z = tape.value(iz);
            auto gz = tape.grad_mut(iz);
            for (std::size_t t = 0; t < n_pos; ++t) {
                const T* row = Z.data().data() + t * V;
                for (std::size_t c = 0; c < V; ++c) {
                    double p = std::exp(static_cast<double>(row[c]) - (*lse)[t]);
                    if (static_cast<std::size_t>(kept[t]) == c) {
                        p -= 1.0;
                    }
                    gz[t * V + c] += static_cast<T>(g * p);
                }
            }
        },
        loss, true);
}

template <class T>
BasicVar<T> sum(BasicVar<T> x) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& X = x.value();
    double total = 0.0;
    for (T v : X.data()) {
        total += v;
    }
    const std::size_t ix = x.id;
    return x.tape->record(
        "sum", {ix}, Tensor({1}, {static_cast<T>(total)}),
        [ix](Tape& tape, std::size_t o) {
            const T g = tape.grad_mut(o)[0];
            for (T& v : tape.grad_mut(ix)) {
                v += g;
            }
        },
        total, true);
}

template <class T>
BasicVar<T> sum_squares(BasicVar<T> x) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& X = x.value();
    double total = 0.0;
    for (T v : X.data()) {
        total += static_cast<double>(v) * v;
    }
    const std::size_t ix = x.id;
    return x.tape->record(
        "sum_squares", {ix}, Tensor({1}, {static_cast<T>(total)}),
        [ix](Tape& tape, std::size_t o) {
            const T g = tape.grad_mut(o)[0];
            const Tensor& X = tape.value(ix);
            auto gx = tape.grad_mut(ix);
            for (std::size_t i = 0; i < gx.size(); ++i) {
                gx[i] += T(2) * X[i] * g;
            }
        },
        total, true);
}

template <class T>
BasicVar<T> dot(BasicVar<T> a, BasicVar<T> b) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_same_shape("dot", A, B);
    double total = 0.0;
    for (std::size_t i = 0; i < A.numel(); ++i) {
        total += static_cast<double>(A[i]) * B[i];
    }
    const std::size_t ia = a.id;
    const std::size_t ib = b.id;
    return a.tape->record(
        "dot", {ia, ib}, Tensor({1}, {static_cast<T>(total)}),
        [ia, ib](Tape& tape, std::size_t o) {
            const T g = tape.grad_mut(o)[0];
            const Tensor& A = tape.value(ia);
            const Tensor& B = tape.value(ib);
            if (auto ga = input_grad(tape, ia); !ga.empty()) {
                for (std::size_t i = 0; i < ga.size(); ++i) {
                    ga[i] += g * B[i];
                }
            }
            if (auto gb = input_grad(tape, ib); !gb.empty()) {
                for (std::size_t i = 0; i < gb.size(); ++i) {
                    gb[i] += g * A[i];
                }
            }
        },
        total, true);
}

RopeCache RopeCache::build(std::size_t head_dim, std::size_t max_positions, double base) {
    if (head_dim == 0 || head_dim % 2 != 0) {
        throw DimensionError("rope: head dimension must be even and positive, got " + std::to_string(head_dim));
    }
    RopeCache cache;
    cache.head_dim = head_dim;
    cache.max_positions = max_positions;
    const std::size_t half = head_dim / 2;
    cache.cos.resize(max_positions * half);
    cache.sin.resize(max_positions * half);
    for (std::size_t pos = 0; pos < max_positions; ++pos) {
        for (std::size_t p = 0; p < half; ++p) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(pos) * freq;
            cache.cos[pos * half + p] = std::cos(angle);
            cache.sin[pos * half + p] = std::sin(angle);
        }
    }
    return cache;
}

template <class T>
BasicVar<T> rope(BasicVar<T> x, std::size_t n_heads, const RopeCache& cache) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& X = x.value();
    require_rank("rope", X, 2);
    const std::size_t n_pos = X.dim(0);
    const std::size_t width = X.dim(1);
    if (n_heads == 0 || width != n_heads * cache.head_dim) {
        throw DimensionError("rope: width " + std::to_string(width) + " is not n_heads x head_dim");
    }
    if (n_pos > cache.max_positions) {
        throw DimensionError("rope: " + std::to_string(n_pos) + " positions exceed cache of " +
                             std::to_string(cache.max_positions));
    }
    const std::size_t half = cache.head_dim / 2;
    Tensor out(X.shape());
    for (std::size_t t = 0; t < n_pos; ++t) {
        const double* cs = cache.cos.data() + t * half;
        const double* sn = cache.sin.data() + t * half;
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t base = t * width + h * cache.head_dim;
            for (std::size_t p = 0; p < half; ++p) {
                const T x0 = X[base + 2 * p];
                const T x1 = X[base + 2 * p + 1];
                out[base + 2 * p] = static_cast<T>(x0 * cs[p] - x1 * sn[p]);
                out[base + 2 * p + 1] = static_cast<T>(x0 * sn[p] + x1 * cs[p]);
            }
        }
    }
    const std::size_t ix = x.id;
    return x.tape->record("rope", {ix}, std::move(out), [ix, n_pos, width, n_heads, half, &cache](Tape& tape, std::size_t o) {
        auto g = tape.grad_mut(o);
        auto gx = tape.grad_mut(ix);
        for (std::size_t t = 0; t < n_pos; ++t) {
            const double* cs = cache.cos.data() + t * half;
            const double* sn = cache.sin.data() + t * half;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t base = t * width + h * 2 * half;
                for (std::size_t p = 0; p < half; ++p) {
                    const T g0 = g[base + 2 * p];
                    const T g1 = g[base + 2 * p + 1];
                    gx[base + 2 * p] += static_cast<T>(g0 * cs[p] + g1 * sn[p]);
                    gx[base + 2 * p + 1] += static_cast<T>(-g0 * sn[p] + g1 * cs[p]);
                }
            }
        }
    });
}

template <class T>
BasicVar<T> causal_attention(BasicVar<T> q, BasicVar<T> k, BasicVar<T> v, std::size_t n_heads) {
    using Tensor = BasicTensor<T>;
    using Tape = BasicTape<T>;
    const Tensor& Q = q.value();
    const Tensor& K = k.value();
    const Tensor& V = v.value();
    require_rank("causal_attention", Q, 2);
    require_same_shape("causal_attention", Q, K);
    require_same_shape("causal_attention", Q, V);
    const std::size_t n_pos = Q.dim(0);
    const std::size_t width = Q.dim(1);
    if (n_heads == 0 || width % n_heads != 0) {
        throw DimensionError("causal_attention: width " + std::to_string(width) + " not divisible into " +
                             std::to_string(n_heads) + " heads");
    }
    const std::size_t hd = width / n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    // probs[h][i][j] for j <= i; the upper triangle stays zero.
    auto probs = std::make_shared<std::vector<T>>(n_heads * n_pos * n_pos, T(0));
    Tensor out({n_pos, width});
    std::vector<double> scores(n_pos);
    for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t i = 0; i < n_pos; ++i) {
            const T* qi = Q.data().data() + i * width + h * hd;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                const T* kj = K.data().data() + j * width + h * hd;
                double dot = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                    dot += static_cast<double>(qi[c]) * kj[c];
                }
                scores[j] = static_cast<T>(dot) * scale;
                mx = std::max(mx, scores[j]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                total += scores[j];
            }
            T* prow = probs->data() + (h * n_pos + i) * n_pos;
            T* oi = out.data().data() + i * width + h * hd;
            for (std::size_t j = 0; j <= i; ++j) {
                const T p = static_cast<T>(scores[j] / total);
                prow[j] = p;
                const T* vj = V.data().data() + j * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                    oi[c] += p * vj[c];
                }
            }
        }
    }
    const std::size_t iq = q.id;
    const std::size_t ik = k.id;
    const std::size_t iv = v.id;
    return q.tape->record(
        "causal_attention", {iq, ik, iv}, std::move(out),
        [iq, ik, iv, n_pos, width, hd, n_heads, scale, probs](Tape& tape, std::size_t o) {
            auto g = tape.grad_mut(o);
            const T* Qd = tape.value(iq).data().data();
            const T* Kd = tape.value(ik).data().data();
            const T* Vd = tape.value(iv).data().data();
            auto gq = input_grad(tape, iq);
            auto gk = input_grad(tape, ik);
            auto gv = input_grad(tape, iv);
            std::vector<double> dp(n_pos);
            for (std::size_t h = 0; h < n_heads; ++h) {
                for (std::size_t i = 0; i < n_pos; ++i) {
                    const T* prow = probs->data() + (h * n_pos + i) * n_pos;
                    const T* goi = g.data() + i * width + h * hd;
                    double weighted = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T* vj = Vd + j * width + h * hd;
                        double dot = 0.0;
                        for (std::size_t c = 0; c < hd; ++c) {
                            dot += static_cast<double>(goi[c]) * vj[c];
                        }
                        dp[j] = dot;
                        weighted += dot * prow[j];
                        if (!gv.empty()) {
                            T* gvj = gv.data() + j * width + h * hd;
                            for (std::size_t c = 0; c < hd; ++c) {
                                gvj[c] += prow[j] * goi[c];
                            }
                        }
                    }
                    const T* qi = Qd + i * width + h * hd;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T ds = static_cast<T>(prow[j] * (dp[j] - weighted) * scale);
                        if (ds == T(0)) {
                            continue;
                        }
                        const T* kj = Kd + j * width + h * hd;
                        if (!gq.empty()) {
                            T* gqi = gq.data() + i * width + h * hd;
                            for (std::size_t c = 0; c < hd; ++c) {
                                gqi[c] += ds * kj[c];
                            }
                        }
                        if (!gk.empty()) {
                            T* gkj = gk.data() + j * width + h * hd;
                            for (std::size_t c = 0; c < hd; ++c) {
                                gkj[c] += ds * qi[c];
                            }
                        }
                    }
                }
            }
        });
}

#define FRAILT_OPS_INSTANTIATE(T)                                                                \
    template BasicVar<T> matmul(BasicVar<T>, BasicVar<T>);                                       \
    template BasicVar<T> add(BasicVar<T>, BasicVar<T>);                                          \
    template BasicVar<T> mul(BasicVar<T>, BasicVar<T>);                                          \
    template BasicVar<T> scale(BasicVar<T>, double);                                             \
    template BasicVar<T> silu(BasicVar<T>);                                                      \
    template BasicVar<T> add_row(BasicVar<T>, BasicVar<T>);                                      \
    template BasicVar<T> select_row(BasicVar<T>, std::size_t);                                   \
    template BasicVar<T> embedding(BasicVar<T>, std::span<const TokenId>);                       \
    template BasicVar<T> softmax_rows(BasicVar<T>);                                              \
    template BasicVar<T> rms_norm(BasicVar<T>, BasicVar<T>, double);                             \
    template BasicVar<T> cross_entropy(BasicVar<T>, std::span<const TokenId>);                   \
    template BasicVar<T> sum(BasicVar<T>);                                                       \
    template BasicVar<T> sum_squares(BasicVar<T>);                                               \
    template BasicVar<T> dot(BasicVar<T>, BasicVar<T>);                                          \
    template BasicVar<T> rope(BasicVar<T>, std::size_t, const RopeCache&);                       \
    template BasicVar<T> causal_attention(BasicVar<T>, BasicVar<T>, BasicVar<T>, std::size_t);

FRAILT_OPS_INSTANTIATE(float)
FRAILT_OPS_INSTANTIATE(double)

}  // namespace frailt::ops
