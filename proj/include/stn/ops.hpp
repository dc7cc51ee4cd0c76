#pragma once

#include <cmath>
#include <vector>

#include "stn/kernels.hpp"
#include "stn/tape.hpp"
#include "stn/tensor.hpp"

// Differentiable tensor operations recorded on a Tape. Broadcasting is
// limited to bias addition inside linear/conv; everything else requires
// matching shapes.

namespace stn {
namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

// outer * axis * inner decomposition for reductions along one axis.
inline void axis_split(const Shape& s, size_t axis, size_t& outer, size_t& n, size_t& inner) {
    if (axis >= s.size())
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    outer = 1;
    inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    detail::require_same_shape(av, bv, "add");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var, const Tensor<T>& g) {
        if (t.requires_grad(a)) {
            auto& da = t.grad_buffer(a);
            for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (t.requires_grad(b)) {
            auto& db = t.grad_buffer(b);
            for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
        }
    });
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    detail::require_same_shape(av, bv, "sub");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var, const Tensor<T>& g) {
        if (t.requires_grad(a)) {
            auto& da = t.grad_buffer(a);
            for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (t.requires_grad(b)) {
            auto& db = t.grad_buffer(b);
            for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        }
    });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    detail::require_same_shape(av, bv, "mul");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var, const Tensor<T>& g) {
        const auto& av = t.val(a);
        const auto& bv = t.val(b);
        if (t.requires_grad(a)) {
            auto& da = t.grad_buffer(a);
            for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b)) {
            auto& db = t.grad_buffer(b);
            for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var div_(Tape<T>& t, Var a, Var b) {
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    detail::require_same_shape(av, bv, "div");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var self, const Tensor<T>& g) {
        const auto& bv = t.val(b);
        const auto& y = t.val(self);
        if (t.requires_grad(a)) {
            auto& da = t.grad_buffer(a);
            for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] / bv[i];
        }
        if (t.requires_grad(b)) {
            auto& db = t.grad_buffer(b);
            for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i] * y[i] / bv[i];
        }
    });
}

template <typename T>
Var mul_scalar(Tape<T>& t, Var a, T c) {
    const auto& av = t.val(a);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return t.record(std::move(out), {a}, [a, c](Tape<T>& t, Var, const Tensor<T>& g) {
        if (!t.requires_grad(a)) return;
        auto& da = t.grad_buffer(a);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
    });
}

template <typename T>
Var add_scalar(Tape<T>& t, Var a, T c) {
    const auto& av = t.val(a);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    return t.record(std::move(out), {a}, [a](Tape<T>& t, Var, const Tensor<T>& g) {
        if (!t.requires_grad(a)) return;
        auto& da = t.grad_buffer(a);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
}

// a + c with c treated as a constant (no gradient into c).
template <typename T>
Var add_detached(Tape<T>& t, Var a, const Tensor<T>& c) {
    const auto& av = t.val(a);
    detail::require_same_shape(av, c, "add_detached");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c[i];
    return t.record(std::move(out), {a}, [a](Tape<T>& t, Var, const Tensor<T>& g) {
        if (!t.requires_grad(a)) return;
        auto& da = t.grad_buffer(a);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Var tanh_(Tape<T>& t, Var a) {
    const auto& av = t.val(a);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
    return t.record(std::move(out), {a}, [a](Tape<T>& t, Var self, const Tensor<T>& g) {
        if (!t.requires_grad(a)) return;
        const auto& y = t.val(self);
        auto& da = t.grad_buffer(a);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (T(1) - y[i] * y[i]);
    });
}

template <typename T>
Var sigmoid(Tape<T>& t, Var a) {
    const auto& av = t.val(a);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        const T x = av[i];
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                           : std::exp(x) / (T(1) + std::exp(x));
    }
    return t.record(std::move(out), {a}, [a](Tape<T>& t, Var self, const Tensor<T>& g) {
        if (!t.requires_grad(a)) return;
        const auto& y = t.val(self);
        auto& da = t.grad_buffer(a);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (T(1) - y[i]);
    });
}

template <typename T>
Var exp_(Tape<T>& t, Var a) {
    const auto& av = t.val(a);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    return t.record(std::move(out), {a}, [a](Tape<T>& t, Var self, const Tensor<T>& g) {
        if (!t.requires_grad(a)) return;
        const auto& y = t.val(self);
        auto& da = t.grad_buffer(a);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i];
    });
}

// Smooth gate activation, exact erf form.
template <typename T>
Var gelu(Tape<T>& t, Var a) {
    const auto& av = t.val(a);
    Tensor<T> out(av.shape());
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    for (size_t i = 0; i < out.size(); ++i) {
        const T x = av[i];
        out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    return t.record(std::move(out), {a}, [a](Tape<T>& t, Var, const Tensor<T>& g) {
        if (!t.requires_grad(a)) return;
        const auto& av = t.val(a);
        auto& da = t.grad_buffer(a);
        const T inv_sqrt2 = T(1) / std::sqrt(T(2));
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
        for (size_t i = 0; i < g.size(); ++i) {
            const T x = av[i];
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            da[i] += g[i] * (cdf + x * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " vs " +
                             shape_str(bv.shape()));
    const size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out({m, n});
    gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
    return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, Var, const Tensor<T>& g) {
        const auto& av = t.val(a);
        const auto& bv = t.val(b);
        if (t.requires_grad(a)) gemm_nt(g.data(), bv.data(), t.grad_buffer(a).data(), m, n, k);
        if (t.requires_grad(b)) gemm_tn(av.data(), g.data(), t.grad_buffer(b).data(), m, k, n);
    });
}

// y = x.W + bias over the last axis; x may have any leading shape.
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var bias = Var{}) {
    const auto& xv = t.val(x);
    const auto& wv = t.val(w);
    if (wv.rank() != 2 || xv.rank() < 1 || xv.shape().back() != wv.dim(0))
        throw DimensionError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                             shape_str(wv.shape()));
    const size_t in = wv.dim(0), out_dim = wv.dim(1);
    const size_t rows = xv.size() / in;
    Shape oshape = xv.shape();
    oshape.back() = out_dim;
    Tensor<T> out(oshape);
    gemm_nn(xv.data(), wv.data(), out.data(), rows, in, out_dim);
    if (bias.valid()) {
        const auto& bv = t.val(bias);
        if (bv.size() != out_dim)
            throw DimensionError("linear: bias " + shape_str(bv.shape()) + " does not match width " +
                                 std::to_string(out_dim));
        for (size_t r = 0; r < rows; ++r) {
            T* orow = out.data() + r * out_dim;
            for (size_t j = 0; j < out_dim; ++j) orow[j] += bv[j];
        }
    }
    return t.record(std::move(out), bias.valid() ? std::initializer_list<Var>{x, w, bias}
                                                 : std::initializer_list<Var>{x, w},
                    [x, w, bias, rows, in, out_dim](Tape<T>& t, Var, const Tensor<T>& g) {
                        const auto& xv = t.val(x);
                        const auto& wv = t.val(w);
                        if (t.requires_grad(x))
                            gemm_nt(g.data(), wv.data(), t.grad_buffer(x).data(), rows, out_dim, in);
                        if (t.requires_grad(w))
                            gemm_tn(xv.data(), g.data(), t.grad_buffer(w).data(), rows, in, out_dim);
                        if (bias.valid() && t.requires_grad(bias)) {
                            auto& db = t.grad_buffer(bias);
                            for (size_t r = 0; r < rows; ++r) {
                                const T* grow = g.data() + r * out_dim;
                                for (size_t j = 0; j < out_dim; ++j) db[j] += grow[j];
                            }
                        }
                    });
}

// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
template <typename T>
Var bmm(Tape<T>& t, Var a, Var b) {
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
        throw DimensionError("bmm: incompatible shapes " + shape_str(av.shape()) + " vs " +
                             shape_str(bv.shape()));
    const size_t nb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    Tensor<T> out({nb, m, n});
    for (size_t i = 0; i < nb; ++i)
        gemm_nn(av.data() + i * m * k, bv.data() + i * k * n, out.data() + i * m * n, m, k, n);
    return t.record(std::move(out), {a, b},
                    [a, b, nb, m, k, n](Tape<T>& t, Var, const Tensor<T>& g) {
                        const auto& av = t.val(a);
                        const auto& bv = t.val(b);
                        if (t.requires_grad(a)) {
                            auto& da = t.grad_buffer(a);
                            for (size_t i = 0; i < nb; ++i)
                                gemm_nt(g.data() + i * m * n, bv.data() + i * k * n,
                                        da.data() + i * m * k, m, n, k);
                        }
                        if (t.requires_grad(b)) {
                            auto& db = t.grad_buffer(b);
                            for (size_t i = 0; i < nb; ++i)
                                gemm_tn(av.data() + i * m * k, g.data() + i * m * n,
                                        db.data() + i * k * n, m, k, n);
                        }
                    });
}

// Batched matmul with transposed right operand: [B,m,k] x [B,n,k] -> [B,m,n].
template <typename T>
Var bmm_nt(Tape<T>& t, Var a, Var b) {
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2))
        throw DimensionError("bmm_nt: incompatible shapes " + shape_str(av.shape()) + " vs " +
                             shape_str(bv.shape()));
    const size_t nb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(1);
    Tensor<T> out({nb, m, n});
    for (size_t i = 0; i < nb; ++i)
        gemm_nt(av.data() + i * m * k, bv.data() + i * n * k, out.data() + i * m * n, m, k, n);
    return t.record(std::move(out), {a, b},
                    [a, b, nb, m, k, n](Tape<T>& t, Var, const Tensor<T>& g) {
                        const auto& av = t.val(a);
                        const auto& bv = t.val(b);
                        if (t.requires_grad(a)) {
                            auto& da = t.grad_buffer(a);
                            for (size_t i = 0; i < nb; ++i)
                                gemm_nn(g.data() + i * m * n, bv.data() + i * n * k,
                                        da.data() + i * m * k, m, n, k);
                        }
                        if (t.requires_grad(b)) {
                            auto& db = t.grad_buffer(b);
                            for (size_t i = 0; i < nb; ++i)
                                gemm_tn(g.data() + i * m * n, av.data() + i * m * k,
                                        db.data() + i * n * k, m, n, k);
                        }
                    });
}

// ---------------------------------------------------------------------------
// Normalizations and softmax
// ---------------------------------------------------------------------------

template <typename T>
Var softmax(Tape<T>& t, Var x, size_t axis) {
    const auto& xv = t.val(x);
    size_t outer, n, inner;
    detail::axis_split(xv.shape(), axis, outer, n, inner);
    Tensor<T> out(xv.shape());
    for (size_t o = 0; o < outer; ++o) {
        for (size_t i = 0; i < inner; ++i) {
            const size_t base = o * n * inner + i;
            T mx = xv[base];
            for (size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            T sum = T(0);
            for (size_t j = 0; j < n; ++j) {
                const T e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
        }
    }
    return t.record(std::move(out), {x},
                    [x, outer, n, inner](Tape<T>& t, Var self, const Tensor<T>& g) {
                        if (!t.requires_grad(x)) return;
                        const auto& y = t.val(self);
                        auto& dx = t.grad_buffer(x);
                        for (size_t o = 0; o < outer; ++o) {
                            for (size_t i = 0; i < inner; ++i) {
                                const size_t base = o * n * inner + i;
                                T dot = T(0);
                                for (size_t j = 0; j < n; ++j)
                                    dot += g[base + j * inner] * y[base + j * inner];
                                for (size_t j = 0; j < n; ++j) {
                                    const size_t k = base + j * inner;
                                    dx[k] += y[k] * (g[k] - dot);
                                }
                            }
                        }
                    });
}

// Normalizes the last axis to zero mean / unit variance (population), then
// scales by gamma and shifts by beta.
template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, T eps) {
    const auto& xv = t.val(x);
    const auto& gv = t.val(gamma);
    const auto& bv = t.val(beta);
    const size_t f = xv.shape().back();
    if (gv.size() != f || bv.size() != f)
        throw DimensionError("layer_norm: gamma/beta " + shape_str(gv.shape()) +
                             " do not match last axis of " + shape_str(xv.shape()));
    const size_t rows = xv.size() / f;
    Tensor<T> xhat(xv.shape());
    std::vector<T> inv(rows);
    Tensor<T> out(xv.shape());
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * f;
        T mean = T(0);
        for (size_t j = 0; j < f; ++j) mean += xr[j];
        mean /= T(f);
        T var = T(0);
        for (size_t j = 0; j < f; ++j) {
            const T d = xr[j] - mean;
            var += d * d;
        }
        var /= T(f);
        const T iv = T(1) / std::sqrt(var + eps);
        inv[r] = iv;
        T* hr = xhat.data() + r * f;
        T* orow = out.data() + r * f;
        for (size_t j = 0; j < f; ++j) {
            hr[j] = (xr[j] - mean) * iv;
            orow[j] = gv[j] * hr[j] + bv[j];
        }
    }
    return t.record(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, rows, f, xhat = std::move(xhat),
         inv = std::move(inv)](Tape<T>& t, Var, const Tensor<T>& g) {
            const auto& gv = t.val(gamma);
            if (t.requires_grad(gamma)) {
                auto& dg = t.grad_buffer(gamma);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < f; ++j) dg[j] += g[r * f + j] * xhat[r * f + j];
            }
            if (t.requires_grad(beta)) {
                auto& db = t.grad_buffer(beta);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < f; ++j) db[j] += g[r * f + j];
            }
            if (t.requires_grad(x)) {
                auto& dx = t.grad_buffer(x);
                for (size_t r = 0; r < rows; ++r) {
                    const T* grow = g.data() + r * f;
                    const T* hr = xhat.data() + r * f;
                    T sum_dh = T(0), sum_dh_h = T(0);
                    for (size_t j = 0; j < f; ++j) {
                        const T dh = grow[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    const T scale = inv[r] / T(f);
                    for (size_t j = 0; j < f; ++j) {
                        const T dh = grow[j] * gv[j];
                        dx[r * f + j] += scale * (T(f) * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            }
        });
}

template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
};

// Normalizes per channel (axis 1) over all remaining axes. Rank-2 input
// [batch x features] is the classic dense case. In train mode the batch
// statistics drive the output and, when update_running is set, the running
// statistics move by `momentum` toward them; in infer mode only the running
// statistics are used.
template <typename T>
Var batch_norm(Tape<T>& t, Var x, Var gamma, Var beta, Tensor<T>& running_mean,
               Tensor<T>& running_var, bool training, T eps, T momentum,
               bool update_running = true) {
    const auto& xv = t.val(x);
    if (xv.rank() < 2)
        throw DimensionError("batch_norm: input must have rank >= 2, got " + shape_str(xv.shape()));
    const size_t c = xv.dim(1);
    size_t inner = 1;
    for (size_t i = 2; i < xv.rank(); ++i) inner *= xv.dim(i);
    const size_t batch = xv.dim(0);
    const size_t n_per_c = batch * inner;
    const auto& gv = t.val(gamma);
    const auto& bv = t.val(beta);
    if (gv.size() != c || bv.size() != c || running_mean.size() != c || running_var.size() != c)
        throw DimensionError("batch_norm: affine/state width does not match channels " +
                             std::to_string(c));

    std::vector<T> mean(c, T(0)), var(c, T(0));
    if (training) {
        for (size_t b = 0; b < batch; ++b)
            for (size_t ch = 0; ch < c; ++ch) {
                const T* xr = xv.data() + (b * c + ch) * inner;
                T s = T(0);
                for (size_t i = 0; i < inner; ++i) s += xr[i];
                mean[ch] += s;
            }
        for (size_t ch = 0; ch < c; ++ch) mean[ch] /= T(n_per_c);
        for (size_t b = 0; b < batch; ++b)
            for (size_t ch = 0; ch < c; ++ch) {
                const T* xr = xv.data() + (b * c + ch) * inner;
                T s = T(0);
                for (size_t i = 0; i < inner; ++i) {
                    const T d = xr[i] - mean[ch];
                    s += d * d;
                }
                var[ch] += s;
            }
        for (size_t ch = 0; ch < c; ++ch) var[ch] /= T(n_per_c);
        if (update_running) {
            for (size_t ch = 0; ch < c; ++ch) {
                running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mean[ch];
                running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * var[ch];
            }
        }
    } else {
        for (size_t ch = 0; ch < c; ++ch) {
            mean[ch] = running_mean[ch];
            var[ch] = running_var[ch];
        }
    }

    std::vector<T> inv(c);
    for (size_t ch = 0; ch < c; ++ch) inv[ch] = T(1) / std::sqrt(var[ch] + eps);

    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    for (size_t b = 0; b < batch; ++b)
        for (size_t ch = 0; ch < c; ++ch) {
            const T* xr = xv.data() + (b * c + ch) * inner;
            T* hr = xhat.data() + (b * c + ch) * inner;
            T* orow = out.data() + (b * c + ch) * inner;
            const T mu = mean[ch], iv = inv[ch], ga = gv[ch], be = bv[ch];
            for (size_t i = 0; i < inner; ++i) {
                hr[i] = (xr[i] - mu) * iv;
                orow[i] = ga * hr[i] + be;
            }
        }

    return t.record(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, batch, c, inner, n_per_c, training, xhat = std::move(xhat),
         inv = std::move(inv)](Tape<T>& t, Var, const Tensor<T>& g) {
            const auto& gv = t.val(gamma);
            std::vector<T> sum_g(c, T(0)), sum_gh(c, T(0));
            for (size_t b = 0; b < batch; ++b)
                for (size_t ch = 0; ch < c; ++ch) {
                    const T* grow = g.data() + (b * c + ch) * inner;
                    const T* hr = xhat.data() + (b * c + ch) * inner;
                    T sg = T(0), sgh = T(0);
                    for (size_t i = 0; i < inner; ++i) {
                        sg += grow[i];
                        sgh += grow[i] * hr[i];
                    }
                    sum_g[ch] += sg;
                    sum_gh[ch] += sgh;
                }
            if (t.requires_grad(gamma)) {
                auto& dg = t.grad_buffer(gamma);
                for (size_t ch = 0; ch < c; ++ch) dg[ch] += sum_gh[ch];
            }
            if (t.requires_grad(beta)) {
                auto& db = t.grad_buffer(beta);
                for (size_t ch = 0; ch < c; ++ch) db[ch] += sum_g[ch];
            }
            if (t.requires_grad(x)) {
                auto& dx = t.grad_buffer(x);
                for (size_t b = 0; b < batch; ++b)
                    for (size_t ch = 0; ch < c; ++ch) {
                        const T* grow = g.data() + (b * c + ch) * inner;
                        const T* hr = xhat.data() + (b * c + ch) * inner;
                        T* dxr = dx.data() + (b * c + ch) * inner;
                        const T k = gv[ch] * inv[ch];
                        if (training) {
                            const T mg = sum_g[ch] / T(n_per_c);
                            const T mgh = sum_gh[ch] / T(n_per_c);
                            for (size_t i = 0; i < inner; ++i)
                                dxr[i] += k * (grow[i] - mg - hr[i] * mgh);
                        } else {
                            for (size_t i = 0; i < inner; ++i) dxr[i] += k * grow[i];
                        }
                    }
            }
        });
}

template <typename T>
Var batch_norm(Tape<T>& t, Var x, Var gamma, Var beta, BatchNormState<T>& state, bool training,
               T eps, T momentum, bool update_running = true) {
    return batch_norm(t, x, gamma, beta, state.running_mean, state.running_var, training, eps,
                      momentum, update_running);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

template <typename T>
Var conv3d(Tape<T>& t, Var x, Var w, Var bias, const Pad3& pad) {
    const auto& xv = t.val(x);
    const auto& wv = t.val(w);
    const Conv3dDims dm = conv3d_dims(xv.shape(), wv.shape(), pad);
    const T* bptr = nullptr;
    if (bias.valid()) {
        const auto& bv = t.val(bias);
        if (bv.size() != dm.cout)
            throw DimensionError("conv3d: bias " + shape_str(bv.shape()) +
                                 " does not match output channels " + std::to_string(dm.cout));
        bptr = bv.data();
    }
    Tensor<T> out({dm.batch, dm.cout, dm.od, dm.oh, dm.ow});
    conv3d_forward(xv.data(), wv.data(), bptr, out.data(), dm, pad);
    return t.record(std::move(out), bias.valid() ? std::initializer_list<Var>{x, w, bias}
                                                 : std::initializer_list<Var>{x, w},
                    [x, w, bias, dm, pad](Tape<T>& t, Var, const Tensor<T>& g) {
                        const auto& xv = t.val(x);
                        const auto& wv = t.val(w);
                        if (t.requires_grad(x))
                            conv3d_backward_input(g.data(), wv.data(), t.grad_buffer(x).data(), dm,
                                                  pad);
                        const bool need_w = t.requires_grad(w);
                        const bool need_b = bias.valid() && t.requires_grad(bias);
                        if (need_w || need_b) {
                            // params kernel fills both; direct it at scratch when one is unused
                            Tensor<T> scratch_w;
                            if (!need_w) scratch_w = Tensor<T>::zeros(wv.shape());
                            T* dwp = need_w ? t.grad_buffer(w).data() : scratch_w.data();
                            T* dbp = need_b ? t.grad_buffer(bias).data() : nullptr;
                            conv3d_backward_params(xv.data(), g.data(), dwp, dbp, dm, pad);
                        }
                    });
}

struct Pad2 {
    size_t h = 0, w = 0;
};

template <typename T>
Var reshape(Tape<T>& t, Var x, Shape s);

// 2-D convolution as depth-1 conv3d.
template <typename T>
Var conv2d(Tape<T>& t, Var x, Var w, Var bias, const Pad2& pad) {
    const Shape xs = t.val(x).shape();
    const Shape ws = t.val(w).shape();
    if (xs.size() != 4 || ws.size() != 4)
        throw DimensionError("conv2d: expected rank-4 input/kernels, got " + shape_str(xs) +
                             " and " + shape_str(ws));
    Var x5 = reshape(t, x, {xs[0], xs[1], 1, xs[2], xs[3]});
    Var w5 = reshape(t, w, {ws[0], ws[1], 1, ws[2], ws[3]});
    Var y5 = conv3d(t, x5, w5, bias, Pad3{0, pad.h, pad.w});
    const Shape ys = t.val(y5).shape();
    return reshape(t, y5, {ys[0], ys[1], ys[3], ys[4]});
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions
// ---------------------------------------------------------------------------

template <typename T>
Var reshape(Tape<T>& t, Var x, Shape s) {
    Tensor<T> out = t.val(x).reshaped(std::move(s));
    return t.record(std::move(out), {x}, [x](Tape<T>& t, Var, const Tensor<T>& g) {
        if (!t.requires_grad(x)) return;
        auto& dx = t.grad_buffer(x);
        for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
}

// Slice [start, start+len) of the last axis.
template <typename T>
Var slice_last(Tape<T>& t, Var x, size_t start, size_t len) {
    const auto& xv = t.val(x);
    const size_t f = xv.shape().back();
    if (start + len > f)
        throw DimensionError("slice_last: [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") exceeds last axis of " +
                             shape_str(xv.shape()));
    const size_t rows = xv.size() / f;
    Shape oshape = xv.shape();
    oshape.back() = len;
    Tensor<T> out(oshape);
    for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < len; ++j) out[r * len + j] = xv[r * f + start + j];
    return t.record(std::move(out), {x},
                    [x, start, len, rows, f](Tape<T>& t, Var, const Tensor<T>& g) {
                        if (!t.requires_grad(x)) return;
                        auto& dx = t.grad_buffer(x);
                        for (size_t r = 0; r < rows; ++r)
                            for (size_t j = 0; j < len; ++j)
                                dx[r * f + start + j] += g[r * len + j];
                    });
}

// Concatenate along the last axis; all inputs share the leading shape.
template <typename T>
Var concat_last(Tape<T>& t, const std::vector<Var>& xs) {
    if (xs.empty()) throw ContractError("concat_last: empty input list");
    const auto& first = t.val(xs[0]);
    Shape lead(first.shape().begin(), first.shape().end() - 1);
    size_t total = 0;
    for (Var v : xs) {
        const auto& s = t.val(v).shape();
        Shape l(s.begin(), s.end() - 1);
        if (l != lead)
            throw DimensionError("concat_last: leading shape mismatch " + shape_str(s) + " vs " +
                                 shape_str(first.shape()));
        total += s.back();
    }
    const size_t rows = numel(lead);
    Shape oshape = lead;
    oshape.push_back(total);
    Tensor<T> out(oshape);
    size_t off = 0;
    for (Var v : xs) {
        const auto& xv = t.val(v);
        const size_t f = xv.shape().back();
        for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < f; ++j) out[r * total + off + j] = xv[r * f + j];
        off += f;
    }
    return t.record(std::move(out), xs, [xs, rows, total](Tape<T>& t, Var, const Tensor<T>& g) {
        size_t off = 0;
        for (Var v : xs) {
            const size_t f = t.val(v).shape().back();
            if (t.requires_grad(v)) {
                auto& dx = t.grad_buffer(v);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < f; ++j) dx[r * f + j] += g[r * total + off + j];
            }
            off += f;
        }
    });
}

// Stack N tensors of shape [B, F] into [B, N, F].
template <typename T>
Var stack_steps(Tape<T>& t, const std::vector<Var>& xs) {
    if (xs.empty()) throw ContractError("stack_steps: empty input list");
    const auto& first = t.val(xs[0]);
    if (first.rank() != 2) throw DimensionError("stack_steps: inputs must be rank 2");
    const size_t b = first.dim(0), f = first.dim(1), n = xs.size();
    for (Var v : xs) detail::require_same_shape(t.val(v), first, "stack_steps");
    Tensor<T> out({b, n, f});
    for (size_t k = 0; k < n; ++k) {
        const auto& xv = t.val(xs[k]);
        for (size_t r = 0; r < b; ++r)
            for (size_t j = 0; j < f; ++j) out[(r * n + k) * f + j] = xv[r * f + j];
    }
    return t.record(std::move(out), xs, [xs, b, f, n](Tape<T>& t, Var, const Tensor<T>& g) {
        for (size_t k = 0; k < n; ++k) {
            if (!t.requires_grad(xs[k])) continue;
            auto& dx = t.grad_buffer(xs[k]);
            for (size_t r = 0; r < b; ++r)
                for (size_t j = 0; j < f; ++j) dx[r * f + j] += g[(r * n + k) * f + j];
        }
    });
}

// One step of a [B, N, F] sequence as [B, F].
template <typename T>
Var slice_step(Tape<T>& t, Var x, size_t k) {
    const auto& xv = t.val(x);
    if (xv.rank() != 3 || k >= xv.dim(1))
        throw DimensionError("slice_step: step " + std::to_string(k) + " invalid for " +
                             shape_str(xv.shape()));
    const size_t b = xv.dim(0), n = xv.dim(1), f = xv.dim(2);
    Tensor<T> out({b, f});
    for (size_t r = 0; r < b; ++r)
        for (size_t j = 0; j < f; ++j) out[r * f + j] = xv[(r * n + k) * f + j];
    return t.record(std::move(out), {x}, [x, k, b, n, f](Tape<T>& t, Var, const Tensor<T>& g) {
        if (!t.requires_grad(x)) return;
        auto& dx = t.grad_buffer(x);
        for (size_t r = 0; r < b; ++r)
            for (size_t j = 0; j < f; ++j) dx[(r * n + k) * f + j] += g[r * f + j];
    });
}

// Mean over one axis, removing it.
template <typename T>
Var mean_axis(Tape<T>& t, Var x, size_t axis) {
    const auto& xv = t.val(x);
    size_t outer, n, inner;
    detail::axis_split(xv.shape(), axis, outer, n, inner);
    Shape oshape;
    for (size_t i = 0; i < xv.rank(); ++i)
        if (i != axis) oshape.push_back(xv.dim(i));
    if (oshape.empty()) oshape.push_back(1);
    Tensor<T> out(oshape);
    const T invn = T(1) / T(n);
    for (size_t o = 0; o < outer; ++o)
        for (size_t j = 0; j < n; ++j) {
            const T* xr = xv.data() + (o * n + j) * inner;
            T* orow = out.data() + o * inner;
            for (size_t i = 0; i < inner; ++i) orow[i] += xr[i] * invn;
        }
    return t.record(std::move(out), {x},
                    [x, outer, n, inner, invn](Tape<T>& t, Var, const Tensor<T>& g) {
                        if (!t.requires_grad(x)) return;
                        auto& dx = t.grad_buffer(x);
                        for (size_t o = 0; o < outer; ++o)
                            for (size_t j = 0; j < n; ++j) {
                                T* dxr = dx.data() + (o * n + j) * inner;
                                const T* grow = g.data() + o * inner;
                                for (size_t i = 0; i < inner; ++i) dxr[i] += grow[i] * invn;
                            }
                    });
}

// Swap the last two axes.
template <typename T>
Var swap_last2(Tape<T>& t, Var x) {
    const auto& xv = t.val(x);
    if (xv.rank() < 2) throw DimensionError("swap_last2: rank must be >= 2");
    const size_t m = xv.dim(xv.rank() - 2), n = xv.dim(xv.rank() - 1);
    const size_t blocks = xv.size() / (m * n);
    Shape oshape = xv.shape();
    std::swap(oshape[oshape.size() - 2], oshape[oshape.size() - 1]);
    Tensor<T> out(oshape);
    for (size_t b = 0; b < blocks; ++b) {
        const T* xb = xv.data() + b * m * n;
        T* ob = out.data() + b * m * n;
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ob[j * m + i] = xb[i * n + j];
    }
    return t.record(std::move(out), {x}, [x, m, n, blocks](Tape<T>& t, Var, const Tensor<T>& g) {
        if (!t.requires_grad(x)) return;
        auto& dx = t.grad_buffer(x);
        for (size_t b = 0; b < blocks; ++b) {
            const T* gb = g.data() + b * m * n;
            T* dxb = dx.data() + b * m * n;
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) dxb[i * n + j] += gb[j * m + i];
        }
    });
}

template <typename T>
Var sum_all(Tape<T>& t, Var x) {
    const auto& xv = t.val(x);
    T s = T(0);
    for (size_t i = 0; i < xv.size(); ++i) s += xv[i];
    return t.record(Tensor<T>::scalar(s), {x}, [x](Tape<T>& t, Var, const Tensor<T>& g) {
        if (!t.requires_grad(x)) return;
        auto& dx = t.grad_buffer(x);
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += g[0];
    });
}

template <typename T>
Var mean_all(Tape<T>& t, Var x) {
    const size_t n = t.val(x).size();
    return mul_scalar(t, sum_all(t, x), T(1) / T(n));
}

// Mean squared error between two same-shape tensors.
template <typename T>
Var mse(Tape<T>& t, Var pred, Var target) {
    detail::require_same_shape(t.val(pred), t.val(target), "mse");
    Var d = sub(t, pred, target);
    return mean_all(t, mul(t, d, d));
}

}  // namespace stn
