#pragma once

#include <array>
#include <cstddef>

#include "stn/errors.hpp"
#include "stn/tensor.hpp"

// Raw dense kernels shared by forward and backward passes. All accumulate
// into the output buffer with a fixed summation order, so results do not
// depend on batch composition.

namespace stn {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t p = 0; p < m; ++p) {
        const T* arow = a + p * k;
        const T* brow = b + p * n;
        for (size_t i = 0; i < k; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

struct Pad3 {
    size_t d = 0, h = 0, w = 0;
};

struct Conv3dDims {
    size_t batch, cin, d, h, w;        // input
    size_t cout, kd, kh, kw;           // kernels
    size_t od, oh, ow;                 // output
};

inline Conv3dDims conv3d_dims(const Shape& x, const Shape& w, const Pad3& pad) {
    if (x.size() != 5)
        throw DimensionError("conv3d input must be rank 5 [B,C,D,H,W], got " + shape_str(x));
    if (w.size() != 5)
        throw DimensionError("conv3d kernels must be rank 5 [Co,Ci,kd,kh,kw], got " + shape_str(w));
    if (x[1] != w[1])
        throw DimensionError("conv3d channel mismatch: input " + shape_str(x) + " vs kernels " +
                             shape_str(w));
    Conv3dDims dm;
    dm.batch = x[0];
    dm.cin = x[1];
    dm.d = x[2];
    dm.h = x[3];
    dm.w = x[4];
    dm.cout = w[0];
    dm.kd = w[2];
    dm.kh = w[3];
    dm.kw = w[4];
    if (dm.kd > dm.d + 2 * pad.d || dm.kh > dm.h + 2 * pad.h || dm.kw > dm.w + 2 * pad.w)
        throw DimensionError("conv3d kernel " + shape_str(w) + " larger than padded input " +
                             shape_str(x));
    dm.od = dm.d + 2 * pad.d - dm.kd + 1;
    dm.oh = dm.h + 2 * pad.h - dm.kh + 1;
    dm.ow = dm.w + 2 * pad.w - dm.kw + 1;
    return dm;
}

// Valid output-index range for one kernel offset: out + k - pad must land in
// [0, in). Returns {lo, hi} with hi exclusive; empty when lo >= hi.
inline std::array<size_t, 2> conv_range(size_t out_extent, size_t in_extent, size_t k, size_t pad) {
    size_t lo = pad > k ? pad - k : 0;
    long long hi_ll = static_cast<long long>(in_extent) - 1 + static_cast<long long>(pad) -
                      static_cast<long long>(k);
    if (hi_ll < 0) return {1, 0};
    size_t hi = std::min(out_extent - 1, static_cast<size_t>(hi_ll)) + 1;
    if (lo >= hi) return {1, 0};
    return {lo, hi};
}

// Cross-correlation (no kernel flip), stride 1, zero padding.
template <typename T>
void conv3d_forward(const T* x, const T* w, const T* bias, T* out, const Conv3dDims& dm,
                    const Pad3& pad) {
    const size_t in_dhw = dm.d * dm.h * dm.w;
    const size_t out_dhw = dm.od * dm.oh * dm.ow;
    for (size_t b = 0; b < dm.batch; ++b) {
        for (size_t co = 0; co < dm.cout; ++co) {
            T* oslice = out + (b * dm.cout + co) * out_dhw;
            const T bv = bias ? bias[co] : T(0);
            for (size_t i = 0; i < out_dhw; ++i) oslice[i] = bv;
            for (size_t ci = 0; ci < dm.cin; ++ci) {
                const T* xslice = x + (b * dm.cin + ci) * in_dhw;
                const T* wk = w + (co * dm.cin + ci) * dm.kd * dm.kh * dm.kw;
                for (size_t kd = 0; kd < dm.kd; ++kd) {
                    auto [dlo, dhi] = conv_range(dm.od, dm.d, kd, pad.d);
                    for (size_t kh = 0; kh < dm.kh; ++kh) {
                        auto [hlo, hhi] = conv_range(dm.oh, dm.h, kh, pad.h);
                        for (size_t kw = 0; kw < dm.kw; ++kw) {
                            auto [wlo, whi] = conv_range(dm.ow, dm.w, kw, pad.w);
                            if (dlo >= dhi || hlo >= hhi || wlo >= whi) continue;
                            const T wv = wk[(kd * dm.kh + kh) * dm.kw + kw];
                            for (size_t od = dlo; od < dhi; ++od) {
                                const size_t id = od + kd - pad.d;
                                for (size_t oh = hlo; oh < hhi; ++oh) {
                                    const size_t ih = oh + kh - pad.h;
                                    T* orow = oslice + (od * dm.oh + oh) * dm.ow;
                                    const T* xrow =
                                        xslice + (id * dm.h + ih) * dm.w + kw - pad.w;
                                    for (size_t ow = wlo; ow < whi; ++ow)
                                        orow[ow] += wv * xrow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_backward_input(const T* g, const T* w, T* dx, const Conv3dDims& dm, const Pad3& pad) {
    const size_t in_dhw = dm.d * dm.h * dm.w;
    const size_t out_dhw = dm.od * dm.oh * dm.ow;
    for (size_t b = 0; b < dm.batch; ++b) {
        for (size_t co = 0; co < dm.cout; ++co) {
            const T* gslice = g + (b * dm.cout + co) * out_dhw;
            for (size_t ci = 0; ci < dm.cin; ++ci) {
                T* dxslice = dx + (b * dm.cin + ci) * in_dhw;
                const T* wk = w + (co * dm.cin + ci) * dm.kd * dm.kh * dm.kw;
                for (size_t kd = 0; kd < dm.kd; ++kd) {
                    auto [dlo, dhi] = conv_range(dm.od, dm.d, kd, pad.d);
                    for (size_t kh = 0; kh < dm.kh; ++kh) {
                        auto [hlo, hhi] = conv_range(dm.oh, dm.h, kh, pad.h);
                        for (size_t kw = 0; kw < dm.kw; ++kw) {
                            auto [wlo, whi] = conv_range(dm.ow, dm.w, kw, pad.w);
                            if (dlo >= dhi || hlo >= hhi || wlo >= whi) continue;
                            const T wv = wk[(kd * dm.kh + kh) * dm.kw + kw];
                            for (size_t od = dlo; od < dhi; ++od) {
                                const size_t id = od + kd - pad.d;
                                for (size_t oh = hlo; oh < hhi; ++oh) {
                                    const size_t ih = oh + kh - pad.h;
                                    const T* grow = gslice + (od * dm.oh + oh) * dm.ow;
                                    T* dxrow =
                                        dxslice + (id * dm.h + ih) * dm.w + kw - pad.w;
                                    for (size_t ow = wlo; ow < whi; ++ow)
                                        dxrow[ow] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_backward_params(const T* x, const T* g, T* dw, T* db, const Conv3dDims& dm,
                            const Pad3& pad) {
    const size_t in_dhw = dm.d * dm.h * dm.w;
    const size_t out_dhw = dm.od * dm.oh * dm.ow;
    for (size_t co = 0; co < dm.cout; ++co) {
        if (db) {
            T acc = T(0);
            for (size_t b = 0; b < dm.batch; ++b) {
                const T* gslice = g + (b * dm.cout + co) * out_dhw;
                for (size_t i = 0; i < out_dhw; ++i) acc += gslice[i];
            }
            db[co] += acc;
        }
        for (size_t ci = 0; ci < dm.cin; ++ci) {
            T* dwk = dw + (co * dm.cin + ci) * dm.kd * dm.kh * dm.kw;
            for (size_t kd = 0; kd < dm.kd; ++kd) {
                auto [dlo, dhi] = conv_range(dm.od, dm.d, kd, pad.d);
                for (size_t kh = 0; kh < dm.kh; ++kh) {
                    auto [hlo, hhi] = conv_range(dm.oh, dm.h, kh, pad.h);
                    for (size_t kw = 0; kw < dm.kw; ++kw) {
                        auto [wlo, whi] = conv_range(dm.ow, dm.w, kw, pad.w);
                        if (dlo >= dhi || hlo >= hhi || wlo >= whi) continue;
                        T acc = T(0);
                        for (size_t b = 0; b < dm.batch; ++b) {
                            const T* gslice = g + (b * dm.cout + co) * out_dhw;
                            const T* xslice = x + (b * dm.cin + ci) * in_dhw;
                            for (size_t od = dlo; od < dhi; ++od) {
                                const size_t id = od + kd - pad.d;
                                for (size_t oh = hlo; oh < hhi; ++oh) {
                                    const size_t ih = oh + kh - pad.h;
                                    const T* grow = gslice + (od * dm.oh + oh) * dm.ow;
                                    const T* xrow =
                                        xslice + (id * dm.h + ih) * dm.w + kw - pad.w;
                                    for (size_t ow = wlo; ow < whi; ++ow)
                                        acc += grow[ow] * xrow[ow];
                                }
                            }
                        }
                        dwk[(kd * dm.kh + kh) * dm.kw + kw] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace stn
