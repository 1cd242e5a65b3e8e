#pragma once

// Tape primitives. Every differentiable operation used by the network and the
// losses lives here; primitive_names() enumerates them for coverage tests.
//
// Elementwise binaries broadcast same-rank shapes where each dim matches or is
// 1. Convolutions use CHW layout.

#include "ta/detail/kernels.hpp"
#include "ta/tape.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace ta::ad {

inline const std::vector<std::string>& primitive_names() {
    static const std::vector<std::string> names = {
        "add", "sub", "mul", "div", "add_scalar", "mul_scalar", "neg", "abs",
        "sqrt", "exp", "log", "clamp", "relu", "gelu", "sigmoid", "sum",
        "mean", "matmul", "conv2d", "conv2d_transpose", "avg_pool2",
        "bilinear_up2", "layer_norm", "softmax", "scaled_dot_attention",
        "concat", "slice", "reshape", "transpose2", "stop_gradient"};
    return names;
}

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    check(a.size() == b.size(), "broadcast: rank mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
    Shape out(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1)
            out[i] = a[i];
        else if (a[i] == 1)
            out[i] = b[i];
        else
            throw ValidationError("broadcast: incompatible shapes " + shape_str(a) +
                                  " vs " + shape_str(b));
    }
    return out;
}

// Strides of `s` against broadcast target `out`; 0 where s is broadcast.
inline std::vector<std::int64_t> bcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (int i = (int)s.size() - 1; i >= 0; --i) {
        st[i] = (s[i] == 1 && out[i] > 1) ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

template <typename Fn>
void for_each_bcast(const Shape& out, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, Fn&& fn) {
    const std::int64_t n = numel(out);
    const int rank = (int)out.size();
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t rem = i, ia = 0, ib = 0;
        for (int d = rank - 1; d >= 0; --d) {
            const std::int64_t c = rem % out[d];
            rem /= out[d];
            ia += c * sa[d];
            ib += c * sb[d];
        }
        fn(i, ia, ib);
    }
}

// fwd(a,b) -> out; dfa/dfb map (a,b,gout) -> grad contribution.
template <typename T, typename Fwd, typename Dfa, typename Dfb>
VarT<T> binary_op(VarT<T> a, VarT<T> b, Fwd fwd, Dfa dfa, Dfb dfb) {
    check(a.tape == b.tape, "binary op: operands on different tapes");
    TapeT<T>& t = *a.tape;
    const TensorT<T>& av = t.value(a.id);
    const TensorT<T>& bv = t.value(b.id);
    const Shape out_shape = broadcast_shape(av.shape, bv.shape);
    const auto sa = bcast_strides(av.shape, out_shape);
    const auto sb = bcast_strides(bv.shape, out_shape);
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    for_each_bcast(out_shape, sa, sb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
        (*out.data)[i] = fwd((*av.data)[ia], (*bv.data)[ib]);
    });
    const int pa = a.id, pb = b.id;
    int id = t.record(std::move(out), {pa, pb}, [=](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        const TensorT<T>& A = tp.value(pa);
        const TensorT<T>& B = tp.value(pb);
        T* ga = tp.needs_grad(pa) ? tp.grad_buf(pa).data() : nullptr;
        T* gb = tp.needs_grad(pb) ? tp.grad_buf(pb).data() : nullptr;
        const Shape os = tp.value(self).shape;
        const auto ssa = bcast_strides(A.shape, os);
        const auto ssb = bcast_strides(B.shape, os);
        for_each_bcast(os, ssa, ssb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
            const T x = (*A.data)[ia], y = (*B.data)[ib], go = g[i];
            if (ga) ga[ia] += dfa(x, y, go);
            if (gb) gb[ib] += dfb(x, y, go);
        });
    });
    return {&t, id};
}

// fwd maps x -> y; dfd maps (x, y, gout) -> gx.
template <typename T, typename Fwd, typename Dfd>
VarT<T> unary_op(VarT<T> a, Fwd fwd, Dfd dfd) {
    TapeT<T>& t = *a.tape;
    const TensorT<T>& av = t.value(a.id);
    TensorT<T> out = TensorT<T>::zeros(av.shape);
    for (std::int64_t i = 0; i < av.size(); ++i) (*out.data)[i] = fwd((*av.data)[i]);
    const int pa = a.id;
    int id = t.record(std::move(out), {pa}, [=](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        const TensorT<T>& A = tp.value(pa);
        const TensorT<T>& Y = tp.value(self);
        auto& ga = tp.grad_buf(pa);
        for (std::int64_t i = 0; i < A.size(); ++i)
            ga[i] += dfd((*A.data)[i], (*Y.data)[i], g[i]);
    });
    return {&t, id};
}

}  // namespace detail

template <typename T>
VarT<T> add(VarT<T> a, VarT<T> b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; },
        [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
VarT<T> sub(VarT<T> a, VarT<T> b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; },
        [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; },
        [](T, T y, T g) { return g * y; }, [](T x, T, T g) { return g * x; });
}

template <typename T>
VarT<T> div(VarT<T> a, VarT<T> b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x / y; },
        [](T, T y, T g) { return g / y; },
        [](T x, T y, T g) { return -g * x / (y * y); });
}

template <typename T>
VarT<T> add_scalar(VarT<T> a, T c) {
    return detail::unary_op(
        a, [c](T x) { return x + c; }, [](T, T, T g) { return g; });
}

template <typename T>
VarT<T> mul_scalar(VarT<T> a, T c) {
    return detail::unary_op(
        a, [c](T x) { return x * c; }, [c](T, T, T g) { return g * c; });
}

template <typename T>
VarT<T> neg(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return -x; }, [](T, T, T g) { return -g; });
}

template <typename T>
VarT<T> abs(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x, T, T g) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

template <typename T>
VarT<T> sqrt(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return std::sqrt(x); },
        [](T, T y, T g) { return g / (T(2) * y); });
}

template <typename T>
VarT<T> exp(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
VarT<T> log(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <typename T>
VarT<T> clamp(VarT<T> a, T lo, T hi) {
    return detail::unary_op(
        a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](T x, T, T g) { return (x >= lo && x <= hi) ? g : T(0); });
}

template <typename T>
VarT<T> relu(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

// Exact erf form: 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
VarT<T> gelu(VarT<T> a) {
    const T inv_sqrt2 = T(0.7071067811865475);
    const T inv_sqrt2pi = T(0.3989422804014327);
    return detail::unary_op(
        a,
        [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [=](T x, T, T g) {
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            return g * (cdf + x * pdf);
        });
}

template <typename T>
VarT<T> sigmoid(VarT<T> a) {
    return detail::unary_op(
        a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
VarT<T> sum(VarT<T> a) {
    TapeT<T>& t = *a.tape;
    const TensorT<T>& av = t.value(a.id);
    T acc = T(0);
    for (std::int64_t i = 0; i < av.size(); ++i) acc += (*av.data)[i];
    const int pa = a.id;
    int id = t.record(TensorT<T>::scalar(acc), {pa}, [pa](TapeT<T>& tp, int self) {
        const T g = tp.grad_buf(self)[0];
        auto& ga = tp.grad_buf(pa);
        for (auto& v : ga) v += g;
    });
    return {&t, id};
}

template <typename T>
VarT<T> mean(VarT<T> a) {
    TapeT<T>& t = *a.tape;
    const TensorT<T>& av = t.value(a.id);
    const std::int64_t n = av.size();
    check(n > 0, "mean: empty tensor");
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += (*av.data)[i];
    const int pa = a.id;
    int id = t.record(TensorT<T>::scalar(acc / T(n)), {pa}, [pa, n](TapeT<T>& tp, int self) {
        const T g = tp.grad_buf(self)[0] / T(n);
        auto& ga = tp.grad_buf(pa);
        for (auto& v : ga) v += g;
    });
    return {&t, id};
}

// a [M,K] x b [K,N] -> [M,N].
template <typename T>
VarT<T> matmul(VarT<T> a, VarT<T> b) {
    check(a.tape == b.tape, "matmul: operands on different tapes");
    TapeT<T>& t = *a.tape;
    const TensorT<T>& av = t.value(a.id);
    const TensorT<T>& bv = t.value(b.id);
    check(av.shape.size() == 2 && bv.shape.size() == 2 && av.shape[1] == bv.shape[0],
          "matmul: bad shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const int M = av.shape[0], K = av.shape[1], N = bv.shape[1];
    TensorT<T> out = TensorT<T>::zeros({M, N});
    detail::gemm_nn(av.ptr(), bv.ptr(), out.ptr(), M, K, N);
    const int pa = a.id, pb = b.id;
    int id = t.record(std::move(out), {pa, pb}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        const TensorT<T>& A = tp.value(pa);
        const TensorT<T>& B = tp.value(pb);
        if (tp.needs_grad(pa))
            detail::gemm_nt(g, B.ptr(), tp.grad_buf(pa).data(), M, N, K, true);
        if (tp.needs_grad(pb))
            detail::gemm_tn(A.ptr(), g, tp.grad_buf(pb).data(), K, M, N, true);
    });
    return {&t, id};
}

// x [Ci,H,W], w [Co,Ci,kh,kw], bias [Co] (optional: pass invalid VarT).
// im2col columns are recomputed in the backward pass instead of being saved.
template <typename T>
VarT<T> conv2d(VarT<T> x, VarT<T> w, VarT<T> bias, int stride = 1, int pad = 0) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    const TensorT<T>& wv = t.value(w.id);
    check(xv.shape.size() == 3 && wv.shape.size() == 4 && xv.shape[0] == wv.shape[1],
          "conv2d: bad shapes x" + shape_str(xv.shape) + " w" + shape_str(wv.shape));
    const int Ci = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const int Co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
    const int DH = (H + 2 * pad - kh) / stride + 1;
    const int DW = (W + 2 * pad - kw) / stride + 1;
    check(DH > 0 && DW > 0, "conv2d: kernel larger than padded input");
    const std::int64_t CKK = (std::int64_t)Ci * kh * kw, L = (std::int64_t)DH * DW;
    std::vector<T> cols(CKK * L);
    detail::im2col(xv.ptr(), Ci, H, W, kh, kw, stride, pad, DH, DW, cols.data());
    TensorT<T> out = TensorT<T>::zeros({Co, DH, DW});
    detail::gemm_nn(wv.ptr(), cols.data(), out.ptr(), Co, (int)CKK, (int)L);
    const bool has_bias = bias.valid();
    if (has_bias) {
        const TensorT<T>& bv = t.value(bias.id);
        check(bv.shape == Shape{Co}, "conv2d: bias shape " + shape_str(bv.shape));
        for (int c = 0; c < Co; ++c) {
            T* o = out.ptr() + (std::int64_t)c * L;
            const T b = (*bv.data)[c];
            for (std::int64_t i = 0; i < L; ++i) o[i] += b;
        }
    }
    std::vector<int> parents = {x.id, w.id};
    if (has_bias) parents.push_back(bias.id);
    const int px = x.id, pw = w.id, pb = has_bias ? bias.id : -1;
    int id = t.record_v(std::move(out), parents, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        const TensorT<T>& X = tp.value(px);
        const TensorT<T>& Wt = tp.value(pw);
        if (tp.needs_grad(pw)) {
            std::vector<T> c2(CKK * L);
            detail::im2col(X.ptr(), Ci, H, W, kh, kw, stride, pad, DH, DW, c2.data());
            detail::gemm_nt(g, c2.data(), tp.grad_buf(pw).data(), Co, (int)L, (int)CKK, true);
        }
        if (tp.needs_grad(px)) {
            std::vector<T> dcols(CKK * L);
            detail::gemm_tn(Wt.ptr(), g, dcols.data(), (int)CKK, Co, (int)L);
            detail::col2im(dcols.data(), Ci, H, W, kh, kw, stride, pad, DH, DW,
                           tp.grad_buf(px).data(), true);
        }
        if (pb >= 0 && tp.needs_grad(pb)) {
            auto& gb = tp.grad_buf(pb);
            for (int c = 0; c < Co; ++c) {
                T acc = T(0);
                const T* gc = g + (std::int64_t)c * L;
                for (std::int64_t i = 0; i < L; ++i) acc += gc[i];
                gb[c] += acc;
            }
        }
    });
    return {&t, id};
}

// x [Ci,H,W], w [Ci,Co,kh,kw], bias [Co] (optional).
// Output [(H-1)*stride - 2*pad + kh] per spatial dim; adjoint of conv2d with
// the same stride/pad, so dX reuses im2col on the output-sized gradient.
template <typename T>
VarT<T> conv2d_transpose(VarT<T> x, VarT<T> w, VarT<T> bias, int stride = 1, int pad = 0) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    const TensorT<T>& wv = t.value(w.id);
    check(xv.shape.size() == 3 && wv.shape.size() == 4 && xv.shape[0] == wv.shape[0],
          "conv2d_transpose: bad shapes x" + shape_str(xv.shape) + " w" + shape_str(wv.shape));
    const int Ci = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const int Co = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3];
    const int OH = (H - 1) * stride - 2 * pad + kh;
    const int OW = (W - 1) * stride - 2 * pad + kw;
    check(OH > 0 && OW > 0, "conv2d_transpose: empty output");
    const std::int64_t CKK = (std::int64_t)Co * kh * kw, L = (std::int64_t)H * W;
    std::vector<T> cols(CKK * L);
    // w viewed as [Ci, Co*kh*kw]; cols = w^T * x_mat.
    detail::gemm_tn(wv.ptr(), xv.ptr(), cols.data(), (int)CKK, Ci, (int)L);
    TensorT<T> out = TensorT<T>::zeros({Co, OH, OW});
    detail::col2im(cols.data(), Co, OH, OW, kh, kw, stride, pad, H, W, out.ptr());
    const bool has_bias = bias.valid();
    if (has_bias) {
        const TensorT<T>& bv = t.value(bias.id);
        check(bv.shape == Shape{Co}, "conv2d_transpose: bias shape " + shape_str(bv.shape));
        const std::int64_t HW = (std::int64_t)OH * OW;
        for (int c = 0; c < Co; ++c) {
            T* o = out.ptr() + c * HW;
            const T b = (*bv.data)[c];
            for (std::int64_t i = 0; i < HW; ++i) o[i] += b;
        }
    }
    std::vector<int> parents = {x.id, w.id};
    if (has_bias) parents.push_back(bias.id);
    const int px = x.id, pw = w.id, pb = has_bias ? bias.id : -1;
    int id = t.record_v(std::move(out), parents, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        const TensorT<T>& X = tp.value(px);
        const TensorT<T>& Wt = tp.value(pw);
        std::vector<T> dcols(CKK * L);
        detail::im2col(g, Co, OH, OW, kh, kw, stride, pad, H, W, dcols.data());
        if (tp.needs_grad(px))
            detail::gemm_nn(Wt.ptr(), dcols.data(), tp.grad_buf(px).data(), Ci, (int)CKK,
                            (int)L, true);
        if (tp.needs_grad(pw))
            detail::gemm_nt(X.ptr(), dcols.data(), tp.grad_buf(pw).data(), Ci, (int)L,
                            (int)CKK, true);
        if (pb >= 0 && tp.needs_grad(pb)) {
            auto& gb = tp.grad_buf(pb);
            const std::int64_t HW = (std::int64_t)OH * OW;
            for (int c = 0; c < Co; ++c) {
                T acc = T(0);
                const T* gc = g + c * HW;
                for (std::int64_t i = 0; i < HW; ++i) acc += gc[i];
                gb[c] += acc;
            }
        }
    });
    return {&t, id};
}

// 2x2 average pooling; H and W must be even.
template <typename T>
VarT<T> avg_pool2(VarT<T> x) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    check(xv.shape.size() == 3 && xv.shape[1] % 2 == 0 && xv.shape[2] % 2 == 0,
          "avg_pool2: need [C,H,W] with even H,W, got " + shape_str(xv.shape));
    const int C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const int DH = H / 2, DW = W / 2;
    TensorT<T> out = TensorT<T>::zeros({C, DH, DW});
    for (int c = 0; c < C; ++c) {
        const T* s = xv.ptr() + (std::int64_t)c * H * W;
        T* o = out.ptr() + (std::int64_t)c * DH * DW;
        for (int y = 0; y < DH; ++y)
            for (int xx = 0; xx < DW; ++xx) {
                const T* p = s + (std::int64_t)(2 * y) * W + 2 * xx;
                o[(std::int64_t)y * DW + xx] =
                    (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
            }
    }
    const int px = x.id;
    int id = t.record(std::move(out), {px}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        auto& gx = tp.grad_buf(px);
        for (int c = 0; c < C; ++c) {
            T* s = gx.data() + (std::int64_t)c * H * W;
            const T* o = g + (std::int64_t)c * DH * DW;
            for (int y = 0; y < DH; ++y)
                for (int xx = 0; xx < DW; ++xx) {
                    const T gv = o[(std::int64_t)y * DW + xx] * T(0.25);
                    T* p = s + (std::int64_t)(2 * y) * W + 2 * xx;
                    p[0] += gv;
                    p[1] += gv;
                    p[W] += gv;
                    p[W + 1] += gv;
                }
        }
    });
    return {&t, id};
}

namespace detail {

// Half-pixel-center source coordinate and clamped bilinear taps for 2x
// upsampling of a length-H axis.
struct Up2Tap {
    int i0, i1;
    float w1;  // weight of i1; i0 gets 1-w1
};

inline Up2Tap up2_tap(int dst, int H) {
    const double s = (dst + 0.5) * 0.5 - 0.5;
    double fl = std::floor(s);
    int i0 = (int)fl;
    double f = s - fl;
    if (i0 < 0) {
        i0 = 0;
        f = 0.0;
    }
    int i1 = i0 + 1;
    if (i1 > H - 1) {
        i1 = H - 1;
        f = 0.0;
    }
    return {i0, i1, (float)f};
}

}  // namespace detail

// 2x bilinear upsampling with half-pixel centers, edges clamped.
template <typename T>
VarT<T> bilinear_up2(VarT<T> x) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    check(xv.shape.size() == 3, "bilinear_up2: need [C,H,W], got " + shape_str(xv.shape));
    const int C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const int OH = 2 * H, OW = 2 * W;
    std::vector<detail::Up2Tap> ty(OH), tx(OW);
    for (int y = 0; y < OH; ++y) ty[y] = detail::up2_tap(y, H);
    for (int xx = 0; xx < OW; ++xx) tx[xx] = detail::up2_tap(xx, W);
    TensorT<T> out = TensorT<T>::zeros({C, OH, OW});
    for (int c = 0; c < C; ++c) {
        const T* s = xv.ptr() + (std::int64_t)c * H * W;
        T* o = out.ptr() + (std::int64_t)c * OH * OW;
        for (int y = 0; y < OH; ++y) {
            const auto& a = ty[y];
            for (int xx = 0; xx < OW; ++xx) {
                const auto& b = tx[xx];
                const T v00 = s[(std::int64_t)a.i0 * W + b.i0];
                const T v01 = s[(std::int64_t)a.i0 * W + b.i1];
                const T v10 = s[(std::int64_t)a.i1 * W + b.i0];
                const T v11 = s[(std::int64_t)a.i1 * W + b.i1];
                const T fy = T(a.w1), fx = T(b.w1);
                o[(std::int64_t)y * OW + xx] =
                    (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) +
                    fy * ((T(1) - fx) * v10 + fx * v11);
            }
        }
    }
    const int px = x.id;
    int id = t.record(std::move(out), {px}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        auto& gx = tp.grad_buf(px);
        for (int c = 0; c < C; ++c) {
            T* s = gx.data() + (std::int64_t)c * H * W;
            const T* o = g + (std::int64_t)c * OH * OW;
            for (int y = 0; y < OH; ++y) {
                const auto& a = ty[y];
                for (int xx = 0; xx < OW; ++xx) {
                    const auto& b = tx[xx];
                    const T gv = o[(std::int64_t)y * OW + xx];
                    const T fy = T(a.w1), fx = T(b.w1);
                    s[(std::int64_t)a.i0 * W + b.i0] += (T(1) - fy) * (T(1) - fx) * gv;
                    s[(std::int64_t)a.i0 * W + b.i1] += (T(1) - fy) * fx * gv;
                    s[(std::int64_t)a.i1 * W + b.i0] += fy * (T(1) - fx) * gv;
                    s[(std::int64_t)a.i1 * W + b.i1] += fy * fx * gv;
                }
            }
        }
    });
    return {&t, id};
}

// Normalizes over the last axis; gamma/beta have shape [D].
template <typename T>
VarT<T> layer_norm(VarT<T> x, VarT<T> gamma, VarT<T> beta, T eps = T(1e-5)) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    check(!xv.shape.empty(), "layer_norm: empty shape");
    const int D = xv.shape.back();
    check(t.value(gamma.id).shape == Shape{D} && t.value(beta.id).shape == Shape{D},
          "layer_norm: gamma/beta must be [" + std::to_string(D) + "]");
    const std::int64_t R = numel(xv.shape) / D;
    TensorT<T> out = TensorT<T>::zeros(xv.shape);
    // xhat and 1/sigma saved for the backward pass.
    auto xhat = std::make_shared<std::vector<T>>(xv.size());
    auto inv_sigma = std::make_shared<std::vector<T>>(R);
    const T* xp = xv.ptr();
    const TensorT<T>& gv = t.value(gamma.id);
    const TensorT<T>& bv = t.value(beta.id);
    for (std::int64_t r = 0; r < R; ++r) {
        const T* row = xp + r * D;
        T mu = T(0);
        for (int i = 0; i < D; ++i) mu += row[i];
        mu /= T(D);
        T var = T(0);
        for (int i = 0; i < D; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= T(D);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_sigma)[r] = is;
        T* orow = out.ptr() + r * D;
        for (int i = 0; i < D; ++i) {
            const T xh = (row[i] - mu) * is;
            (*xhat)[r * D + i] = xh;
            orow[i] = xh * (*gv.data)[i] + (*bv.data)[i];
        }
    }
    const int px = x.id, pg = gamma.id, pbt = beta.id;
    int id = t.record(std::move(out), {px, pg, pbt}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        const TensorT<T>& G = tp.value(pg);
        T* gx = tp.needs_grad(px) ? tp.grad_buf(px).data() : nullptr;
        T* gg = tp.needs_grad(pg) ? tp.grad_buf(pg).data() : nullptr;
        T* gb = tp.needs_grad(pbt) ? tp.grad_buf(pbt).data() : nullptr;
        for (std::int64_t r = 0; r < R; ++r) {
            const T* grow = g + r * D;
            const T* xh = xhat->data() + r * D;
            if (gg || gb)
                for (int i = 0; i < D; ++i) {
                    if (gg) gg[i] += grow[i] * xh[i];
                    if (gb) gb[i] += grow[i];
                }
            if (gx) {
                T m1 = T(0), m2 = T(0);
                for (int i = 0; i < D; ++i) {
                    const T dgy = grow[i] * (*G.data)[i];
                    m1 += dgy;
                    m2 += dgy * xh[i];
                }
                m1 /= T(D);
                m2 /= T(D);
                const T is = (*inv_sigma)[r];
                T* gxr = gx + r * D;
                for (int i = 0; i < D; ++i) {
                    const T dgy = grow[i] * (*G.data)[i];
                    gxr[i] += is * (dgy - m1 - xh[i] * m2);
                }
            }
        }
    });
    return {&t, id};
}

// Softmax over the last axis, max-subtracted for stability.
template <typename T>
VarT<T> softmax(VarT<T> x) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    check(!xv.shape.empty(), "softmax: empty shape");
    const int D = xv.shape.back();
    const std::int64_t R = numel(xv.shape) / D;
    TensorT<T> out = TensorT<T>::zeros(xv.shape);
    for (std::int64_t r = 0; r < R; ++r) {
        const T* row = xv.ptr() + r * D;
        T* orow = out.ptr() + r * D;
        T mx = row[0];
        for (int i = 1; i < D; ++i) mx = std::max(mx, row[i]);
        T s = T(0);
        for (int i = 0; i < D; ++i) {
            orow[i] = std::exp(row[i] - mx);
            s += orow[i];
        }
        for (int i = 0; i < D; ++i) orow[i] /= s;
    }
    const int px = x.id;
    int id = t.record(std::move(out), {px}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        const TensorT<T>& P = tp.value(self);
        auto& gx = tp.grad_buf(px);
        for (std::int64_t r = 0; r < R; ++r) {
            const T* prow = P.ptr() + r * D;
            const T* grow = g + r * D;
            T dot = T(0);
            for (int i = 0; i < D; ++i) dot += grow[i] * prow[i];
            T* gxr = gx.data() + r * D;
            for (int i = 0; i < D; ++i) gxr[i] += prow[i] * (grow[i] - dot);
        }
    });
    return {&t, id};
}

// q [Nq,D], k [Nk,D], v [Nk,Dv] -> [Nq,Dv]; softmax(q k^T / sqrt(D)) v.
// The attention matrix is saved for the fused backward pass.
template <typename T>
VarT<T> scaled_dot_attention(VarT<T> q, VarT<T> k, VarT<T> v) {
    check(q.tape == k.tape && q.tape == v.tape, "attention: operands on different tapes");
    TapeT<T>& t = *q.tape;
    const TensorT<T>& qv = t.value(q.id);
    const TensorT<T>& kv = t.value(k.id);
    const TensorT<T>& vv = t.value(v.id);
    check(qv.shape.size() == 2 && kv.shape.size() == 2 && vv.shape.size() == 2 &&
              qv.shape[1] == kv.shape[1] && kv.shape[0] == vv.shape[0],
          "attention: bad shapes q" + shape_str(qv.shape) + " k" + shape_str(kv.shape) +
              " v" + shape_str(vv.shape));
    const int Nq = qv.shape[0], D = qv.shape[1], Nk = kv.shape[0], Dv = vv.shape[1];
    const T scale = T(1) / std::sqrt(T(D));
    auto P = std::make_shared<std::vector<T>>((std::int64_t)Nq * Nk);
    detail::gemm_nt(qv.ptr(), kv.ptr(), P->data(), Nq, D, Nk);
    for (int r = 0; r < Nq; ++r) {
        T* row = P->data() + (std::int64_t)r * Nk;
        T mx = row[0] * scale;
        for (int i = 0; i < Nk; ++i) mx = std::max(mx, row[i] * scale);
        T s = T(0);
        for (int i = 0; i < Nk; ++i) {
            row[i] = std::exp(row[i] * scale - mx);
            s += row[i];
        }
        for (int i = 0; i < Nk; ++i) row[i] /= s;
    }
    TensorT<T> out = TensorT<T>::zeros({Nq, Dv});
    detail::gemm_nn(P->data(), vv.ptr(), out.ptr(), Nq, Nk, Dv);
    const int pq = q.id, pk = k.id, pv = v.id;
    int id = t.record(std::move(out), {pq, pk, pv}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        const TensorT<T>& Q = tp.value(pq);
        const TensorT<T>& K = tp.value(pk);
        const TensorT<T>& V = tp.value(pv);
        if (tp.needs_grad(pv))
            detail::gemm_tn(P->data(), g, tp.grad_buf(pv).data(), Nk, Nq, Dv, true);
        if (tp.needs_grad(pq) || tp.needs_grad(pk)) {
            std::vector<T> dS((std::int64_t)Nq * Nk);
            detail::gemm_nt(g, V.ptr(), dS.data(), Nq, Dv, Nk);
            for (int r = 0; r < Nq; ++r) {
                T* drow = dS.data() + (std::int64_t)r * Nk;
                const T* prow = P->data() + (std::int64_t)r * Nk;
                T dot = T(0);
                for (int i = 0; i < Nk; ++i) dot += drow[i] * prow[i];
                for (int i = 0; i < Nk; ++i)
                    drow[i] = prow[i] * (drow[i] - dot) * scale;
            }
            if (tp.needs_grad(pq))
                detail::gemm_nn(dS.data(), K.ptr(), tp.grad_buf(pq).data(), Nq, Nk, D, true);
            if (tp.needs_grad(pk))
                detail::gemm_tn(dS.data(), Q.ptr(), tp.grad_buf(pk).data(), Nk, Nq, D, true);
        }
    });
    return {&t, id};
}

template <typename T>
VarT<T> concat(const std::vector<VarT<T>>& xs, int axis) {
    check(!xs.empty(), "concat: no inputs");
    TapeT<T>& t = *xs[0].tape;
    const Shape& s0 = t.value(xs[0].id).shape;
    check(axis >= 0 && axis < (int)s0.size(), "concat: bad axis");
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const auto& x : xs) {
        check(x.tape == &t, "concat: operands on different tapes");
        const Shape& s = t.value(x.id).shape;
        check(s.size() == s0.size(), "concat: rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            check((int)d == axis || s[d] == s0[d], "concat: shape mismatch at dim " +
                                                       std::to_string(d));
        out_shape[axis] += s[axis];
    }
    // outer x axis x inner decomposition.
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const std::int64_t ostride = (std::int64_t)out_shape[axis] * inner;
    std::int64_t off = 0;
    std::vector<int> parents;
    std::vector<std::int64_t> offs;
    std::vector<std::int64_t> lens;
    for (const auto& x : xs) {
        const TensorT<T>& xv = t.value(x.id);
        const std::int64_t len = (std::int64_t)xv.shape[axis] * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(xv.ptr() + o * len, xv.ptr() + (o + 1) * len,
                      out.ptr() + o * ostride + off);
        parents.push_back(x.id);
        offs.push_back(off);
        lens.push_back(len);
        off += len;
    }
    int id = t.record_v(std::move(out), parents, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        for (size_t i = 0; i < parents.size(); ++i) {
            if (!tp.needs_grad(parents[i])) continue;
            auto& gx = tp.grad_buf(parents[i]);
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* src = g + o * ostride + offs[i];
                T* dst = gx.data() + o * lens[i];
                for (std::int64_t j = 0; j < lens[i]; ++j) dst[j] += src[j];
            }
        }
    });
    return {&t, id};
}

template <typename T>
VarT<T> slice(VarT<T> x, int axis, int start, int len) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    const Shape& s = xv.shape;
    check(axis >= 0 && axis < (int)s.size(), "slice: bad axis");
    check(start >= 0 && len > 0 && start + len <= s[axis],
          "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") out of bounds for dim " + std::to_string(s[axis]));
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    Shape out_shape = s;
    out_shape[axis] = len;
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const std::int64_t istride = (std::int64_t)s[axis] * inner;
    const std::int64_t olen = (std::int64_t)len * inner;
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(xv.ptr() + o * istride + start * inner,
                  xv.ptr() + o * istride + start * inner + olen, out.ptr() + o * olen);
    const int px = x.id;
    int id = t.record(std::move(out), {px}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        auto& gx = tp.grad_buf(px);
        for (std::int64_t o = 0; o < outer; ++o) {
            T* dst = gx.data() + o * istride + start * inner;
            const T* src = g + o * olen;
            for (std::int64_t j = 0; j < olen; ++j) dst[j] += src[j];
        }
    });
    return {&t, id};
}

// View with a new shape; shares storage with the input.
template <typename T>
VarT<T> reshape(VarT<T> x, Shape new_shape) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    check(numel(new_shape) == xv.size(), "reshape: " + shape_str(xv.shape) + " -> " +
                                             shape_str(new_shape) + " changes element count");
    TensorT<T> out;
    out.shape = std::move(new_shape);
    out.data = xv.data;
    const int px = x.id;
    int id = t.record(std::move(out), {px}, [px](TapeT<T>& tp, int self) {
        const auto& g = tp.grad_buf(self);
        auto& gx = tp.grad_buf(px);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
    return {&t, id};
}

// Swaps the last two axes (rank >= 2); leading axes act as a batch.
template <typename T>
VarT<T> transpose2(VarT<T> x) {
    TapeT<T>& t = *x.tape;
    const TensorT<T>& xv = t.value(x.id);
    check((int)xv.shape.size() >= 2,
          "transpose2: rank must be >= 2, got " + shape_str(xv.shape));
    const int R = xv.shape[xv.shape.size() - 2];
    const int C = xv.shape[xv.shape.size() - 1];
    const std::int64_t batch = xv.size() / ((std::int64_t)R * C);
    Shape os = xv.shape;
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    TensorT<T> out = TensorT<T>::zeros(std::move(os));
    for (std::int64_t b = 0; b < batch; ++b) {
        const T* src = xv.ptr() + b * R * C;
        T* dst = out.ptr() + b * R * C;
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) dst[(std::int64_t)c * R + r] = src[(std::int64_t)r * C + c];
    }
    const int px = x.id;
    int id = t.record(std::move(out), {px}, [=](TapeT<T>& tp, int self) {
        const T* g = tp.grad_buf(self).data();
        auto& gx = tp.grad_buf(px);
        for (std::int64_t b = 0; b < batch; ++b) {
            const T* src = g + b * R * C;
            T* dst = gx.data() + b * R * C;
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) dst[(std::int64_t)r * C + c] += src[(std::int64_t)c * R + r];
        }
    });
    return {&t, id};
}

// Identity value, blocks gradient flow.
template <typename T>
VarT<T> stop_gradient(VarT<T> x) {
    TapeT<T>& t = *x.tape;
    TensorT<T> out;
    out.shape = t.value(x.id).shape;
    out.data = t.value(x.id).data;
    int id = t.record(std::move(out), {}, nullptr);
    return {&t, id};
}

}  // namespace ta::ad
