#pragma once

// Differentiable primitives over Tensor<T>. Every op validates shapes,
// rejects non-finite outputs, and (when a Graph is supplied and an input
// requires grad) records a reverse closure on the tape.

#include <algorithm>
#include <cmath>
#include <vector>

#include "limm/blas.hpp"
#include "limm/tensor.hpp"

namespace limm::ops {

template <class T>
bool any_grad(const Tensor<T>& a) { return a->requires_grad; }

template <class T, class... Ts>
bool any_grad(const Tensor<T>& a, const Ts&... rest) { return a->requires_grad || any_grad(rest...); }

template <class T, class... Ts>
bool recording(Graph<T>* g, const Tensor<T>& a, const Ts&... rest) {
    return g != nullptr && any_grad(a, rest...);
}

template <class T>
void mark_output(const Tensor<T>& out) {
    out->requires_grad = true;
    out->ensure_grad();
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T, class Fwd, class Bwd>
Tensor<T> unary_elementwise(Graph<T>* g, const Tensor<T>& x, Fwd f, Bwd df, const char* name) {
    auto out = make_tensor<T>(x->shape);
    for (std::int64_t i = 0; i < x->size(); ++i) out->data[i] = f(x->data[i]);
    check_finite(out, name);
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, df]() {
            for (std::int64_t i = 0; i < x->size(); ++i)
                x->grad[i] += out->grad[i] * df(x->data[i], out->data[i]);
        });
    }
    return out;
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* name) {
    if (a->shape != b->shape)
        throw InvalidArgument(std::string(name) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                              shape_str(b->shape));
}

template <class T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    auto out = make_tensor<T>(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(out, "add");
    if (recording(g, a, b)) {
        mark_output(out);
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        g->record([out, a, b]() {
            if (a->requires_grad)
                for (std::int64_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (std::int64_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    auto out = make_tensor<T>(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] - b->data[i];
    check_finite(out, "sub");
    if (recording(g, a, b)) {
        mark_output(out);
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        g->record([out, a, b]() {
            if (a->requires_grad)
                for (std::int64_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (std::int64_t i = 0; i < b->size(); ++i) b->grad[i] -= out->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    auto out = make_tensor<T>(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * b->data[i];
    check_finite(out, "mul");
    if (recording(g, a, b)) {
        mark_output(out);
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        g->record([out, a, b]() {
            if (a->requires_grad)
                for (std::int64_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
            if (b->requires_grad)
                for (std::int64_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(Graph<T>* g, const Tensor<T>& x, T c) {
    return unary_elementwise(g, x, [c](T v) { return v * c; }, [c](T, T) { return c; }, "scale");
}

template <class T>
Tensor<T> add_const(Graph<T>* g, const Tensor<T>& x, T c) {
    return unary_elementwise(g, x, [c](T v) { return v + c; }, [](T, T) { return T(1); }, "add_const");
}

template <class T>
Tensor<T> exp_op(Graph<T>* g, const Tensor<T>& x) {
    return unary_elementwise(g, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; }, "exp");
}

template <class T>
Tensor<T> log_op(Graph<T>* g, const Tensor<T>& x) {
    return unary_elementwise(g, x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; }, "log");
}

template <class T>
Tensor<T> sin_op(Graph<T>* g, const Tensor<T>& x) {
    return unary_elementwise(g, x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); }, "sin");
}

template <class T>
Tensor<T> relu(Graph<T>* g, const Tensor<T>& x) {
    return unary_elementwise(
        g, x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); }, "relu");
}

/// Tanh-approximation GELU.
template <class T>
Tensor<T> gelu(Graph<T>* g, const Tensor<T>& x) {
    const T c = std::sqrt(T(2) / T(M_PI));
    const T a = T(0.044715);
    auto fwd = [c, a](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v))); };
    auto bwd = [c, a](T v, T) {
        T u = c * (v + a * v * v * v);
        T th = std::tanh(u);
        T sech2 = T(1) - th * th;
        return T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * c * (T(1) + T(3) * a * v * v);
    };
    return unary_elementwise(g, x, fwd, bwd, "gelu");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(Graph<T>* g, const Tensor<T>& x) {
    T s = T(0);
    for (T v : x->data) s += v;
    auto out = make_tensor<T>({1}, {s});
    check_finite(out, "sum_all");
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x]() {
            for (std::int64_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[0];
        });
    }
    return out;
}

template <class T>
Tensor<T> mean_all(Graph<T>* g, const Tensor<T>& x) {
    return scale(g, sum_all(g, x), T(1) / static_cast<T>(x->size()));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(Graph<T>* g, const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x->size())
        throw InvalidArgument("reshape: numel mismatch " + shape_str(x->shape) + " -> " + shape_str(shape));
    auto out = make_tensor<T>(std::move(shape));
    out->data = x->data;
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x]() {
            for (std::int64_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <class T>
Tensor<T> permute(Graph<T>* g, const Tensor<T>& x, const std::vector<int>& perm) {
    const size_t r = x->shape.size();
    if (perm.size() != r) throw InvalidArgument("permute: rank mismatch");
    Shape oshape(r);
    for (size_t i = 0; i < r; ++i) oshape[i] = x->shape[perm[i]];
    auto out = make_tensor<T>(oshape);
    auto xst = row_major_strides(x->shape);
    // stride of output axis i in the input layout
    std::vector<std::int64_t> gst(r);
    for (size_t i = 0; i < r; ++i) gst[i] = xst[perm[i]];
    std::vector<int> idx(r, 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < out->size(); ++o) {
        out->data[o] = x->data[src];
        for (int ax = static_cast<int>(r) - 1; ax >= 0; --ax) {
            if (++idx[ax] < oshape[ax]) { src += gst[ax]; break; }
            idx[ax] = 0;
            src -= gst[ax] * (oshape[ax] - 1);
        }
    }
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, oshape, gst, r]() {
            std::vector<int> idx(r, 0);
            std::int64_t src = 0;
            for (std::int64_t o = 0; o < out->size(); ++o) {
                x->grad[src] += out->grad[o];
                for (int ax = static_cast<int>(r) - 1; ax >= 0; --ax) {
                    if (++idx[ax] < oshape[ax]) { src += gst[ax]; break; }
                    idx[ax] = 0;
                    src -= gst[ax] * (oshape[ax] - 1);
                }
            }
        });
    }
    return out;
}

/// Concatenate along `axis`; all other dims must match.
template <class T>
Tensor<T> concat(Graph<T>* g, const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) throw InvalidArgument("concat: empty input list");
    const size_t r = xs[0]->shape.size();
    if (axis < 0 || static_cast<size_t>(axis) >= r) throw InvalidArgument("concat: bad axis");
    Shape oshape = xs[0]->shape;
    for (size_t k = 1; k < xs.size(); ++k) {
        if (xs[k]->shape.size() != r) throw InvalidArgument("concat: rank mismatch");
        for (size_t i = 0; i < r; ++i)
            if (i != static_cast<size_t>(axis) && xs[k]->shape[i] != oshape[i])
                throw InvalidArgument("concat: shape mismatch");
        oshape[axis] += xs[k]->shape[axis];
    }
    auto out = make_tensor<T>(oshape);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= oshape[i];
    for (size_t i = axis + 1; i < r; ++i) inner *= oshape[i];
    const std::int64_t ostride = oshape[axis] * inner;
    std::int64_t off = 0;
    std::vector<std::int64_t> offsets;
    for (const auto& x : xs) {
        offsets.push_back(off);
        const std::int64_t blk = x->shape[axis] * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(x->data.begin() + o * blk, x->data.begin() + (o + 1) * blk,
                      out->data.begin() + o * ostride + off);
        off += blk;
    }
    bool need = false;
    if (g) for (const auto& x : xs) need = need || x->requires_grad;
    if (need) {
        mark_output(out);
        for (const auto& x : xs)
            if (x->requires_grad) x->ensure_grad();
        g->record([out, xs, offsets, outer, inner, ostride]() {
            for (size_t k = 0; k < xs.size(); ++k) {
                const auto& x = xs[k];
                if (!x->requires_grad) continue;
                const std::int64_t blk = x->size() / outer;
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < blk; ++i)
                        x->grad[o * blk + i] += out->grad[o * ostride + offsets[k] + i];
            }
        });
    }
    return out;
}

/// Select rows along axis 0 (duplicates allowed; backward scatter-adds).
template <class T>
Tensor<T> select_batch(Graph<T>* g, const Tensor<T>& x, const std::vector<int>& idx) {
    if (x->shape.empty()) throw InvalidArgument("select_batch: rank-0 input");
    const int n = x->shape[0];
    const std::int64_t row = x->size() / n;
    Shape oshape = x->shape;
    oshape[0] = static_cast<int>(idx.size());
    if (idx.empty()) throw InvalidArgument("select_batch: empty index list");
    for (int i : idx)
        if (i < 0 || i >= n) throw InvalidArgument("select_batch: index out of range");
    auto out = make_tensor<T>(oshape);
    for (size_t k = 0; k < idx.size(); ++k)
        std::copy(x->data.begin() + idx[k] * row, x->data.begin() + (idx[k] + 1) * row,
                  out->data.begin() + k * row);
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, idx, row]() {
            for (size_t k = 0; k < idx.size(); ++k)
                for (std::int64_t i = 0; i < row; ++i) x->grad[idx[k] * row + i] += out->grad[k * row + i];
        });
    }
    return out;
}

/// Gather scalars from a flat view of x.
template <class T>
Tensor<T> gather(Graph<T>* g, const Tensor<T>& x, const std::vector<int>& idx) {
    for (int i : idx)
        if (i < 0 || i >= x->size()) throw InvalidArgument("gather: index out of range");
    auto out = make_tensor<T>({static_cast<int>(idx.size())});
    for (size_t k = 0; k < idx.size(); ++k) out->data[k] = x->data[idx[k]];
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, idx]() {
            for (size_t k = 0; k < idx.size(); ++k) x->grad[idx[k]] += out->grad[k];
        });
    }
    return out;
}

/// Toroidal roll of the spatial axes of a [C,H,W] tensor:
/// out[c, (h+dy) mod H, (w+dx) mod W] = x[c,h,w].
template <class T>
Tensor<T> roll2d(Graph<T>* g, const Tensor<T>& x, int dy, int dx) {
    if (x->shape.size() != 3) throw InvalidArgument("roll2d: expected [C,H,W]");
    const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    auto wrap = [](int v, int m) { return ((v % m) + m) % m; };
    const int sy = wrap(dy, H), sx = wrap(dx, W);
    auto out = make_tensor<T>(x->shape);
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h) {
            const int oh = (h + sy) % H;
            const T* src = &x->data[(static_cast<std::int64_t>(c) * H + h) * W];
            T* dst = &out->data[(static_cast<std::int64_t>(c) * H + oh) * W];
            for (int w = 0; w < W; ++w) dst[(w + sx) % W] = src[w];
        }
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, C, H, W, sy, sx]() {
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h) {
                    const int oh = (h + sy) % H;
                    T* gx = &x->grad[(static_cast<std::int64_t>(c) * H + h) * W];
                    const T* go = &out->grad[(static_cast<std::int64_t>(c) * H + oh) * W];
                    for (int w = 0; w < W; ++w) gx[w] += go[(w + sx) % W];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// Affine map on the last axis: y[..., Dout] = x[..., Din] * w[Dout, Din]^T + b.
template <class T>
Tensor<T> linear(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = nullptr) {
    if (x->shape.empty() || w->shape.size() != 2)
        throw InvalidArgument("linear: expected x[...,Din], w[Dout,Din]");
    const int din = x->shape.back();
    const int dout = w->shape[0];
    if (w->shape[1] != din) throw InvalidArgument("linear: Din mismatch");
    if (b && (b->shape.size() != 1 || b->shape[0] != dout)) throw InvalidArgument("linear: bad bias shape");
    const int rows = static_cast<int>(x->size() / din);
    Shape oshape = x->shape;
    oshape.back() = dout;
    auto out = make_tensor<T>(oshape);
    detail::gemm(false, true, rows, dout, din, T(1), x->data.data(), din, w->data.data(), din, T(0),
                 out->data.data(), dout);
    if (b)
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < dout; ++c) out->data[static_cast<std::int64_t>(r) * dout + c] += b->data[c];
    check_finite(out, "linear");
    const bool need = b ? recording(g, x, w, b) : recording(g, x, w);
    if (need) {
        mark_output(out);
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b && b->requires_grad) b->ensure_grad();
        g->record([out, x, w, b, rows, din, dout]() {
            if (x->requires_grad)
                detail::gemm(false, false, rows, din, dout, T(1), out->grad.data(), dout, w->data.data(),
                             din, T(1), x->grad.data(), din);
            if (w->requires_grad)
                detail::gemm(true, false, dout, din, rows, T(1), out->grad.data(), dout, x->data.data(),
                             din, T(1), w->grad.data(), din);
            if (b && b->requires_grad)
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < dout; ++c) b->grad[c] += out->grad[static_cast<std::int64_t>(r) * dout + c];
        });
    }
    return out;
}

/// 2-D matrix product with optional transposes.
template <class T>
Tensor<T> matmul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
    if (a->shape.size() != 2 || b->shape.size() != 2) throw InvalidArgument("matmul: expected 2-D inputs");
    const int am = a->shape[0], an = a->shape[1];
    const int bm = b->shape[0], bn = b->shape[1];
    const int M = ta ? an : am, K = ta ? am : an;
    const int Kb = tb ? bn : bm, N = tb ? bm : bn;
    if (K != Kb) throw InvalidArgument("matmul: inner dimension mismatch");
    auto out = make_tensor<T>({M, N});
    detail::gemm(ta, tb, M, N, K, T(1), a->data.data(), an, b->data.data(), bn, T(0), out->data.data(), N);
    check_finite(out, "matmul");
    if (recording(g, a, b)) {
        mark_output(out);
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        g->record([out, a, b, ta, tb, M, N, K, an, bn]() {
            // dA and dB for the four transpose cases
            if (a->requires_grad) {
                if (!ta)
                    detail::gemm(false, !tb, M, K, N, T(1), out->grad.data(), N, b->data.data(), bn, T(1),
                                 a->grad.data(), an);
                else
                    detail::gemm(tb, true, K, M, N, T(1), b->data.data(), bn, out->grad.data(), N, T(1),
                                 a->grad.data(), an);
            }
            if (b->requires_grad) {
                if (!tb)
                    detail::gemm(!ta, false, K, N, M, T(1), a->data.data(), an, out->grad.data(), N, T(1),
                                 b->grad.data(), bn);
                else
                    detail::gemm(true, ta, N, K, M, T(1), out->grad.data(), N, a->data.data(), an, T(1),
                                 b->grad.data(), bn);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization / activation over structured axes
// ---------------------------------------------------------------------------

/// Max-subtracted softmax along `axis`.
template <class T>
Tensor<T> softmax(Graph<T>* g, const Tensor<T>& x, int axis) {
    const int r = static_cast<int>(x->shape.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw InvalidArgument("softmax: bad axis");
    const int n = x->shape[axis];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x->shape[i];
    for (int i = axis + 1; i < r; ++i) inner *= x->shape[i];
    auto out = make_tensor<T>(x->shape);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            T mx = x->data[base];
            for (int k = 1; k < n; ++k) mx = std::max(mx, x->data[base + k * inner]);
            T z = T(0);
            for (int k = 0; k < n; ++k) {
                T e = std::exp(x->data[base + k * inner] - mx);
                out->data[base + k * inner] = e;
                z += e;
            }
            for (int k = 0; k < n; ++k) out->data[base + k * inner] /= z;
        }
    check_finite(out, "softmax");
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, outer, inner, n]() {
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    T dot = T(0);
                    for (int k = 0; k < n; ++k) dot += out->grad[base + k * inner] * out->data[base + k * inner];
                    for (int k = 0; k < n; ++k)
                        x->grad[base + k * inner] +=
                            out->data[base + k * inner] * (out->grad[base + k * inner] - dot);
                }
        });
    }
    return out;
}

/// Per-position channel normalization over the last axis, then affine.
template <class T>
Tensor<T> layer_norm(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
    if (eps <= T(0)) throw InvalidArgument("layer_norm: eps must be > 0");
    const int C = x->shape.back();
    if (gamma->shape != Shape{C} || beta->shape != Shape{C})
        throw InvalidArgument("layer_norm: gamma/beta must be [C]");
    const std::int64_t rows = x->size() / C;
    auto out = make_tensor<T>(x->shape);
    std::vector<T> inv_std(rows), mean(rows);
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = &x->data[r * C];
        T mu = T(0);
        for (int c = 0; c < C; ++c) mu += xr[c];
        mu /= C;
        T var = T(0);
        for (int c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= C;
        const T inv = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = inv;
        T* yr = &out->data[r * C];
        for (int c = 0; c < C; ++c) yr[c] = (xr[c] - mu) * inv * gamma->data[c] + beta->data[c];
    }
    check_finite(out, "layer_norm");
    if (recording(g, x, gamma, beta)) {
        mark_output(out);
        if (x->requires_grad) x->ensure_grad();
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        g->record([out, x, gamma, beta, rows, C, mean, inv_std]() {
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* xr = &x->data[r * C];
                const T* dy = &out->grad[r * C];
                const T mu = mean[r], inv = inv_std[r];
                T sum_dyg = T(0), sum_dyg_xhat = T(0);
                for (int c = 0; c < C; ++c) {
                    const T xhat = (xr[c] - mu) * inv;
                    const T dyg = dy[c] * gamma->data[c];
                    sum_dyg += dyg;
                    sum_dyg_xhat += dyg * xhat;
                    if (gamma->requires_grad) gamma->grad[c] += dy[c] * xhat;
                    if (beta->requires_grad) beta->grad[c] += dy[c];
                }
                if (x->requires_grad) {
                    T* dx = &x->grad[r * C];
                    for (int c = 0; c < C; ++c) {
                        const T xhat = (xr[c] - mu) * inv;
                        const T dyg = dy[c] * gamma->data[c];
                        dx[c] += inv * (dyg - sum_dyg / C - xhat * sum_dyg_xhat / C);
                    }
                }
            }
        });
    }
    return out;
}

/// Normalize the last axis to unit Euclidean norm (smooth eps guard).
template <class T>
Tensor<T> l2_normalize(Graph<T>* g, const Tensor<T>& x, T eps = T(1e-12)) {
    const int C = x->shape.back();
    const std::int64_t rows = x->size() / C;
    auto out = make_tensor<T>(x->shape);
    std::vector<T> inv_norm(rows);
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = &x->data[r * C];
        T n2 = T(0);
        for (int c = 0; c < C; ++c) n2 += xr[c] * xr[c];
        const T inv = T(1) / std::sqrt(n2 + eps * eps);
        inv_norm[r] = inv;
        for (int c = 0; c < C; ++c) out->data[r * C + c] = xr[c] * inv;
    }
    check_finite(out, "l2_normalize");
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, rows, C, inv_norm]() {
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* xr = &x->data[r * C];
                const T* dy = &out->grad[r * C];
                const T inv = inv_norm[r];
                T dot = T(0);
                for (int c = 0; c < C; ++c) dot += dy[c] * xr[c];
                T* dx = &x->grad[r * C];
                for (int c = 0; c < C; ++c) dx[c] += inv * dy[c] - inv * inv * inv * xr[c] * dot;
            }
        });
    }
    return out;
}

/// Per-channel scaling over the last axis: y[..., c] = x[..., c] * s[c].
template <class T>
Tensor<T> scale_channels(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& s) {
    const int C = x->shape.back();
    if (s->shape != Shape{C}) throw InvalidArgument("scale_channels: scale must be [C]");
    const std::int64_t rows = x->size() / C;
    auto out = make_tensor<T>(x->shape);
    for (std::int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < C; ++c) out->data[r * C + c] = x->data[r * C + c] * s->data[c];
    check_finite(out, "scale_channels");
    if (recording(g, x, s)) {
        mark_output(out);
        if (x->requires_grad) x->ensure_grad();
        if (s->requires_grad) s->ensure_grad();
        g->record([out, x, s, rows, C]() {
            for (std::int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < C; ++c) {
                    const T gv = out->grad[r * C + c];
                    if (x->requires_grad) x->grad[r * C + c] += gv * s->data[c];
                    if (s->requires_grad) s->grad[c] += gv * x->data[r * C + c];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions and pooling (NCHW)
// ---------------------------------------------------------------------------

namespace detail2 {

inline int conv_out_size(int in, int k, int s, int p, int d) {
    return (in + 2 * p - d * (k - 1) - 1) / s + 1;
}

/// cols[(C*kH*kW) x (Oh*Ow)], row index ((c*kH+i)*kW+j).
template <class T>
void im2col(const T* src, int C, int H, int W, int kH, int kW, int s, int p, int d, int Oh, int Ow,
            T* cols) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kH; ++ki)
            for (int kj = 0; kj < kW; ++kj) {
                T* row = cols + (static_cast<std::int64_t>((c * kH + ki) * kW + kj)) * Oh * Ow;
                for (int oh = 0; oh < Oh; ++oh) {
                    const int ih = oh * s - p + ki * d;
                    if (ih < 0 || ih >= H) {
                        std::fill(row + oh * Ow, row + (oh + 1) * Ow, T(0));
                        continue;
                    }
                    const T* srow = src + (static_cast<std::int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < Ow; ++ow) {
                        const int iw = ow * s - p + kj * d;
                        row[oh * Ow + ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
                    }
                }
            }
}

/// Adjoint of im2col: scatter-add cols back into dst[C,H,W].
template <class T>
void col2im(const T* cols, int C, int H, int W, int kH, int kW, int s, int p, int d, int Oh, int Ow,
            T* dst) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kH; ++ki)
            for (int kj = 0; kj < kW; ++kj) {
                const T* row = cols + (static_cast<std::int64_t>((c * kH + ki) * kW + kj)) * Oh * Ow;
                for (int oh = 0; oh < Oh; ++oh) {
                    const int ih = oh * s - p + ki * d;
                    if (ih < 0 || ih >= H) continue;
                    T* drow = dst + (static_cast<std::int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < Ow; ++ow) {
                        const int iw = ow * s - p + kj * d;
                        if (iw >= 0 && iw < W) drow[iw] += row[oh * Ow + ow];
                    }
                }
            }
}

}  // namespace detail2

/// Standard cross-correlation, grouped, dilated.
template <class T>
Tensor<T> conv2d(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding, int dilation = 1, int groups = 1) {
    if (x->shape.size() != 4 || w->shape.size() != 4)
        throw InvalidArgument("conv2d: expected x[N,Cin,H,W], w[Cout,Cin/g,kH,kW]");
    const int N = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Co = w->shape[0], Cig = w->shape[1], kH = w->shape[2], kW = w->shape[3];
    if (stride < 1 || dilation < 1 || groups < 1 || padding < 0) throw InvalidArgument("conv2d: bad hyperparameters");
    if (Ci % groups != 0 || Co % groups != 0 || Cig != Ci / groups)
        throw InvalidArgument("conv2d: channel/group mismatch");
    if (b && (b->shape.size() != 1 || b->shape[0] != Co)) throw InvalidArgument("conv2d: bad bias shape");
    const int Oh = detail2::conv_out_size(H, kH, stride, padding, dilation);
    const int Ow = detail2::conv_out_size(W, kW, stride, padding, dilation);
    if (Oh < 1 || Ow < 1) throw InvalidArgument("conv2d: output would be empty");
    const int Cog = Co / groups;
    auto out = make_tensor<T>({N, Co, Oh, Ow});
    const std::int64_t xs = static_cast<std::int64_t>(Ci) * H * W;
    const std::int64_t ys = static_cast<std::int64_t>(Co) * Oh * Ow;
    const std::int64_t colsz = static_cast<std::int64_t>(Cig) * kH * kW * Oh * Ow;
    std::vector<T> cols(colsz);
    const bool one_by_one = (kH == 1 && kW == 1 && stride == 1 && padding == 0 && groups == 1);
    for (int n = 0; n < N; ++n)
        for (int gr = 0; gr < groups; ++gr) {
            const T* xg = &x->data[n * xs + static_cast<std::int64_t>(gr) * Cig * H * W];
            const T* colp;
            if (one_by_one) {
                colp = xg;
            } else {
                detail2::im2col(xg, Cig, H, W, kH, kW, stride, padding, dilation, Oh, Ow, cols.data());
                colp = cols.data();
            }
            detail::gemm(false, false, Cog, Oh * Ow, Cig * kH * kW, T(1),
                         &w->data[static_cast<std::int64_t>(gr) * Cog * Cig * kH * kW], Cig * kH * kW, colp,
                         Oh * Ow, T(0), &out->data[n * ys + static_cast<std::int64_t>(gr) * Cog * Oh * Ow],
                         Oh * Ow);
        }
    if (b)
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < Co; ++c) {
                T* yp = &out->data[n * ys + static_cast<std::int64_t>(c) * Oh * Ow];
                const T bv = b->data[c];
                for (int i = 0; i < Oh * Ow; ++i) yp[i] += bv;
            }
    check_finite(out, "conv2d");
    const bool need = b ? recording(g, x, w, b) : recording(g, x, w);
    if (need) {
        mark_output(out);
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b && b->requires_grad) b->ensure_grad();
        g->record([out, x, w, b, stride, padding, dilation, groups, N, Ci, H, W, Co, Cig, Cog, kH, kW, Oh,
                   Ow, xs, ys, colsz, one_by_one]() {
            std::vector<T> cols(colsz), dcols(colsz);
            for (int n = 0; n < N; ++n)
                for (int gr = 0; gr < groups; ++gr) {
                    const T* xg = &x->data[n * xs + static_cast<std::int64_t>(gr) * Cig * H * W];
                    const T* dy = &out->grad[n * ys + static_cast<std::int64_t>(gr) * Cog * Oh * Ow];
                    const T* wg = &w->data[static_cast<std::int64_t>(gr) * Cog * Cig * kH * kW];
                    if (w->requires_grad) {
                        const T* colp;
                        if (one_by_one) {
                            colp = xg;
                        } else {
                            detail2::im2col(xg, Cig, H, W, kH, kW, stride, padding, dilation, Oh, Ow,
                                            cols.data());
                            colp = cols.data();
                        }
                        detail::gemm(false, true, Cog, Cig * kH * kW, Oh * Ow, T(1), dy, Oh * Ow, colp,
                                     Oh * Ow, T(1),
                                     &w->grad[static_cast<std::int64_t>(gr) * Cog * Cig * kH * kW],
                                     Cig * kH * kW);
                    }
                    if (x->requires_grad) {
                        T* dxg = &x->grad[n * xs + static_cast<std::int64_t>(gr) * Cig * H * W];
                        if (one_by_one) {
                            detail::gemm(true, false, Cig, Oh * Ow, Cog, T(1), wg, Cig, dy, Oh * Ow, T(1),
                                         dxg, Oh * Ow);
                        } else {
                            detail::gemm(true, false, Cig * kH * kW, Oh * Ow, Cog, T(1), wg, Cig * kH * kW,
                                         dy, Oh * Ow, T(0), dcols.data(), Oh * Ow);
                            detail2::col2im(dcols.data(), Cig, H, W, kH, kW, stride, padding, dilation, Oh,
                                            Ow, dxg);
                        }
                    }
                }
            if (b && b->requires_grad)
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Co; ++c) {
                        const T* dy = &out->grad[n * ys + static_cast<std::int64_t>(c) * Oh * Ow];
                        T s = T(0);
                        for (int i = 0; i < Oh * Ow; ++i) s += dy[i];
                        b->grad[c] += s;
                    }
        });
    }
    return out;
}

/// Exact adjoint of conv2d with matching stride/padding (plus bias).
/// Weight layout [Cin, Cout, kH, kW]; output (H-1)*s - 2p + k.
template <class T>
Tensor<T> conv_transpose2d(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           int stride, int padding) {
    if (x->shape.size() != 4 || w->shape.size() != 4)
        throw InvalidArgument("conv_transpose2d: expected x[N,Cin,H,W], w[Cin,Cout,kH,kW]");
    const int N = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Cw = w->shape[0], Co = w->shape[1], kH = w->shape[2], kW = w->shape[3];
    if (stride < 1 || padding < 0) throw InvalidArgument("conv_transpose2d: bad hyperparameters");
    if (Cw != Ci) throw InvalidArgument("conv_transpose2d: channel mismatch");
    if (b && (b->shape.size() != 1 || b->shape[0] != Co)) throw InvalidArgument("conv_transpose2d: bad bias shape");
    const int Oh = (H - 1) * stride - 2 * padding + kH;
    const int Ow = (W - 1) * stride - 2 * padding + kW;
    if (Oh < 1 || Ow < 1) throw InvalidArgument("conv_transpose2d: output would be empty");
    auto out = make_tensor<T>({N, Co, Oh, Ow});
    const std::int64_t xs = static_cast<std::int64_t>(Ci) * H * W;
    const std::int64_t ys = static_cast<std::int64_t>(Co) * Oh * Ow;
    const std::int64_t colsz = static_cast<std::int64_t>(Co) * kH * kW * H * W;
    std::vector<T> cols(colsz);
    for (int n = 0; n < N; ++n) {
        // cols = W^T x[n]  with W viewed as [Ci, Co*kH*kW]
        detail::gemm(true, false, Co * kH * kW, H * W, Ci, T(1), w->data.data(), Co * kH * kW,
                     &x->data[n * xs], H * W, T(0), cols.data(), H * W);
        detail2::col2im(cols.data(), Co, Oh, Ow, kH, kW, stride, padding, 1, H, W, &out->data[n * ys]);
    }
    if (b)
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < Co; ++c) {
                T* yp = &out->data[n * ys + static_cast<std::int64_t>(c) * Oh * Ow];
                for (int i = 0; i < Oh * Ow; ++i) yp[i] += b->data[c];
            }
    check_finite(out, "conv_transpose2d");
    const bool need = b ? recording(g, x, w, b) : recording(g, x, w);
    if (need) {
        mark_output(out);
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b && b->requires_grad) b->ensure_grad();
        g->record([out, x, w, b, stride, padding, N, Ci, H, W, Co, kH, kW, Oh, Ow, xs, ys, colsz]() {
            std::vector<T> cols(colsz);
            for (int n = 0; n < N; ++n) {
                detail2::im2col(&out->grad[n * ys], Co, Oh, Ow, kH, kW, stride, padding, 1, H, W,
                                cols.data());
                if (x->requires_grad)
                    detail::gemm(false, false, Ci, H * W, Co * kH * kW, T(1), w->data.data(), Co * kH * kW,
                                 cols.data(), H * W, T(1), &x->grad[n * xs], H * W);
                if (w->requires_grad)
                    detail::gemm(false, true, Ci, Co * kH * kW, H * W, T(1), &x->data[n * xs], H * W,
                                 cols.data(), H * W, T(1), w->grad.data(), Co * kH * kW);
            }
            if (b && b->requires_grad)
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Co; ++c) {
                        const T* dy = &out->grad[n * ys + static_cast<std::int64_t>(c) * Oh * Ow];
                        T s = T(0);
                        for (int i = 0; i < Oh * Ow; ++i) s += dy[i];
                        b->grad[c] += s;
                    }
        });
    }
    return out;
}

/// Half-pixel-centered bilinear 2x upsampling (no corner alignment).
template <class T>
Tensor<T> bilinear_upsample2x(Graph<T>* g, const Tensor<T>& x) {
    if (x->shape.size() != 4) throw InvalidArgument("bilinear_upsample2x: expected [N,C,H,W]");
    const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Oh = 2 * H, Ow = 2 * W;
    auto out = make_tensor<T>({N, C, Oh, Ow});
    // source coordinate for output o: o/2 - 0.25, edge-clamped
    std::vector<int> i0(Oh), i1(Oh), j0(Ow), j1(Ow);
    std::vector<T> fi(Oh), fj(Ow);
    auto setup = [](int O, int I, std::vector<int>& a0, std::vector<int>& a1, std::vector<T>& f) {
        for (int o = 0; o < O; ++o) {
            T src = T(o) / T(2) - T(0.25);
            int lo = static_cast<int>(std::floor(src));
            T fr = src - lo;
            int hi = lo + 1;
            if (lo < 0) lo = 0;
            if (hi < 0) hi = 0;
            if (lo > I - 1) lo = I - 1;
            if (hi > I - 1) hi = I - 1;
            a0[o] = lo;
            a1[o] = hi;
            f[o] = fr;
        }
    };
    setup(Oh, H, i0, i1, fi);
    setup(Ow, W, j0, j1, fj);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* sp = &x->data[(static_cast<std::int64_t>(n) * C + c) * H * W];
            T* dp = &out->data[(static_cast<std::int64_t>(n) * C + c) * Oh * Ow];
            for (int oh = 0; oh < Oh; ++oh)
                for (int ow = 0; ow < Ow; ++ow) {
                    const T a = sp[i0[oh] * W + j0[ow]], bb = sp[i0[oh] * W + j1[ow]];
                    const T cc = sp[i1[oh] * W + j0[ow]], dd = sp[i1[oh] * W + j1[ow]];
                    const T top = a + (bb - a) * fj[ow];
                    const T bot = cc + (dd - cc) * fj[ow];
                    dp[oh * Ow + ow] = top + (bot - top) * fi[oh];
                }
        }
    check_finite(out, "bilinear_upsample2x");
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, N, C, H, W, Oh, Ow, i0, i1, j0, j1, fi, fj]() {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    T* gx = &x->grad[(static_cast<std::int64_t>(n) * C + c) * H * W];
                    const T* go = &out->grad[(static_cast<std::int64_t>(n) * C + c) * Oh * Ow];
                    for (int oh = 0; oh < Oh; ++oh)
                        for (int ow = 0; ow < Ow; ++ow) {
                            const T gv = go[oh * Ow + ow];
                            const T wi1 = fi[oh], wi0 = T(1) - wi1;
                            const T wj1 = fj[ow], wj0 = T(1) - wj1;
                            gx[i0[oh] * W + j0[ow]] += gv * wi0 * wj0;
                            gx[i0[oh] * W + j1[ow]] += gv * wi0 * wj1;
                            gx[i1[oh] * W + j0[ow]] += gv * wi1 * wj0;
                            gx[i1[oh] * W + j1[ow]] += gv * wi1 * wj1;
                        }
                }
        });
    }
    return out;
}

enum class PoolKind { Mean, Sum, GlobalMean };

template <class T>
Tensor<T> pool2d(Graph<T>* g, const Tensor<T>& x, PoolKind kind, int kernel = 0, int stride = 0) {
    if (x->shape.size() != 4) throw InvalidArgument("pool2d: expected [N,C,H,W]");
    const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    int k = kernel, s = stride, Oh, Ow;
    if (kind == PoolKind::GlobalMean) {
        Oh = Ow = 1;
    } else {
        if (k < 1 || s < 1) throw InvalidArgument("pool2d: kernel and stride must be >= 1");
        Oh = (H - k) / s + 1;
        Ow = (W - k) / s + 1;
        if (Oh < 1 || Ow < 1) throw InvalidArgument("pool2d: output would be empty");
    }
    auto out = make_tensor<T>({N, C, Oh, Ow});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* sp = &x->data[(static_cast<std::int64_t>(n) * C + c) * H * W];
            T* dp = &out->data[(static_cast<std::int64_t>(n) * C + c) * Oh * Ow];
            if (kind == PoolKind::GlobalMean) {
                T acc = T(0);
                for (int i = 0; i < H * W; ++i) acc += sp[i];
                dp[0] = acc / static_cast<T>(H * W);
            } else {
                for (int oh = 0; oh < Oh; ++oh)
                    for (int ow = 0; ow < Ow; ++ow) {
                        T acc = T(0);
                        for (int i = 0; i < k; ++i)
                            for (int j = 0; j < k; ++j) acc += sp[(oh * s + i) * W + ow * s + j];
                        dp[oh * Ow + ow] = (kind == PoolKind::Mean) ? acc / static_cast<T>(k * k) : acc;
                    }
            }
        }
    check_finite(out, "pool2d");
    if (recording(g, x)) {
        mark_output(out);
        x->ensure_grad();
        g->record([out, x, kind, k, s, N, C, H, W, Oh, Ow]() {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    T* gx = &x->grad[(static_cast<std::int64_t>(n) * C + c) * H * W];
                    const T* go = &out->grad[(static_cast<std::int64_t>(n) * C + c) * Oh * Ow];
                    if (kind == PoolKind::GlobalMean) {
                        const T gv = go[0] / static_cast<T>(H * W);
                        for (int i = 0; i < H * W; ++i) gx[i] += gv;
                    } else {
                        const T norm = (kind == PoolKind::Mean) ? T(1) / static_cast<T>(k * k) : T(1);
                        for (int oh = 0; oh < Oh; ++oh)
                            for (int ow = 0; ow < Ow; ++ow) {
                                const T gv = go[oh * Ow + ow] * norm;
                                for (int i = 0; i < k; ++i)
                                    for (int j = 0; j < k; ++j) gx[(oh * s + i) * W + ow * s + j] += gv;
                            }
                    }
                }
        });
    }
    return out;
}

}  // namespace limm::ops
