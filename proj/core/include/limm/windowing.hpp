#pragma once

// Lossless window partition/fold, cyclic shift, and window sampling.

#include <utility>
#include <vector>

#include "limm/ops.hpp"
#include "limm/rng.hpp"
#include "limm/tensor.hpp"

namespace limm {

/// Batched stack of square windows plus the bookkeeping to fold them back.
template <class T>
struct WindowGrid {
    Tensor<T> windows;       // [nWin, C, ws, ws]
    int ws = 0;              // window side
    int rows = 0, cols = 0;  // grid layout, row-major
    int padBottom = 0, padRight = 0;
    int origC = 0, origH = 0, origW = 0;
    int shiftY = 0, shiftX = 0;  // cyclic shift currently applied to the source

    int num_windows() const { return rows * cols; }
};

/// Zero-pads bottom/right to multiples of ws, then cuts non-overlapping
/// ws x ws tiles in row-major order. Differentiable.
template <class T>
WindowGrid<T> partition(Graph<T>* g, const Tensor<T>& x, int ws) {
    if (ws <= 0) throw InvalidArgument("partition: window size must be positive");
    if (x->shape.size() != 3) throw InvalidArgument("partition: expected [C,H,W]");
    const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    WindowGrid<T> grid;
    grid.ws = ws;
    grid.origC = C;
    grid.origH = H;
    grid.origW = W;
    grid.rows = (H + ws - 1) / ws;
    grid.cols = (W + ws - 1) / ws;
    grid.padBottom = grid.rows * ws - H;
    grid.padRight = grid.cols * ws - W;
    const int nWin = grid.rows * grid.cols;
    auto out = make_tensor<T>({nWin, C, ws, ws});
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c) {
            const int widx = r * grid.cols + c;
            for (int ch = 0; ch < C; ++ch)
                for (int i = 0; i < ws; ++i) {
                    const int sh = r * ws + i;
                    T* dst = &out->data[((static_cast<std::int64_t>(widx) * C + ch) * ws + i) * ws];
                    if (sh >= H) continue;  // zero pad row
                    const T* src = &x->data[(static_cast<std::int64_t>(ch) * H + sh) * W + c * ws];
                    const int ncols = std::min(ws, W - c * ws);
                    std::copy(src, src + ncols, dst);
                }
        }
    if (g && x->requires_grad) {
        ops::mark_output(out);
        x->ensure_grad();
        const auto meta = grid;
        g->record([out, x, meta, C, H, W]() {
            const int ws = meta.ws;
            for (int r = 0; r < meta.rows; ++r)
                for (int c = 0; c < meta.cols; ++c) {
                    const int widx = r * meta.cols + c;
                    for (int ch = 0; ch < C; ++ch)
                        for (int i = 0; i < ws; ++i) {
                            const int sh = r * ws + i;
                            if (sh >= H) continue;
                            const T* go = &out->grad[((static_cast<std::int64_t>(widx) * C + ch) * ws + i) * ws];
                            T* gx = &x->grad[(static_cast<std::int64_t>(ch) * H + sh) * W + c * ws];
                            const int ncols = std::min(ws, W - c * ws);
                            for (int j = 0; j < ncols; ++j) gx[j] += go[j];
                        }
                }
        });
    }
    grid.windows = out;
    return grid;
}

/// Exact inverse of partition, including pad removal. Differentiable.
template <class T>
Tensor<T> fold(Graph<T>* g, const WindowGrid<T>& grid) {
    const auto& w = grid.windows;
    if (!w || w->shape.size() != 4) throw InvalidArgument("fold: missing window stack");
    const int nWin = w->shape[0], C = w->shape[1], ws = w->shape[2];
    if (w->shape[3] != ws || nWin != grid.rows * grid.cols || C != grid.origC || ws != grid.ws ||
        grid.rows * ws != grid.origH + grid.padBottom || grid.cols * ws != grid.origW + grid.padRight)
        throw InvalidArgument("fold: inconsistent grid metadata");
    const int H = grid.origH, W = grid.origW;
    auto out = make_tensor<T>({C, H, W});
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c) {
            const int widx = r * grid.cols + c;
            for (int ch = 0; ch < C; ++ch)
                for (int i = 0; i < ws; ++i) {
                    const int dh = r * ws + i;
                    if (dh >= H) continue;
                    const T* src = &w->data[((static_cast<std::int64_t>(widx) * C + ch) * ws + i) * ws];
                    T* dst = &out->data[(static_cast<std::int64_t>(ch) * H + dh) * W + c * ws];
                    const int ncols = std::min(ws, W - c * ws);
                    std::copy(src, src + ncols, dst);
                }
        }
    if (g && w->requires_grad) {
        ops::mark_output(out);
        w->ensure_grad();
        const auto meta = grid;
        g->record([out, w, meta, C, H, W, ws]() {
            for (int r = 0; r < meta.rows; ++r)
                for (int c = 0; c < meta.cols; ++c) {
                    const int widx = r * meta.cols + c;
                    for (int ch = 0; ch < C; ++ch)
                        for (int i = 0; i < ws; ++i) {
                            const int dh = r * ws + i;
                            if (dh >= H) continue;
                            T* gw = &w->grad[((static_cast<std::int64_t>(widx) * C + ch) * ws + i) * ws];
                            const T* go = &out->grad[(static_cast<std::int64_t>(ch) * H + dh) * W + c * ws];
                            const int ncols = std::min(ws, W - c * ws);
                            for (int j = 0; j < ncols; ++j) gw[j] += go[j];
                        }
                }
        });
    }
    return out;
}

/// Toroidal roll of the spatial axes; unshift(shift(x)) == x exactly.
template <class T>
Tensor<T> cyclic_shift(Graph<T>* g, const Tensor<T>& x, int dy, int dx) {
    return ops::roll2d(g, x, dy, dx);
}

template <class T>
Tensor<T> cyclic_unshift(Graph<T>* g, const Tensor<T>& x, int dy, int dx) {
    return ops::roll2d(g, x, -dy, -dx);
}

/// Count annotation points per grid window (half-open bounds [x0, x0+ws)).
inline std::vector<int> window_point_counts(const std::vector<std::pair<double, double>>& points, int H,
                                            int W, int ws) {
    const int rows = (H + ws - 1) / ws;
    const int cols = (W + ws - 1) / ws;
    std::vector<int> counts(rows * cols, 0);
    for (const auto& [px, py] : points) {
        // half-open [x0, x0+ws); a coordinate exactly on the far image edge
        // is clamped into the last window so counts partition the annotations
        const int c = std::min(static_cast<int>(px) / ws, cols - 1);
        const int r = std::min(static_cast<int>(py) / ws, rows - 1);
        if (r >= 0 && c >= 0) counts[r * cols + c]++;
    }
    return counts;
}

struct SampledWindows {
    std::vector<int> indices;  // grid window indices, distinct
    std::vector<int> counts;   // GT point count per sampled window
};

/// S distinct grid windows chosen uniformly without replacement.
inline SampledWindows sample_windows(const std::vector<std::pair<double, double>>& points, int H, int W,
                                     int ws, int S, Rng& rng) {
    const int rows = (H + ws - 1) / ws;
    const int cols = (W + ws - 1) / ws;
    const int nWin = rows * cols;
    if (S > nWin) throw InvalidArgument("sample_windows: S exceeds the number of grid windows");
    auto counts = window_point_counts(points, H, W, ws);
    SampledWindows out;
    out.indices = rng.sample_without_replacement(nWin, S);
    for (int idx : out.indices) out.counts.push_back(counts[idx]);
    return out;
}

}  // namespace limm
