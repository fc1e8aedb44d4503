#pragma once

// Receptive-field instruments: analytic TRF over layer specs, empirical ERF
// maps via input gradients, and the image-masking locality sweep.

#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "limm/heads.hpp"
#include "limm/ops.hpp"
#include "limm/rng.hpp"

namespace limm {

struct LayerEntry {
    enum class Kind { Conv, Pool, Upsample, AttnGlobal, Window };
    Kind kind = Kind::Conv;
    int kernel = 1, stride = 1, dilation = 1;
    int windowSize = 0;
};

/// One layer per line: `conv k=7 s=1 d=1`, `pool k=2 s=2`, `upsample s=2`,
/// `attn global`, `window 128`. Blank lines and `#` comments are skipped.
std::vector<LayerEntry> parse_layer_spec(std::istream& is);
std::vector<LayerEntry> parse_layer_spec_file(const std::string& path);

struct TrfResult {
    bool global = false;
    long long extent = 0;  // input pixels; meaningless when global

    std::string to_string() const { return global ? "global" : std::to_string(extent); }
};

/// Receptive-field arithmetic: r grows by (k-1)*d*j per conv/pool, j scales
/// by the stride (upsample divides); a global-attention entry makes the TRF
/// unbounded and a window entry caps it at the window extent.
TrfResult trf_analytic(const std::vector<LayerEntry>& spec);

struct ErfResult {
    std::vector<double> gradMap;  // H*W, channel-summed |d y / d x|
    int height = 0, width = 0;
    int centerRow = 0, centerCol = 0;  // input-pixel coords of the probe
    double threshold = 0.01;
    std::int64_t pixelCount = 0;
    double erfSize = 0;  // sqrt(pixelCount)
    bool degenerate = false;
};

/// Backpropagates the max-channel activation at `center` of the feature map
/// produced by `forward` (a callable (Graph<T>*, Tensor<T>) -> Tensor<T>
/// returning [C,Hf,Wf]) down to the input image.
template <class T, class Fwd>
ErfResult erf_map(Fwd&& forward, const Tensor<T>& image, int centerRow, int centerCol,
                  double threshold = 0.01) {
    if (image->shape.size() != 3) throw InvalidArgument("erf_map: expected [C,H,W] image");
    const int H = image->shape[1], W = image->shape[2];
    auto x = make_tensor<T>(image->shape, true);
    x->data = image->data;

    Graph<T> g;
    auto y = forward(&g, x);
    if (y->shape.size() != 3) throw InvalidArgument("erf_map: forward must return [C,Hf,Wf]");
    const int Cf = y->shape[0], Hf = y->shape[1], Wf = y->shape[2];
    if (centerRow < 0 || centerRow >= Hf || centerCol < 0 || centerCol >= Wf)
        throw InvalidArgument("erf_map: center outside the feature grid");
    int best = 0;
    for (int c = 1; c < Cf; ++c)
        if (y->data[(static_cast<std::int64_t>(c) * Hf + centerRow) * Wf + centerCol] >
            y->data[(static_cast<std::int64_t>(best) * Hf + centerRow) * Wf + centerCol])
            best = c;
    auto probe = ops::gather<T>(&g, y, {static_cast<int>((static_cast<std::int64_t>(best) * Hf + centerRow) * Wf + centerCol)});
    g.backward(ops::sum_all(&g, probe));

    ErfResult r;
    r.height = H;
    r.width = W;
    r.threshold = threshold;
    const int strideY = H / Hf, strideX = W / Wf;
    r.centerRow = centerRow * strideY + strideY / 2;
    r.centerCol = centerCol * strideX + strideX / 2;
    r.gradMap.assign(static_cast<size_t>(H) * W, 0.0);
    const int C = image->shape[0];
    for (int c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
            r.gradMap[i] += std::abs(static_cast<double>(x->grad[static_cast<std::int64_t>(c) * H * W + i]));
    const double centerGrad = r.gradMap[static_cast<std::int64_t>(r.centerRow) * W + r.centerCol];
    if (centerGrad <= 0) {
        std::cerr << "[limm] warning: zero gradient at the ERF probe center; degenerate result\n";
        r.degenerate = true;
        return r;
    }
    const double cut = threshold * centerGrad;
    for (double v : r.gradMap)
        if (v > cut) ++r.pixelCount;
    r.erfSize = std::sqrt(static_cast<double>(r.pixelCount));
    return r;
}

/// Mean erfSize over `samplesPerImage` random feature-grid centers of every
/// image. `featureShape` gives (Hf, Wf) for center sampling.
template <class T, class Fwd>
double erf_protocol(Fwd&& forward, const std::vector<Tensor<T>>& images, int featH, int featW,
                    int samplesPerImage, Rng& rng, double threshold = 0.01) {
    if (images.empty()) throw InvalidArgument("erf_protocol: no images");
    if (samplesPerImage < 1) throw InvalidArgument("erf_protocol: need at least one sample");
    double acc = 0;
    std::int64_t n = 0;
    for (const auto& img : images)
        for (int s = 0; s < samplesPerImage; ++s) {
            const int row = rng.below(featH), col = rng.below(featW);
            acc += erf_map(forward, img, row, col, threshold).erfSize;
            ++n;
        }
    return acc / static_cast<double>(n);
}

struct CenterRegion {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open pixel bounds

    void validate(int H, int W) const {
        if (y0 < 0 || x0 < 0 || y1 <= y0 || x1 <= x0 || y1 > H || x1 > W)
            throw InvalidArgument("CenterRegion: region outside the image");
    }
};

struct MaskSweepRow {
    int margin = 0;
    double count = 0;
};

/// For each margin, zeroes every pixel farther than `margin` from the region
/// and sums the predicted density over cells fully inside the region.
/// `predict` is a callable (Tensor<T> image) -> DensityMap<T>.
template <class T, class Predict>
std::vector<MaskSweepRow> mask_sweep(Predict&& predict, const Tensor<T>& image,
                                     const CenterRegion& region, const std::vector<int>& margins) {
    if (image->shape.size() != 3) throw InvalidArgument("mask_sweep: expected [C,H,W] image");
    const int C = image->shape[0], H = image->shape[1], W = image->shape[2];
    region.validate(H, W);
    std::vector<MaskSweepRow> rows;
    for (int m : margins) {
        if (m < 0) throw InvalidArgument("mask_sweep: negative margin");
        auto masked = make_tensor<T>(image->shape);
        const int ylo = std::max(0, region.y0 - m), yhi = std::min(H, region.y1 + m);
        const int xlo = std::max(0, region.x0 - m), xhi = std::min(W, region.x1 + m);
        for (int c = 0; c < C; ++c)
            for (int y = ylo; y < yhi; ++y)
                for (int x = xlo; x < xhi; ++x) {
                    const std::int64_t i = (static_cast<std::int64_t>(c) * H + y) * W + x;
                    masked->data[i] = image->data[i];
                }
        auto dm = predict(masked);
        const int s = dm.stride;
        const int Wm = dm.values->shape[2];
        double count = 0;
        for (int cy = (region.y0 + s - 1) / s; (cy + 1) * s <= region.y1; ++cy)
            for (int cx = (region.x0 + s - 1) / s; (cx + 1) * s <= region.x1; ++cx)
                count += dm.values->data[static_cast<std::int64_t>(cy) * Wm + cx];
        rows.push_back({m, count});
    }
    return rows;
}

}  // namespace limm
