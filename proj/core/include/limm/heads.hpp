#pragma once

// GSA feature supplement, dual-branch counting head, large-head filtering,
// the point-supervision density loss, and the combined training objective.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "limm/ops.hpp"
#include "limm/params.hpp"
#include "limm/windowing.hpp"

namespace limm {

/// Stride-8 density map over the full image; sum == predicted count.
template <class T>
struct DensityMap {
    Tensor<T> values;  // [1, H/8, W/8]
    int stride = 8;

    double total() const {
        double s = 0;
        for (T v : values->data) s += v;
        return s;
    }
};

struct GsaConfig {
    int heads = 8;
    int dModel = 0;

    void validate() const {
        if (heads < 1) throw InvalidArgument("GsaConfig: heads must be >= 1");
        if (dModel < 1 || dModel % heads != 0)
            throw InvalidArgument("GsaConfig: dModel must be a positive multiple of heads");
    }
};

/// Global sub-sampled attention: every stage-4 position queries one pooled
/// key/value per window, so information crosses window boundaries in a
/// single cheap step.
template <class T>
class GsaLayer {
  public:
    GsaLayer(const GsaConfig& cfg, ParamRegistry<T>& reg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int C = cfg_.dModel;
        q_w_ = reg.create("gsa.q_w", {C, C});
        q_b_ = reg.create("gsa.q_b", {C});
        k_w_ = reg.create("gsa.k_w", {C, C});
        k_b_ = reg.create("gsa.k_b", {C});
        v_w_ = reg.create("gsa.v_w", {C, C});
        v_b_ = reg.create("gsa.v_b", {C});
        o_w_ = reg.create("gsa.o_w", {C, C});
        o_b_ = reg.create("gsa.o_b", {C});
        for (auto& w : {q_w_, k_w_, v_w_, o_w_}) init_trunc_normal(w, rng);
    }

    const GsaConfig& config() const { return cfg_; }

    /// stage4: [nWin, C, h, h]; rows/cols give the window grid layout.
    /// Returns the same layout with globally mixed features.
    Tensor<T> forward(Graph<T>* g, const Tensor<T>& stage4, int rows, int cols) {
        if (stage4->shape.size() != 4) throw InvalidArgument("gsa_layer: expected [nWin,C,h,w]");
        const int nWin = stage4->shape[0], C = stage4->shape[1], h = stage4->shape[2];
        if (stage4->shape[3] != h) throw InvalidArgument("gsa_layer: windows must be square");
        if (nWin < 1 || nWin != rows * cols) throw InvalidArgument("gsa_layer: window grid mismatch");
        if (C != cfg_.dModel) throw InvalidArgument("gsa_layer: channel count does not match dModel");
        const int H = cfg_.heads, dh = C / H;

        WindowGrid<T> fg;
        fg.windows = stage4;
        fg.ws = h;
        fg.rows = rows;
        fg.cols = cols;
        fg.origC = C;
        fg.origH = rows * h;
        fg.origW = cols * h;
        auto full = fold(g, fg);  // [C, Hf, Wf]
        const int Np = fg.origH * fg.origW;

        auto q_in = ops::permute(g, ops::reshape(g, full, {C, Np}), {1, 0});  // [Np, C]
        auto Q = ops::linear(g, q_in, q_w_, q_b_);
        auto pooled = ops::reshape(g, ops::pool2d(g, stage4, ops::PoolKind::GlobalMean), {nWin, C});
        auto K = ops::linear(g, pooled, k_w_, k_b_);
        auto V = ops::linear(g, pooled, v_w_, v_b_);

        auto head_slice = [&](const Tensor<T>& m, int n, int head) {
            auto s = ops::reshape(g, m, {n, H, dh});
            s = ops::permute(g, s, {1, 0, 2});
            s = ops::select_batch(g, s, {head});
            return ops::reshape(g, s, {n, dh});
        };
        lastAttention_.clear();
        std::vector<Tensor<T>> outs;
        const T invSqrt = T(1) / std::sqrt(static_cast<T>(dh));
        for (int hd = 0; hd < H; ++hd) {
            auto Qh = head_slice(Q, Np, hd);
            auto Kh = head_slice(K, nWin, hd);
            auto Vh = head_slice(V, nWin, hd);
            auto scores = ops::scale(g, ops::matmul(g, Qh, Kh, false, true), invSqrt);
            auto A = ops::softmax(g, scores, 1);  // [Np, nWin]
            lastAttention_.push_back(std::vector<T>(A->data.begin(), A->data.end()));
            outs.push_back(ops::matmul(g, A, Vh));
        }
        auto y = ops::linear(g, ops::concat(g, outs, 1), o_w_, o_b_);  // [Np, C]
        full = ops::reshape(g, ops::permute(g, y, {1, 0}), {C, fg.origH, fg.origW});
        return partition(g, full, h).windows;
    }

    /// Per-head softmax weights from the last forward, [Np * nWin] each.
    const std::vector<std::vector<T>>& last_attention() const { return lastAttention_; }

  private:
    GsaConfig cfg_;
    Tensor<T> q_w_, q_b_, k_w_, k_b_, v_w_, v_b_, o_w_, o_b_;
    std::vector<std::vector<T>> lastAttention_;
};

/// Dual-branch decoder: two 2x upsample blocks (transposed conv summed with
/// bilinear + 1x1 conv, then LN + GELU), channels halving per block, then a
/// 1x1 projection to one nonnegative channel.
template <class T>
class CountingHead {
  public:
    CountingHead(const std::string& prefix, int cf, ParamRegistry<T>& reg, Rng& rng) : cf_(cf) {
        if (cf < 4 || cf % 4 != 0) throw InvalidArgument("CountingHead: channels must be a multiple of 4");
        int cin = cf;
        for (int i = 0; i < 2; ++i) {
            const int cout = cin / 2;
            const std::string pre = prefix + ".up" + std::to_string(i) + ".";
            Block b;
            b.t_w = reg.create(pre + "t_w", {cin, cout, 2, 2});
            b.t_b = reg.create(pre + "t_b", {cout});
            b.c_w = reg.create(pre + "c_w", {cout, cin, 1, 1});
            b.c_b = reg.create(pre + "c_b", {cout});
            b.ln_g = reg.create(pre + "ln_g", {cout});
            b.ln_b = reg.create(pre + "ln_b", {cout});
            init_trunc_normal(b.t_w, rng);
            init_trunc_normal(b.c_w, rng);
            init_constant(b.ln_g, T(1));
            blocks_.push_back(b);
            cin = cout;
        }
        f_w_ = reg.create(prefix + ".f_w", {1, cin, 1, 1});
        f_b_ = reg.create(prefix + ".f_b", {1});
        init_trunc_normal(f_w_, rng);
    }

    int input_channels() const { return cf_; }

    /// [nWin, Cf, h, w] -> [nWin, 1, 4h, 4w], nonnegative.
    Tensor<T> forward(Graph<T>* g, const Tensor<T>& x) const {
        if (x->shape.size() != 4 || x->shape[1] != cf_)
            throw InvalidArgument("CountingHead: bad input shape");
        auto y = x;
        for (const auto& b : blocks_) {
            auto up = ops::conv_transpose2d(g, y, b.t_w, b.t_b, 2, 0);
            auto bi = ops::conv2d(g, ops::bilinear_upsample2x(g, y), b.c_w, b.c_b, 1, 0);
            y = ops::add(g, up, bi);
            y = ops::permute(g, y, {0, 2, 3, 1});
            y = ops::layer_norm(g, y, b.ln_g, b.ln_b, T(1e-6));
            y = ops::permute(g, y, {0, 3, 1, 2});
            y = ops::gelu(g, y);
        }
        y = ops::conv2d(g, y, f_w_, f_b_, 1, 0);
        return ops::relu(g, y);
    }

  private:
    struct Block {
        Tensor<T> t_w, t_b, c_w, c_b, ln_g, ln_b;
    };
    int cf_;
    std::vector<Block> blocks_;
    Tensor<T> f_w_, f_b_;
};

/// Folds per-window density tiles into a stride-8 map over the source image.
template <class T>
DensityMap<T> density_from_tiles(Graph<T>* g, const Tensor<T>& tiles, const WindowGrid<T>& pixelMeta) {
    if (tiles->shape.size() != 4 || tiles->shape[1] != 1)
        throw InvalidArgument("density_from_tiles: expected [nWin,1,ts,ts]");
    if (pixelMeta.origH % 8 != 0 || pixelMeta.origW % 8 != 0)
        throw InvalidArgument("density_from_tiles: image size must be a multiple of 8");
    WindowGrid<T> dg;
    dg.windows = tiles;
    dg.ws = tiles->shape[2];
    dg.rows = pixelMeta.rows;
    dg.cols = pixelMeta.cols;
    dg.origC = 1;
    dg.origH = pixelMeta.origH / 8;
    dg.origW = pixelMeta.origW / 8;
    dg.padBottom = dg.rows * dg.ws - dg.origH;
    dg.padRight = dg.cols * dg.ws - dg.origW;
    if (dg.padBottom < 0 || dg.padRight < 0)
        throw InvalidArgument("density_from_tiles: tile size inconsistent with window grid");
    DensityMap<T> map;
    map.values = fold(g, dg);
    return map;
}

struct Annotations {
    std::vector<std::pair<double, double>> points;
    std::vector<double> sizes;
};

/// Keeps annotations with head size strictly above the threshold.
inline Annotations filter_large_heads(const std::vector<std::pair<double, double>>& points,
                                      const std::vector<double>& sizes, double sizeThreshold = 50.0) {
    if (points.size() != sizes.size())
        throw InvalidArgument("filter_large_heads: points/sizes length mismatch");
    Annotations out;
    for (size_t i = 0; i < points.size(); ++i)
        if (sizes[i] > sizeThreshold) {
            out.points.push_back(points[i]);
            out.sizes.push_back(sizes[i]);
        }
    return out;
}

/// Point-supervision loss on a density map. Each pixel's mass is split
/// across annotations by the posterior p(n|m) proportional to
/// exp(-d(m,n)^2 / 2 sigma^2); the per-annotation expected count is pulled
/// toward 1 under an L1 penalty. With no annotations the whole predicted
/// mass is penalized.
template <class T>
Tensor<T> bayesian_loss(Graph<T>* g, const Tensor<T>& pred,
                        const std::vector<std::pair<double, double>>& points, double sigma = 8.0) {
    if (sigma <= 0) throw InvalidArgument("bayesian_loss: sigma must be positive");
    if (pred->shape.size() != 3 || pred->shape[0] != 1)
        throw InvalidArgument("bayesian_loss: expected [1,Hm,Wm] density map");
    const int Hm = pred->shape[1], Wm = pred->shape[2];
    const std::int64_t M = static_cast<std::int64_t>(Hm) * Wm;
    const int n = static_cast<int>(points.size());

    if (n == 0) return ops::sum_all(g, pred);

    // posterior over annotations per pixel, computed in log domain
    std::vector<double> post(static_cast<std::int64_t>(n) * M);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> logit(n);
    for (int i = 0; i < Hm; ++i)
        for (int j = 0; j < Wm; ++j) {
            const double cx = j + 0.5, cy = i + 0.5;
            double mx = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < n; ++a) {
                const double dx = cx - points[a].first, dy = cy - points[a].second;
                logit[a] = -(dx * dx + dy * dy) * inv2s2;
                mx = std::max(mx, logit[a]);
            }
            double z = 0;
            for (int a = 0; a < n; ++a) z += std::exp(logit[a] - mx);
            const std::int64_t m = static_cast<std::int64_t>(i) * Wm + j;
            for (int a = 0; a < n; ++a) post[a * M + m] = std::exp(logit[a] - mx) / z;
        }

    std::vector<double> expected(n, 0.0);
    for (int a = 0; a < n; ++a)
        for (std::int64_t m = 0; m < M; ++m) expected[a] += post[a * M + m] * pred->data[m];
    double lossVal = 0;
    for (int a = 0; a < n; ++a) lossVal += std::abs(1.0 - expected[a]);

    auto out = scalar_tensor<T>(static_cast<T>(lossVal));
    check_finite(out, "bayesian_loss");
    if (g && pred->requires_grad) {
        ops::mark_output(out);
        pred->ensure_grad();
        auto postShared = std::make_shared<std::vector<double>>(std::move(post));
        auto expShared = std::make_shared<std::vector<double>>(std::move(expected));
        g->record([out, pred, postShared, expShared, n, M]() {
            const T go = out->grad[0];
            for (int a = 0; a < n; ++a) {
                const double r = 1.0 - (*expShared)[a];
                const double sgn = (r > 0) - (r < 0);  // sign(0) == 0
                if (sgn == 0) continue;
                const double* pa = &(*postShared)[static_cast<std::int64_t>(a) * M];
                for (std::int64_t m = 0; m < M; ++m)
                    pred->grad[m] -= go * static_cast<T>(sgn * pa[m]);
            }
        });
    }
    return out;
}

/// L = L_fine + lambda1 * L_global + lambda2 * L_contrastive. A null
/// contrastive term contributes zero.
template <class T>
Tensor<T> total_loss(Graph<T>* g, const Tensor<T>& fineLoss, const Tensor<T>& globalLoss,
                     const Tensor<T>& contrastiveLoss, T lambda1 = T(1), T lambda2 = T(10)) {
    auto out = ops::add(g, fineLoss, ops::scale(g, globalLoss, lambda1));
    if (contrastiveLoss) out = ops::add(g, out, ops::scale(g, contrastiveLoss, lambda2));
    return out;
}

}  // namespace limm
