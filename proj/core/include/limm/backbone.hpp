#pragma once

// Window-partitioned ConvNeXt-style 4-stage encoder with a single shifted
// pass in stage-1 block-2 and feature taps at stages 3 and 4.

#include <iostream>
#include <string>
#include <vector>

#include "limm/ops.hpp"
#include "limm/params.hpp"
#include "limm/windowing.hpp"

namespace limm {

struct BackboneConfig {
    std::vector<int> depths{2, 2, 4, 2};
    std::vector<int> dims{32, 64, 128, 256};
    int ws = 64;  // input window side in pixels
    bool shiftEnabled = true;
    int dwKernel = 7;

    void validate() const {
        if (depths.size() != 4 || dims.size() != 4) throw InvalidArgument("BackboneConfig: need 4 stages");
        if (ws % 32 != 0 || ws < 32) throw InvalidArgument("BackboneConfig: ws must be a positive multiple of 32");
        for (int i = 1; i < 4; ++i)
            if (dims[i] <= dims[i - 1]) throw InvalidArgument("BackboneConfig: dims must be strictly increasing");
        for (int d : depths)
            if (d < 1) throw InvalidArgument("BackboneConfig: each stage needs at least one block");
    }

    /// The paper-scale preset; far too large to train at desk scale but
    /// exercised by the receptive-field instruments.
    static BackboneConfig convnext_tiny() {
        BackboneConfig c;
        c.depths = {3, 3, 9, 3};
        c.dims = {96, 192, 384, 768};
        c.ws = 128;
        return c;
    }
};

template <class T>
struct ConvNeXtBlockParams {
    Tensor<T> dw_w, dw_b;       // depthwise conv [C,1,k,k]
    Tensor<T> ln_g, ln_b;       // channel layer norm
    Tensor<T> pw1_w, pw1_b;     // expand C -> 4C
    Tensor<T> pw2_w, pw2_b;     // project 4C -> C
    Tensor<T> layer_scale;      // per-channel residual scale
};

/// depthwise 7x7 -> LN -> 1x1 expand 4C -> GELU -> 1x1 project C
/// -> layer scale -> residual. Shape preserving on [n,C,h,w].
template <class T>
Tensor<T> convnext_block(Graph<T>* g, const Tensor<T>& x, const ConvNeXtBlockParams<T>& p) {
    if (x->shape.size() != 4) throw InvalidArgument("convnext_block: expected [n,C,h,w]");
    const int C = x->shape[1];
    if (p.dw_w->shape[0] != C) throw InvalidArgument("convnext_block: channel mismatch");
    const int k = p.dw_w->shape[2];
    auto y = ops::conv2d(g, x, p.dw_w, p.dw_b, 1, (k - 1) / 2, 1, C);
    y = ops::permute(g, y, {0, 2, 3, 1});  // NCHW -> NHWC
    y = ops::layer_norm(g, y, p.ln_g, p.ln_b, T(1e-6));
    y = ops::linear(g, y, p.pw1_w, p.pw1_b);
    y = ops::gelu(g, y);
    y = ops::linear(g, y, p.pw2_w, p.pw2_b);
    y = ops::scale_channels(g, y, p.layer_scale);
    y = ops::permute(g, y, {0, 3, 1, 2});  // back to NCHW
    return ops::add(g, y, x);
}

template <class T>
struct BackboneTaps {
    Tensor<T> stage3;      // [nWin, dims[2], ws/16, ws/16]
    Tensor<T> stage4;      // [nWin, dims[3], ws/32, ws/32]
    WindowGrid<T> meta;    // pixel-space window bookkeeping
};

template <class T>
class Backbone {
  public:
    Backbone(const BackboneConfig& cfg, ParamRegistry<T>& reg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        if (cfg_.shiftEnabled && cfg_.depths[0] < 2) {
            std::cerr << "[limm] warning: shifted pass needs depths[0] >= 2; disabling shift\n";
            cfg_.shiftEnabled = false;
        }
        stem_w_ = reg.create("backbone.stem.w", {cfg_.dims[0], 3, 4, 4});
        stem_b_ = reg.create("backbone.stem.b", {cfg_.dims[0]});
        stem_ln_g_ = reg.create("backbone.stem.ln_g", {cfg_.dims[0]});
        stem_ln_b_ = reg.create("backbone.stem.ln_b", {cfg_.dims[0]});
        init_trunc_normal(stem_w_, rng);
        init_constant(stem_ln_g_, T(1));
        for (int s = 0; s < 4; ++s) {
            const int C = cfg_.dims[s];
            std::vector<ConvNeXtBlockParams<T>> stage;
            for (int b = 0; b < cfg_.depths[s]; ++b) {
                const std::string pre = "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b) + ".";
                ConvNeXtBlockParams<T> blk;
                blk.dw_w = reg.create(pre + "dw_w", {C, 1, cfg_.dwKernel, cfg_.dwKernel});
                blk.dw_b = reg.create(pre + "dw_b", {C});
                blk.ln_g = reg.create(pre + "ln_g", {C});
                blk.ln_b = reg.create(pre + "ln_b", {C});
                blk.pw1_w = reg.create(pre + "pw1_w", {4 * C, C});
                blk.pw1_b = reg.create(pre + "pw1_b", {4 * C});
                blk.pw2_w = reg.create(pre + "pw2_w", {C, 4 * C});
                blk.pw2_b = reg.create(pre + "pw2_b", {C});
                blk.layer_scale = reg.create(pre + "layer_scale", {C});
                init_trunc_normal(blk.dw_w, rng);
                init_constant(blk.ln_g, T(1));
                init_trunc_normal(blk.pw1_w, rng);
                init_trunc_normal(blk.pw2_w, rng);
                init_constant(blk.layer_scale, T(1e-6));
                stage.push_back(blk);
            }
            stages_.push_back(std::move(stage));
            if (s < 3) {
                const std::string pre = "backbone.down" + std::to_string(s + 1) + ".";
                DownsampleParams ds;
                ds.ln_g = reg.create(pre + "ln_g", {C});
                ds.ln_b = reg.create(pre + "ln_b", {C});
                ds.w = reg.create(pre + "w", {cfg_.dims[s + 1], C, 2, 2});
                ds.b = reg.create(pre + "b", {cfg_.dims[s + 1]});
                init_constant(ds.ln_g, T(1));
                init_trunc_normal(ds.w, rng);
                downs_.push_back(ds);
            }
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    /// Full forward pass over one image: partition, stem, stages with the
    /// optional one-shot shifted pass in stage-1 block-2, taps at 3 and 4.
    BackboneTaps<T> forward(Graph<T>* g, const Tensor<T>& image) const {
        if (image->shape.size() != 3 || image->shape[0] != 3)
            throw InvalidArgument("forward_backbone: expected [3,H,W] image");
        if (image->shape[1] < cfg_.ws || image->shape[2] < cfg_.ws)
            throw InvalidArgument("forward_backbone: image smaller than one window");
        WindowGrid<T> grid = partition(g, image, cfg_.ws);
        // stem: 4x4 stride-4 conv + channel LN
        auto x = ops::conv2d(g, grid.windows, stem_w_, stem_b_, 4, 0);
        x = channel_ln(g, x, stem_ln_g_, stem_ln_b_);

        // stage 1, block 1
        x = convnext_block(g, x, stages_[0][0]);
        int next_block = 1;
        if (cfg_.shiftEnabled && cfg_.depths[0] >= 2) {
            // one-shot shifted pass at stage-1 feature resolution (stride 4)
            const int wsf = cfg_.ws / 4;
            const int shift = wsf / 2;
            auto fg = feature_grid(x, grid);
            auto full = fold(g, fg);
            full = cyclic_shift(g, full, shift, shift);
            auto shifted = partition(g, full, wsf);
            shifted.windows = convnext_block(g, shifted.windows, stages_[0][next_block]);
            auto back = fold(g, shifted);
            back = cyclic_unshift(g, back, shift, shift);
            auto reparted = partition(g, back, wsf);
            x = reparted.windows;
            next_block = 2;
        }
        for (int b = next_block; b < cfg_.depths[0]; ++b) x = convnext_block(g, x, stages_[0][b]);

        BackboneTaps<T> taps;
        for (int s = 1; s < 4; ++s) {
            x = channel_ln(g, x, downs_[s - 1].ln_g, downs_[s - 1].ln_b);
            x = ops::conv2d(g, x, downs_[s - 1].w, downs_[s - 1].b, 2, 0);
            for (int b = 0; b < cfg_.depths[s]; ++b) x = convnext_block(g, x, stages_[s][b]);
            if (s == 2) taps.stage3 = x;
        }
        taps.stage4 = x;
        taps.meta = grid;
        taps.meta.windows = nullptr;  // pixel windows are not needed downstream
        return taps;
    }

  private:
    struct DownsampleParams {
        Tensor<T> ln_g, ln_b, w, b;
    };

    static Tensor<T> channel_ln(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& gm, const Tensor<T>& bt) {
        auto y = ops::permute(g, x, {0, 2, 3, 1});
        y = ops::layer_norm(g, y, gm, bt, T(1e-6));
        return ops::permute(g, y, {0, 3, 1, 2});
    }

    /// Wraps a per-window feature stack in fold-compatible metadata
    /// (features cover the padded grid exactly; no extra pad).
    static WindowGrid<T> feature_grid(const Tensor<T>& wins, const WindowGrid<T>& pixelGrid) {
        WindowGrid<T> fg;
        fg.windows = wins;
        fg.ws = wins->shape[2];
        fg.rows = pixelGrid.rows;
        fg.cols = pixelGrid.cols;
        fg.origC = wins->shape[1];
        fg.origH = fg.rows * fg.ws;
        fg.origW = fg.cols * fg.ws;
        return fg;
    }

    BackboneConfig cfg_;
    Tensor<T> stem_w_, stem_b_, stem_ln_g_, stem_ln_b_;
    std::vector<std::vector<ConvNeXtBlockParams<T>>> stages_;
    std::vector<DownsampleParams> downs_;
};

}  // namespace limm
