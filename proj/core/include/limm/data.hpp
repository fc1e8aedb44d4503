#pragma once

// Synthetic crowd scenes, ground-truth density construction, annotation
// geometry, augmentation, and dataset I/O (PNG images + JSONL annotations).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "limm/rng.hpp"

namespace limm {

/// An image plus point annotations; the unit of training/eval data.
struct CrowdScene {
    int height = 0, width = 0;
    std::vector<float> image;  // 3*H*W, CHW, values in [0,1]
    std::vector<std::pair<double, double>> points;  // (x, y) pixel coords
    std::vector<double> sizes;                      // per-point head size; empty == absent
    std::string split;                              // train / val / test
    std::string regime;                             // low / med / high / large / blank

    int count() const { return static_cast<int>(points.size()); }
    void validate() const;
};

struct RegimeRange {
    int lo = 0, hi = 0;
};

struct SceneGenConfig {
    int height = 256, width = 256;
    RegimeRange low{1, 8}, med{8, 30}, high{30, 80};
    RegimeRange large{1, 6};
    double headSizeLogMean = 2.48;  // ~12 px median
    double headSizeLogStd = 0.25;
    double headSizeMin = 6.0, headSizeMax = 24.0;
    double largeSizeMin = 55.0, largeSizeMax = 90.0;
    double largeFraction = 0.15;  // fraction of scenes drawn as large-head scenes
    int clutterBlobs = 6;
    std::uint64_t seed = 0;
};

/// One scene for the given regime ("low"/"med"/"high"/"large"/"blank").
/// Deterministic in (cfg, regime, rng state).
CrowdScene generate_scene(const SceneGenConfig& cfg, const std::string& regime, Rng& rng);

/// `count` scenes cycling low/med/high with cfg.largeFraction of large-head
/// scenes; worker i uses rng seed cfg.seed + firstIndex + i.
std::vector<CrowdScene> generate_dataset(const SceneGenConfig& cfg, int count, const std::string& split,
                                         int firstIndex = 0);

/// Mean distance to the (up to) three nearest neighbors per point.
/// A single point falls back to `defaultSize` with a warning.
std::vector<double> head_size_3nn(const std::vector<std::pair<double, double>>& points,
                                  double defaultSize = 50.0);

/// s = sqrt(h * w).
double size_from_bbox(double h, double w);

struct SizeHistogram {
    double binWidth = 0;
    std::vector<std::int64_t> counts;
    double mean = 0;
    double fractionBelow50 = 0;
    std::int64_t total = 0;
};

SizeHistogram size_histogram(const std::vector<CrowdScene>& scenes, int bins);

/// Geometry-adaptive ground-truth density (beta * mean k-NN distance as the
/// per-head sigma, truncated at 4 sigma, renormalized to unit mass).
/// Returns a full-resolution H*W map; total mass == point count.
std::vector<double> gt_density(const CrowdScene& scene, double beta = 0.3, int k = 3);

/// Sum-pool with kernel == stride; conserves mass exactly.
std::vector<double> downsample_density(const std::vector<double>& dense, int H, int W, int stride = 8);

struct AugmentConfig {
    double scaleLo = 0.75, scaleHi = 1.25;
    int cropSize = 512;
    double flipProb = 0.5;
};

/// Random scale, crop (reflect-padded when needed), horizontal flip.
CrowdScene augment(const CrowdScene& scene, const AugmentConfig& cfg, Rng& rng);

/// Writes images/scene_NNNNN.png + annotations.jsonl under `dir`.
void save_dataset(const std::string& dir, const std::vector<CrowdScene>& scenes);
std::vector<CrowdScene> load_dataset(const std::string& dir);

}  // namespace limm
