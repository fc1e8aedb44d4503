#include "limm/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "limm/error.hpp"
#include "limm/png_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace limm {

void CrowdScene::validate() const {
    if (height <= 0 || width <= 0 || image.size() != static_cast<size_t>(3) * height * width)
        throw InvalidArgument("CrowdScene: inconsistent image buffer");
    for (const auto& [x, y] : points)
        if (x < 0 || x > width || y < 0 || y > height)
            throw InvalidArgument("CrowdScene: point outside image bounds");
    if (!sizes.empty()) {
        if (sizes.size() != points.size()) throw InvalidArgument("CrowdScene: sizes/points length mismatch");
        for (double s : sizes)
            if (s <= 0) throw InvalidArgument("CrowdScene: nonpositive head size");
    }
}

namespace {

inline float& px(std::vector<float>& img, int W, int H, int c, int y, int x) {
    return img[(static_cast<size_t>(c) * H + y) * W + x];
}

/// Low-frequency noise: a coarse normal grid bilinearly stretched to H x W.
std::vector<float> low_freq_noise(int H, int W, int grid, Rng& rng) {
    std::vector<double> coarse(static_cast<size_t>(grid) * grid);
    for (auto& v : coarse) v = rng.normal();
    std::vector<float> out(static_cast<size_t>(H) * W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double gy = (y + 0.5) / H * (grid - 1);
            const double gx = (x + 0.5) / W * (grid - 1);
            const int y0 = std::min(static_cast<int>(gy), grid - 2);
            const int x0 = std::min(static_cast<int>(gx), grid - 2);
            const double fy = gy - y0, fx = gx - x0;
            const double v00 = coarse[y0 * grid + x0], v01 = coarse[y0 * grid + x0 + 1];
            const double v10 = coarse[(y0 + 1) * grid + x0], v11 = coarse[(y0 + 1) * grid + x0 + 1];
            out[static_cast<size_t>(y) * W + x] =
                static_cast<float>((v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy);
        }
    return out;
}

void render_background(CrowdScene& s, const SceneGenConfig& cfg, Rng& rng) {
    const int H = s.height, W = s.width;
    auto lf = low_freq_noise(H, W, 8, rng);
    const float base = static_cast<float>(0.5 + 0.1 * rng.uniform());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const float v = base + 0.08f * lf[static_cast<size_t>(y) * W + x];
            for (int c = 0; c < 3; ++c) px(s.image, W, H, c, y, x) = v;
        }
    // clutter: soft low-contrast ellipses that are not heads
    for (int b = 0; b < cfg.clutterBlobs; ++b) {
        const double cx = rng.uniform(0, W), cy = rng.uniform(0, H);
        const double rx = rng.uniform(10, 40), ry = rng.uniform(10, 40);
        const float dv = static_cast<float>(rng.uniform(-0.08, 0.08));
        const int x0 = std::max(0, static_cast<int>(cx - rx)), x1 = std::min(W - 1, static_cast<int>(cx + rx));
        const int y0 = std::max(0, static_cast<int>(cy - ry)), y1 = std::min(H - 1, static_cast<int>(cy + ry));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double d2 = (x - cx) * (x - cx) / (rx * rx) + (y - cy) * (y - cy) / (ry * ry);
                if (d2 < 1.0) {
                    const float w = static_cast<float>(1.0 - d2);
                    for (int c = 0; c < 3; ++c) px(s.image, W, H, c, y, x) += dv * w;
                }
            }
    }
    // fine pixel noise
    for (auto& v : s.image) v += static_cast<float>(rng.uniform(-0.02, 0.02));
}

/// Shaded disc with a dark rim; clearly distinct from the soft clutter.
void render_head(CrowdScene& s, double cx, double cy, double size, Rng& rng) {
    const int H = s.height, W = s.width;
    const double r = size / 2.0;
    const float tone = static_cast<float>(rng.uniform(0.08, 0.30));
    const float tint[3] = {static_cast<float>(rng.uniform(-0.03, 0.03)),
                           static_cast<float>(rng.uniform(-0.03, 0.03)),
                           static_cast<float>(rng.uniform(-0.03, 0.03))};
    const int x0 = std::max(0, static_cast<int>(cx - r - 1)), x1 = std::min(W - 1, static_cast<int>(cx + r + 1));
    const int y0 = std::max(0, static_cast<int>(cy - r - 1)), y1 = std::min(H - 1, static_cast<int>(cy + r + 1));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d = std::sqrt((x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy));
            if (d >= r) continue;
            const double u = d / r;
            float v;
            if (u > 0.8)
                v = tone * 0.45f;  // rim
            else
                v = tone + 0.22f * static_cast<float>(1.0 - u * u);  // shaded crown
            for (int c = 0; c < 3; ++c) px(s.image, W, H, c, y, x) = v + tint[c];
        }
}

}  // namespace

CrowdScene generate_scene(const SceneGenConfig& cfg, const std::string& regime, Rng& rng) {
    CrowdScene s;
    s.height = cfg.height;
    s.width = cfg.width;
    s.image.assign(static_cast<size_t>(3) * s.height * s.width, 0.f);
    s.regime = regime;
    render_background(s, cfg, rng);

    RegimeRange range{0, 0};
    bool large = false;
    if (regime == "low") range = cfg.low;
    else if (regime == "med") range = cfg.med;
    else if (regime == "high") range = cfg.high;
    else if (regime == "large") { range = cfg.large; large = true; }
    else if (regime == "blank") range = {0, 0};
    else throw InvalidArgument("generate_scene: unknown regime " + regime);

    int k = range.lo + (range.hi > range.lo ? rng.below(range.hi - range.lo + 1) : 0);
    std::vector<std::pair<double, double>> pts;
    std::vector<double> sizes;
    int failures = 0;
    while (static_cast<int>(pts.size()) < k) {
        double size;
        if (large) {
            size = rng.uniform(cfg.largeSizeMin, cfg.largeSizeMax);
        } else {
            size = std::exp(cfg.headSizeLogMean + cfg.headSizeLogStd * rng.normal());
            size = std::clamp(size, cfg.headSizeMin, cfg.headSizeMax);
        }
        const double r = size / 2.0;
        if (2 * r >= s.width || 2 * r >= s.height) { failures++; continue; }
        const double cx = rng.uniform(r, s.width - r);
        const double cy = rng.uniform(r, s.height - r);
        bool ok = true;
        for (size_t i = 0; i < pts.size(); ++i) {
            const double minSep = 0.55 * (r + sizes[i] / 2.0);
            const double dx = cx - pts[i].first, dy = cy - pts[i].second;
            if (dx * dx + dy * dy < minSep * minSep) { ok = false; break; }
        }
        if (!ok) {
            if (++failures > 60 * k + 200) {
                std::cerr << "[limm] warning: separation unsatisfiable, reducing scene count to "
                          << pts.size() << "\n";
                break;
            }
            continue;
        }
        pts.emplace_back(cx, cy);
        sizes.push_back(size);
    }
    // render back-to-front by size so small heads stay visible
    std::vector<int> order(pts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sizes[a] > sizes[b]; });
    for (int i : order) render_head(s, pts[i].first, pts[i].second, sizes[i], rng);
    for (auto& v : s.image) v = std::clamp(v, 0.f, 1.f);
    s.points = std::move(pts);
    s.sizes = std::move(sizes);
    s.validate();
    return s;
}

std::vector<CrowdScene> generate_dataset(const SceneGenConfig& cfg, int count, const std::string& split,
                                         int firstIndex) {
    static const char* cycle[3] = {"low", "med", "high"};
    std::vector<CrowdScene> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        const int idx = firstIndex + i;
        Rng rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(idx));
        std::string regime;
        if (cfg.largeFraction > 0 && rng.uniform() < cfg.largeFraction) regime = "large";
        else regime = cycle[idx % 3];
        auto s = generate_scene(cfg, regime, rng);
        s.split = split;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<double> head_size_3nn(const std::vector<std::pair<double, double>>& points, double defaultSize) {
    const int n = static_cast<int>(points.size());
    std::vector<double> sizes(n, defaultSize);
    if (n == 1) {
        std::cerr << "[limm] warning: single annotation; using default head size " << defaultSize << "\n";
        return sizes;
    }
    for (int i = 0; i < n; ++i) {
        std::vector<double> d;
        d.reserve(n - 1);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const double dx = points[i].first - points[j].first;
            const double dy = points[i].second - points[j].second;
            d.push_back(std::sqrt(dx * dx + dy * dy));
        }
        const int use = std::min<int>(3, static_cast<int>(d.size()));
        std::partial_sort(d.begin(), d.begin() + use, d.end());
        double s = 0;
        for (int t = 0; t < use; ++t) s += d[t];
        sizes[i] = s / use;
    }
    return sizes;
}

double size_from_bbox(double h, double w) {
    if (h <= 0 || w <= 0) throw InvalidArgument("size_from_bbox: dimensions must be positive");
    return std::sqrt(h * w);
}

SizeHistogram size_histogram(const std::vector<CrowdScene>& scenes, int bins) {
    if (bins < 1) throw InvalidArgument("size_histogram: need at least one bin");
    std::vector<double> all;
    for (const auto& s : scenes) {
        if (!s.sizes.empty()) {
            all.insert(all.end(), s.sizes.begin(), s.sizes.end());
        } else if (!s.points.empty()) {
            auto est = head_size_3nn(s.points);
            all.insert(all.end(), est.begin(), est.end());
        }
    }
    SizeHistogram h;
    h.counts.assign(bins, 0);
    h.total = static_cast<std::int64_t>(all.size());
    if (all.empty()) return h;
    const double mx = *std::max_element(all.begin(), all.end());
    h.binWidth = mx > 0 ? mx / bins : 1.0;
    double sum = 0;
    std::int64_t below = 0;
    for (double v : all) {
        int b = h.binWidth > 0 ? static_cast<int>(v / h.binWidth) : 0;
        h.counts[std::min(b, bins - 1)]++;
        sum += v;
        if (v < 50.0) below++;
    }
    h.mean = sum / h.total;
    h.fractionBelow50 = static_cast<double>(below) / h.total;
    return h;
}

std::vector<double> gt_density(const CrowdScene& scene, double beta, int k) {
    const int H = scene.height, W = scene.width;
    std::vector<double> out(static_cast<size_t>(H) * W, 0.0);
    const int n = scene.count();
    for (int i = 0; i < n; ++i) {
        double sigma = 4.0;  // sparse-scene fallback
        if (n >= 2) {
            std::vector<double> d;
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const double dx = scene.points[i].first - scene.points[j].first;
                const double dy = scene.points[i].second - scene.points[j].second;
                d.push_back(std::sqrt(dx * dx + dy * dy));
            }
            const int use = std::min<int>(k, static_cast<int>(d.size()));
            std::partial_sort(d.begin(), d.begin() + use, d.end());
            double s = 0;
            for (int t = 0; t < use; ++t) s += d[t];
            sigma = beta * (s / use);
            if (sigma < 0.5) sigma = 0.5;
        }
        const double cx = scene.points[i].first, cy = scene.points[i].second;
        const int rad = static_cast<int>(std::ceil(4.0 * sigma));
        const int x0 = std::max(0, static_cast<int>(cx) - rad), x1 = std::min(W - 1, static_cast<int>(cx) + rad);
        const int y0 = std::max(0, static_cast<int>(cy) - rad), y1 = std::min(H - 1, static_cast<int>(cy) + rad);
        double mass = 0;
        std::vector<double> blob(static_cast<size_t>(y1 - y0 + 1) * (x1 - x0 + 1), 0.0);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double d2 = dx * dx + dy * dy;
                if (d2 > 16.0 * sigma * sigma) continue;
                const double v = std::exp(-d2 / (2.0 * sigma * sigma));
                blob[static_cast<size_t>(y - y0) * (x1 - x0 + 1) + (x - x0)] = v;
                mass += v;
            }
        if (mass <= 0) {  // degenerate: drop the whole unit on the nearest pixel
            const int yy = std::clamp(static_cast<int>(cy), 0, H - 1);
            const int xx = std::clamp(static_cast<int>(cx), 0, W - 1);
            out[static_cast<size_t>(yy) * W + xx] += 1.0;
            continue;
        }
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                out[static_cast<size_t>(y) * W + x] +=
                    blob[static_cast<size_t>(y - y0) * (x1 - x0 + 1) + (x - x0)] / mass;
    }
    return out;
}

std::vector<double> downsample_density(const std::vector<double>& dense, int H, int W, int stride) {
    if (H % stride != 0 || W % stride != 0)
        throw InvalidArgument("downsample_density: dimensions must be divisible by stride");
    const int Oh = H / stride, Ow = W / stride;
    std::vector<double> out(static_cast<size_t>(Oh) * Ow, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            out[static_cast<size_t>(y / stride) * Ow + x / stride] += dense[static_cast<size_t>(y) * W + x];
    return out;
}

namespace {

/// Reflect index into [0, n) without repeating the edge sample.
int reflect(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

}  // namespace

CrowdScene augment(const CrowdScene& scene, const AugmentConfig& cfg, Rng& rng) {
    const double s = rng.uniform(cfg.scaleLo, cfg.scaleHi);
    const int H1 = std::max(1, static_cast<int>(std::lround(scene.height * s)));
    const int W1 = std::max(1, static_cast<int>(std::lround(scene.width * s)));
    const double sy = static_cast<double>(H1) / scene.height;
    const double sx = static_cast<double>(W1) / scene.width;

    CrowdScene scaled;
    scaled.height = H1;
    scaled.width = W1;
    scaled.split = scene.split;
    scaled.regime = scene.regime;
    scaled.image.resize(static_cast<size_t>(3) * H1 * W1);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H1; ++y)
            for (int x = 0; x < W1; ++x) {
                const double srcY = (y + 0.5) / sy - 0.5;
                const double srcX = (x + 0.5) / sx - 0.5;
                int y0 = static_cast<int>(std::floor(srcY)), x0 = static_cast<int>(std::floor(srcX));
                const double fy = srcY - y0, fx = srcX - x0;
                const int yc0 = std::clamp(y0, 0, scene.height - 1), yc1 = std::clamp(y0 + 1, 0, scene.height - 1);
                const int xc0 = std::clamp(x0, 0, scene.width - 1), xc1 = std::clamp(x0 + 1, 0, scene.width - 1);
                auto at = [&](int yy, int xx) {
                    return scene.image[(static_cast<size_t>(c) * scene.height + yy) * scene.width + xx];
                };
                const double v = (at(yc0, xc0) * (1 - fx) + at(yc0, xc1) * fx) * (1 - fy) +
                                 (at(yc1, xc0) * (1 - fx) + at(yc1, xc1) * fx) * fy;
                scaled.image[(static_cast<size_t>(c) * H1 + y) * W1 + x] = static_cast<float>(v);
            }
    for (size_t i = 0; i < scene.points.size(); ++i) {
        scaled.points.emplace_back(scene.points[i].first * sx, scene.points[i].second * sy);
        if (!scene.sizes.empty()) scaled.sizes.push_back(scene.sizes[i] * 0.5 * (sx + sy));
    }

    // reflect-pad up to the crop size when the scaled image is smaller
    const int crop = cfg.cropSize;
    if (H1 < crop || W1 < crop) {
        CrowdScene padded;
        padded.height = std::max(H1, crop);
        padded.width = std::max(W1, crop);
        padded.split = scaled.split;
        padded.regime = scaled.regime;
        padded.image.resize(static_cast<size_t>(3) * padded.height * padded.width);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < padded.height; ++y)
                for (int x = 0; x < padded.width; ++x)
                    padded.image[(static_cast<size_t>(c) * padded.height + y) * padded.width + x] =
                        scaled.image[(static_cast<size_t>(c) * H1 + reflect(y, H1)) * W1 + reflect(x, W1)];
        padded.points = scaled.points;  // reflected copies are unannotated by design
        padded.sizes = scaled.sizes;
        scaled = std::move(padded);
    }

    // random crop
    const int oy = scaled.height > crop ? rng.below(scaled.height - crop + 1) : 0;
    const int ox = scaled.width > crop ? rng.below(scaled.width - crop + 1) : 0;
    CrowdScene out;
    out.height = crop;
    out.width = crop;
    out.split = scaled.split;
    out.regime = scaled.regime;
    out.image.resize(static_cast<size_t>(3) * crop * crop);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < crop; ++y)
            std::copy(&scaled.image[(static_cast<size_t>(c) * scaled.height + oy + y) * scaled.width + ox],
                      &scaled.image[(static_cast<size_t>(c) * scaled.height + oy + y) * scaled.width + ox] + crop,
                      &out.image[(static_cast<size_t>(c) * crop + y) * crop]);
    for (size_t i = 0; i < scaled.points.size(); ++i) {
        const double x = scaled.points[i].first - ox;
        const double y = scaled.points[i].second - oy;
        if (x >= 0 && x < crop && y >= 0 && y < crop) {
            out.points.emplace_back(x, y);
            if (!scaled.sizes.empty()) out.sizes.push_back(scaled.sizes[i]);
        }
    }

    // horizontal flip
    if (rng.uniform() < cfg.flipProb) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < crop; ++y) {
                float* row = &out.image[(static_cast<size_t>(c) * crop + y) * crop];
                std::reverse(row, row + crop);
            }
        for (auto& p : out.points) p.first = crop - p.first;
    }
    out.validate();
    return out;
}

void save_dataset(const std::string& dir, const std::vector<CrowdScene>& scenes) {
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream ann(fs::path(dir) / "annotations.jsonl");
    if (!ann) throw IoError("cannot write annotations.jsonl under " + dir);
    for (size_t i = 0; i < scenes.size(); ++i) {
        const auto& s = scenes[i];
        char name[64];
        std::snprintf(name, sizeof(name), "images/scene_%05zu.png", i);
        ImageU8 img;
        img.height = s.height;
        img.width = s.width;
        img.rgb.resize(static_cast<size_t>(s.height) * s.width * 3);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                for (int c = 0; c < 3; ++c)
                    img.rgb[(static_cast<size_t>(y) * s.width + x) * 3 + c] = static_cast<std::uint8_t>(
                        std::clamp(s.image[(static_cast<size_t>(c) * s.height + y) * s.width + x], 0.f, 1.f) *
                            255.f +
                        0.5f);
        write_png_rgb8((fs::path(dir) / name).string(), img);
        json rec;
        rec["image"] = name;
        json pts = json::array();
        for (const auto& [x, y] : s.points) pts.push_back({x, y});
        rec["points"] = pts;
        if (s.sizes.empty())
            rec["sizes"] = nullptr;
        else
            rec["sizes"] = s.sizes;
        if (!s.split.empty()) rec["split"] = s.split;
        if (!s.regime.empty()) rec["regime"] = s.regime;
        ann << rec.dump() << "\n";
    }
}

std::vector<CrowdScene> load_dataset(const std::string& dir) {
    std::ifstream ann(fs::path(dir) / "annotations.jsonl");
    if (!ann) throw IoError("cannot open annotations.jsonl under " + dir);
    std::vector<CrowdScene> out;
    std::string line;
    int lineno = 0;
    while (std::getline(ann, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const std::exception& e) {
            throw ParseError("annotations.jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
        CrowdScene s;
        const std::string imgPath = (fs::path(dir) / rec.at("image").get<std::string>()).string();
        if (!fs::exists(imgPath)) throw IoError("image file not found: " + imgPath);
        ImageU8 img = read_png_rgb8(imgPath);
        s.height = img.height;
        s.width = img.width;
        s.image.resize(static_cast<size_t>(3) * s.height * s.width);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                for (int c = 0; c < 3; ++c)
                    s.image[(static_cast<size_t>(c) * s.height + y) * s.width + x] =
                        img.rgb[(static_cast<size_t>(y) * s.width + x) * 3 + c] / 255.f;
        for (const auto& p : rec.at("points")) s.points.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
        if (rec.contains("sizes") && !rec["sizes"].is_null())
            for (const auto& v : rec["sizes"]) s.sizes.push_back(v.get<double>());
        if (rec.contains("split")) s.split = rec["split"].get<std::string>();
        if (rec.contains("regime")) s.regime = rec["regime"].get<std::string>();
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace limm
