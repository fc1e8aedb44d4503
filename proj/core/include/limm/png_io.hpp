#pragma once

// Minimal libpng wrappers: 8-bit RGB images and 16-bit grayscale heatmaps.

#include <cstdint>
#include <string>
#include <vector>

namespace limm {

struct ImageU8 {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;  // H*W*3, row-major
};

void write_png_rgb8(const std::string& path, const ImageU8& img);
ImageU8 read_png_rgb8(const std::string& path);

/// Writes values scaled so that `maxValue` maps to 65535 (maxValue <= 0
/// autoscales to the data maximum).
void write_png_gray16(const std::string& path, int height, int width, const std::vector<double>& values,
                      double maxValue = 0.0);

}  // namespace limm
