#include "limm/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>

#include "limm/error.hpp"

namespace limm {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png_rgb8(const std::string& path, const ImageU8& img) {
    if (img.height <= 0 || img.width <= 0 ||
        img.rgb.size() != static_cast<size_t>(img.height) * img.width * 3)
        throw InvalidArgument("write_png_rgb8: inconsistent image buffer");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write failure: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.height; ++r)
        png_write_row(png, const_cast<png_bytep>(img.rgb.data() + static_cast<size_t>(r) * img.width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageU8 read_png_rgb8(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng read failure: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    // normalize any input to 8-bit RGB
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    ImageU8 img;
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.rgb.resize(static_cast<size_t>(img.height) * img.width * 3);
    for (int r = 0; r < img.height; ++r)
        png_read_row(png, img.rgb.data() + static_cast<size_t>(r) * img.width * 3, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png_gray16(const std::string& path, int height, int width, const std::vector<double>& values,
                      double maxValue) {
    if (values.size() != static_cast<size_t>(height) * width)
        throw InvalidArgument("write_png_gray16: value count does not match dimensions");
    double mx = maxValue;
    if (mx <= 0.0) {
        mx = 0.0;
        for (double v : values) mx = std::max(mx, v);
        if (mx == 0.0) mx = 1.0;
    }
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write failure: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<std::uint8_t> row(static_cast<size_t>(width) * 2);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            double v = std::clamp(values[static_cast<size_t>(r) * width + c] / mx, 0.0, 1.0);
            const auto q = static_cast<std::uint16_t>(v * 65535.0 + 0.5);
            row[2 * c] = static_cast<std::uint8_t>(q >> 8);  // PNG is big-endian
            row[2 * c + 1] = static_cast<std::uint8_t>(q & 0xff);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace limm
