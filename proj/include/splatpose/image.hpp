#pragma once

#include <string>
#include <vector>

namespace splatpose {

// Row-major RGB image, values in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> px;  // height*width*3

    Image() = default;
    Image(int w, int h, double fill = 0.0) : width(w), height(h), px(static_cast<size_t>(w) * h * 3, fill) {}

    double& at(int x, int y, int c) { return px[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return px[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

// Single-channel map (depth/alpha).
struct Grid {
    int width = 0;
    int height = 0;
    std::vector<double> px;  // height*width

    Grid() = default;
    Grid(int w, int h, double fill = 0.0) : width(w), height(h), px(static_cast<size_t>(w) * h, fill) {}

    double& at(int x, int y) { return px[static_cast<size_t>(y) * width + x]; }
    double at(int x, int y) const { return px[static_cast<size_t>(y) * width + x]; }
};

// Binary PPM (P6, maxval 255). Values clamped to [0,1] and rounded.
void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

// 16-bit big-endian binary PGM (P5); values scaled by `scale` and clamped.
void write_pgm16(const Grid& g, const std::string& path, double scale = 1000.0);

}  // namespace splatpose
