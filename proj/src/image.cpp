#include "splatpose/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace splatpose {

namespace {

uint8_t to_byte(double v) {
    const double c = std::min(std::max(v, 0.0), 1.0);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

void skip_ws_and_comments(std::istream& in) {
    while (true) {
        const int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
}

}  // namespace

void write_ppm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[static_cast<size_t>(x) * 3 + c] = to_byte(img.at(x, y, c));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw std::runtime_error("read_ppm: " + path + " is not a P6 PPM");
    skip_ws_and_comments(in);
    int w = 0, h = 0, maxval = 0;
    in >> w;
    skip_ws_and_comments(in);
    in >> h;
    skip_ws_and_comments(in);
    in >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval != 255)
        throw std::runtime_error("read_ppm: bad header in " + path);
    in.get();  // single whitespace after maxval
    Image img(w, h);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!in) throw std::runtime_error("read_ppm: truncated pixel data in " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
    return img;
}

void write_pgm16(const Grid& g, const std::string& path, double scale) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm16: cannot open " + path);
    out << "P5\n" << g.width << " " << g.height << "\n65535\n";
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
            const double v = std::min(std::max(g.at(x, y) * scale, 0.0), 65535.0);
            const uint16_t q = static_cast<uint16_t>(std::lround(v));
            const uint8_t hi = static_cast<uint8_t>(q >> 8);
            const uint8_t lo = static_cast<uint8_t>(q & 0xff);
            out.put(static_cast<char>(hi));
            out.put(static_cast<char>(lo));
        }
    if (!out) throw std::runtime_error("write_pgm16: write failed for " + path);
}

}  // namespace splatpose
