#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "iseg/error.hpp"

// Minimal raster plots (binary PPM). Only lines, rectangles and axes; no text, no timestamps.
namespace iseg::plot {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kWhite{255, 255, 255};
inline constexpr Rgb kBlack{0, 0, 0};
inline constexpr Rgb kGrid{220, 220, 220};

/// Distinct series colors, cycled.
inline Rgb palette(std::size_t i) {
    static const Rgb colors[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},
                                 {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};
    return colors[i % 8];
}

class Canvas {
   public:
    Canvas(std::size_t width, std::size_t height, Rgb bg = kWhite) : w_(width), h_(height), px_(width * height, bg) {
        if (width == 0 || height == 0) throw PreconditionError("canvas must be non-empty");
    }

    std::size_t width() const { return w_; }
    std::size_t height() const { return h_; }
    Rgb at(std::size_t x, std::size_t y) const { return px_[y * w_ + x]; }

    void set(long x, long y, Rgb c) {
        if (x < 0 || y < 0 || x >= long(w_) || y >= long(h_)) return;
        px_[std::size_t(y) * w_ + std::size_t(x)] = c;
    }

    // Bresenham.
    void line(long x0, long y0, long x1, long y1, Rgb c) {
        const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        long err = dx + dy;
        while (true) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const long e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    void fill_rect(long x0, long y0, long x1, long y1, Rgb c) {
        for (long y = std::min(y0, y1); y <= std::max(y0, y1); ++y) {
            for (long x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
        }
    }

    void write_ppm(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + path + " for writing");
        os << "P6\n" << w_ << ' ' << h_ << "\n255\n";
        for (const auto& p : px_) os.write(reinterpret_cast<const char*>(p.data()), 3);
        if (!os) throw IoError("failed writing " + path);
    }

   private:
    std::size_t w_, h_;
    std::vector<Rgb> px_;
};

struct Frame {
    long left = 40, right = 20, top = 20, bottom = 30;
};

namespace detail {

inline void axes(Canvas& c, const Frame& f, int grid_lines) {
    const long x0 = f.left, x1 = long(c.width()) - f.right, y0 = f.top, y1 = long(c.height()) - f.bottom;
    for (int i = 1; i < grid_lines; ++i) {
        const long y = y1 - (y1 - y0) * i / grid_lines;
        c.line(x0, y, x1, y, kGrid);
    }
    c.line(x0, y1, x1, y1, kBlack);
    c.line(x0, y0, x0, y1, kBlack);
}

}  // namespace detail

/// Line chart of several series over a shared x axis. With log_y, values are plotted as log10
/// (non-positive values are skipped).
inline Canvas line_chart(const std::vector<std::vector<double>>& series, bool log_y, std::size_t width = 480,
                         std::size_t height = 320) {
    Canvas c(width, height);
    const Frame f;
    detail::axes(c, f, 5);
    auto tr = [&](double v) { return log_y ? std::log10(v) : v; };
    double lo = INFINITY, hi = -INFINITY;
    std::size_t n = 0;
    for (const auto& s : series) {
        n = std::max(n, s.size());
        for (double v : s) {
            if (!std::isfinite(v) || (log_y && v <= 0)) continue;
            lo = std::min(lo, tr(v));
            hi = std::max(hi, tr(v));
        }
    }
    if (n == 0 || !std::isfinite(lo)) return c;
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const long x0 = f.left, x1 = long(width) - f.right, y0 = f.top, y1 = long(height) - f.bottom;
    auto px = [&](std::size_t i) { return n == 1 ? (x0 + x1) / 2 : x0 + long(std::lround(double(x1 - x0) * double(i) / double(n - 1))); };
    auto py = [&](double v) { return y1 - long(std::lround(double(y1 - y0) * (tr(v) - lo) / (hi - lo))); };
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        long prev_x = -1, prev_y = -1;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!std::isfinite(s[i]) || (log_y && s[i] <= 0)) {
                prev_x = -1;
                continue;
            }
            const long x = px(i), y = py(s[i]);
            if (prev_x >= 0) {
                c.line(prev_x, prev_y, x, y, palette(k));
            } else {
                c.fill_rect(x - 1, y - 1, x + 1, y + 1, palette(k));
            }
            prev_x = x;
            prev_y = y;
        }
    }
    return c;
}

/// Bar chart of values in [0, 1]; NaN bars are drawn as a short grey stub.
inline Canvas bar_chart(const std::vector<double>& values, std::size_t width = 480, std::size_t height = 320) {
    Canvas c(width, height);
    const Frame f;
    detail::axes(c, f, 4);
    if (values.empty()) return c;
    const long x0 = f.left, x1 = long(width) - f.right, y0 = f.top, y1 = long(height) - f.bottom;
    const double slot = double(x1 - x0) / double(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const long a = x0 + long(std::lround(slot * (double(i) + 0.15)));
        const long b = x0 + long(std::lround(slot * (double(i) + 0.85)));
        if (std::isnan(values[i])) {
            c.fill_rect(a, y1 - 2, b, y1 - 1, palette(7));
            continue;
        }
        const double v = std::clamp(values[i], 0.0, 1.0);
        const long top = y1 - long(std::lround(double(y1 - y0) * v));
        if (top < y1) c.fill_rect(a, top, b, y1 - 1, palette(i));
    }
    return c;
}

}  // namespace iseg::plot
