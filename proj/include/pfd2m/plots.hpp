#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "pfd2m/tensor.hpp"

namespace pfd2m {

namespace detail {

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string svg_header(int w, int h, const std::string& title) {
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + std::to_string(w / 2) +
         "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" + title +
         "</text>\n";
    return s;
}

}  // namespace detail

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

inline std::string svg_line_chart(const std::string& title, const std::string& xlabel,
                                  const std::string& ylabel, const std::vector<Series>& series,
                                  bool log_y = false) {
    const int w = 800, h = 420, ml = 70, mr = 30, mt = 44, mb = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            const double yy = log_y ? std::log10(std::max(y, 1e-12)) : y;
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, yy);
            ymax = std::max(ymax, yy);
        }
    if (xmin > xmax) xmin = 0, xmax = 1;
    if (ymin > ymax) ymin = 0, ymax = 1;
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
    auto py = [&](double y) {
        const double yy = log_y ? std::log10(std::max(y, 1e-12)) : y;
        return h - mb - (yy - ymin) / (ymax - ymin) * (h - mt - mb);
    };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

    std::string s = detail::svg_header(w, h, title);
    s += "<rect x=\"" + std::to_string(ml) + "\" y=\"" + std::to_string(mt) + "\" width=\"" +
         std::to_string(w - ml - mr) + "\" height=\"" + std::to_string(h - mt - mb) +
         "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = xmin + (xmax - xmin) * i / 4.0;
        const double fy = ymin + (ymax - ymin) * i / 4.0;
        const double gy = h - mb - (fy - ymin) / (ymax - ymin) * (h - mt - mb);
        s += "<text x=\"" + detail::fmt(px(fx)) + "\" y=\"" + std::to_string(h - mb + 18) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
             detail::fmt(fx) + "</text>\n";
        const double label = log_y ? std::pow(10.0, fy) : fy;
        s += "<text x=\"" + std::to_string(ml - 6) + "\" y=\"" + detail::fmt(gy + 4) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
             detail::fmt(label) + "</text>\n";
        s += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + detail::fmt(gy) + "\" x2=\"" +
             std::to_string(w - mr) + "\" y2=\"" + detail::fmt(gy) +
             "\" stroke=\"#ddd\" stroke-width=\"1\"/>\n";
    }
    int ci = 0;
    for (const auto& sr : series) {
        std::string pts;
        for (auto [x, y] : sr.points) pts += detail::fmt(px(x)) + "," + detail::fmt(py(y)) + " ";
        const char* color = colors[ci % 4];
        s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        s += "<text x=\"" + std::to_string(w - mr - 8) + "\" y=\"" +
             std::to_string(mt + 16 + 16 * ci) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" + color +
             "\">" + sr.name + "</text>\n";
        ++ci;
    }
    s += "<text x=\"" + std::to_string((ml + w - mr) / 2) + "\" y=\"" + std::to_string(h - 12) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" + xlabel +
         "</text>\n";
    s += "<text x=\"16\" y=\"" + std::to_string((mt + h - mb) / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 "
         "16 " +
         std::to_string((mt + h - mb) / 2) + ")\">" + ylabel + "</text>\n";
    s += "</svg>\n";
    return s;
}

inline std::string svg_bar_chart(const std::string& title,
                                 const std::vector<std::pair<std::string, double>>& bars,
                                 double y_max = 100.0) {
    const int w = 640, h = 400, ml = 60, mr = 20, mt = 44, mb = 60;
    const int n = int(bars.size());
    std::string s = detail::svg_header(w, h, title);
    const double band = double(w - ml - mr) / std::max(1, n);
    for (int i = 0; i <= 4; ++i) {
        const double fy = y_max * i / 4.0;
        const double gy = h - mb - fy / y_max * (h - mt - mb);
        s += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + detail::fmt(gy) + "\" x2=\"" +
             std::to_string(w - mr) + "\" y2=\"" + detail::fmt(gy) + "\" stroke=\"#ddd\"/>\n";
        s += "<text x=\"" + std::to_string(ml - 6) + "\" y=\"" + detail::fmt(gy + 4) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
             detail::fmt(fy) + "</text>\n";
    }
    for (int i = 0; i < n; ++i) {
        const double v = std::clamp(bars[size_t(i)].second, 0.0, y_max);
        const double bh = v / y_max * (h - mt - mb);
        const double x = ml + band * i + band * 0.15;
        s += "<rect x=\"" + detail::fmt(x) + "\" y=\"" + detail::fmt(h - mb - bh) + "\" width=\"" +
             detail::fmt(band * 0.7) + "\" height=\"" + detail::fmt(bh) +
             "\" fill=\"#1f77b4\"/>\n";
        s += "<text x=\"" + detail::fmt(ml + band * i + band / 2) + "\" y=\"" +
             std::to_string(h - mb + 18) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
             bars[size_t(i)].first + "</text>\n";
        s += "<text x=\"" + detail::fmt(ml + band * i + band / 2) + "\" y=\"" +
             detail::fmt(h - mb - bh - 6) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
             detail::fmt(bars[size_t(i)].second) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

// Grayscale log-magnitude spectrogram, downsampled to at most max_cells per
// axis to keep the file small.
inline std::string svg_spectrogram(const Tensor& mag, const std::string& title,
                                   int max_cells = 160) {
    const int w = 800, h = 420, ml = 50, mr = 20, mt = 44, mb = 30;
    const int tx = std::min(max_cells, mag.rows);
    const int ty = std::min(max_cells / 2, mag.cols);
    double vmax = 1e-12;
    for (double v : mag.v) vmax = std::max(vmax, v);
    std::string s = detail::svg_header(w, h, title);
    const double cw = double(w - ml - mr) / tx;
    const double ch = double(h - mt - mb) / ty;
    for (int i = 0; i < tx; ++i) {
        for (int j = 0; j < ty; ++j) {
            // average the block of source cells
            const int r0 = i * mag.rows / tx, r1 = std::max(r0 + 1, (i + 1) * mag.rows / tx);
            const int c0 = j * mag.cols / ty, c1 = std::max(c0 + 1, (j + 1) * mag.cols / ty);
            double acc = 0.0;
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c) acc += mag.at(r, c);
            acc /= double(r1 - r0) * double(c1 - c0);
            const double db = std::log10(acc / vmax + 1e-6);  // [-6, 0]
            const int shade = int(std::clamp(255.0 * (1.0 + db / 6.0), 0.0, 255.0));
            char color[10];
            std::snprintf(color, sizeof color, "#%02x%02x%02x", shade, shade, shade);
            s += "<rect x=\"" + detail::fmt(ml + i * cw) + "\" y=\"" +
                 detail::fmt(h - mb - (j + 1) * ch) + "\" width=\"" + detail::fmt(cw + 0.5) +
                 "\" height=\"" + detail::fmt(ch + 0.5) + "\" fill=\"" + color + "\"/>\n";
        }
    }
    s += "</svg>\n";
    return s;
}

}  // namespace pfd2m
