#include "mhc/svg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mhc/text_format.hpp"

namespace mhc {

namespace {

constexpr int kCell = 42;
constexpr int kMarginLeft = 72;
constexpr int kMarginTop = 56;
constexpr int kMarginRight = 24;
constexpr int kMarginBottom = 48;

struct Rgb {
    int r, g, b;
};

// Single-hue ramp, light to dark blue.
Rgb ramp(double t) {
    t = std::clamp(t, 0.0, 1.0);
    auto lerp = [t](int a, int b) { return static_cast<int>(std::lround(a + (b - a) * t)); };
    return {lerp(247, 8), lerp(251, 48), lerp(255, 107)};
}

std::string color_str(const Rgb& c) {
    return "rgb(" + std::to_string(c.r) + "," + std::to_string(c.g) + "," + std::to_string(c.b) + ")";
}

void append_text(std::string& out, double x, double y, const std::string& text, int size,
                 const std::string& anchor, const std::string& fill = "#222222") {
    out += "<text x=\"" + fmt_double(x) + "\" y=\"" + fmt_double(y) + "\" font-size=\"" +
           std::to_string(size) + "\" font-family=\"monospace\" text-anchor=\"" + anchor + "\" fill=\"" +
           fill + "\">" + text + "</text>\n";
}

}  // namespace

std::string render_heatmap_svg(const HeatmapSpec& spec) {
    const int rows = static_cast<int>(spec.values.rows());
    const int cols = static_cast<int>(spec.values.cols());
    if (rows < 1 || cols < 1) throw std::invalid_argument("render_heatmap_svg: empty matrix");
    if (!(spec.vmax > spec.vmin)) throw std::invalid_argument("render_heatmap_svg: need vmax > vmin");

    const int width = kMarginLeft + cols * kCell + kMarginRight;
    const int height = kMarginTop + rows * kCell + kMarginBottom;

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
           std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) + " " +
           std::to_string(height) + "\">\n";
    out +=
        "<defs><pattern id=\"undef\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\" "
        "patternTransform=\"rotate(45)\"><rect width=\"6\" height=\"6\" fill=\"#d8d8d8\"/>"
        "<line x1=\"0\" y1=\"0\" x2=\"0\" y2=\"6\" stroke=\"#9a9a9a\" stroke-width=\"2\"/></pattern></defs>\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    append_text(out, width / 2.0, 24, spec.title, 14, "middle");

    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const double raw = spec.values(r, c);
            const double x = kMarginLeft + c * kCell;
            const double y = kMarginTop + r * kCell;
            std::string fill;
            bool dark = false;
            if (std::isnan(raw)) {
                fill = "url(#undef)";
            } else {
                const double t = (raw - spec.vmin) / (spec.vmax - spec.vmin);
                fill = color_str(ramp(t));
                dark = t > 0.55;
            }
            out += "<rect x=\"" + fmt_double(x) + "\" y=\"" + fmt_double(y) + "\" width=\"" +
                   std::to_string(kCell) + "\" height=\"" + std::to_string(kCell) + "\" fill=\"" + fill +
                   "\" stroke=\"white\" stroke-width=\"1\"/>\n";
            if (!std::isnan(raw) && spec.cell_precision >= 0)
                append_text(out, x + kCell / 2.0, y + kCell / 2.0 + 4, fmt_fixed(raw, spec.cell_precision),
                            10, "middle", dark ? "#ffffff" : "#222222");
        }
    }

    for (int r = 0; r < rows; ++r) {
        const std::string label =
            r < static_cast<int>(spec.row_labels.size()) ? spec.row_labels[static_cast<std::size_t>(r)]
                                                         : std::to_string(r);
        append_text(out, kMarginLeft - 8, kMarginTop + r * kCell + kCell / 2.0 + 4, label, 11, "end");
    }
    for (int c = 0; c < cols; ++c) {
        const std::string label =
            c < static_cast<int>(spec.col_labels.size()) ? spec.col_labels[static_cast<std::size_t>(c)]
                                                         : std::to_string(c);
        append_text(out, kMarginLeft + c * kCell + kCell / 2.0, kMarginTop - 8, label, 11, "middle");
    }
    if (!spec.col_axis.empty())
        append_text(out, kMarginLeft + cols * kCell / 2.0, kMarginTop - 26, spec.col_axis, 12, "middle");
    if (!spec.row_axis.empty()) {
        const double cx = 18, cy = kMarginTop + rows * kCell / 2.0;
        out += "<text x=\"" + fmt_double(cx) + "\" y=\"" + fmt_double(cy) +
               "\" font-size=\"12\" font-family=\"monospace\" text-anchor=\"middle\" fill=\"#222222\" "
               "transform=\"rotate(-90 " +
               fmt_double(cx) + " " + fmt_double(cy) + ")\">" + spec.row_axis + "</text>\n";
    }

    // color ramp legend
    const double ly = kMarginTop + rows * kCell + 16;
    const int lw = std::min(200, cols * kCell);
    for (int i = 0; i < lw; ++i) {
        out += "<rect x=\"" + fmt_double(kMarginLeft + i) + "\" y=\"" + fmt_double(ly) +
               "\" width=\"1\" height=\"10\" fill=\"" +
               color_str(ramp(static_cast<double>(i) / std::max(1, lw - 1))) + "\"/>\n";
    }
    append_text(out, kMarginLeft, ly + 22, fmt_fixed(spec.vmin, 2), 10, "start");
    append_text(out, kMarginLeft + lw, ly + 22, fmt_fixed(spec.vmax, 2), 10, "end");

    out += "</svg>\n";
    return out;
}

std::string render_line_chart_svg(const LineChartSpec& spec) {
    if (spec.series.empty()) throw std::invalid_argument("render_line_chart_svg: no series");
    const std::size_t len = spec.series.front().size();
    if (len < 1) throw std::invalid_argument("render_line_chart_svg: empty series");
    for (const auto& s : spec.series)
        if (s.size() != len) throw std::invalid_argument("render_line_chart_svg: series lengths differ");

    std::vector<double> xs = spec.x_values;
    if (xs.empty()) {
        xs.resize(len);
        for (std::size_t i = 0; i < len; ++i) xs[i] = static_cast<double>(i);
    }

    double ymin = spec.series[0][0], ymax = ymin;
    for (const auto& s : spec.series)
        for (double v : s) {
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    if (ymax == ymin) {
        ymax += 1.0;
        ymin -= 1.0;
    }
    const double xmin = xs.front(), xmax = xs.back() == xs.front() ? xs.front() + 1.0 : xs.back();

    constexpr int kW = 520, kH = 320, kL = 64, kR = 150, kT = 48, kB = 48;
    const double plot_w = kW - kL - kR, plot_h = kH - kT - kB;
    auto px = [&](double x) { return kL + (x - xmin) / (xmax - xmin) * plot_w; };
    auto py = [&](double y) { return kT + (1.0 - (y - ymin) / (ymax - ymin)) * plot_h; };

    static const char* palette[] = {"#08306b", "#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e"};

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kW) + "\" height=\"" +
           std::to_string(kH) + "\" viewBox=\"0 0 " + std::to_string(kW) + " " + std::to_string(kH) +
           "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    append_text(out, kW / 2.0, 24, spec.title, 14, "middle");

    out += "<line x1=\"" + fmt_double(kL) + "\" y1=\"" + fmt_double(kT + plot_h) + "\" x2=\"" +
           fmt_double(kL + plot_w) + "\" y2=\"" + fmt_double(kT + plot_h) +
           "\" stroke=\"#444444\" stroke-width=\"1\"/>\n";
    out += "<line x1=\"" + fmt_double(kL) + "\" y1=\"" + fmt_double(kT) + "\" x2=\"" + fmt_double(kL) +
           "\" y2=\"" + fmt_double(kT + plot_h) + "\" stroke=\"#444444\" stroke-width=\"1\"/>\n";
    append_text(out, kL, kT + plot_h + 18, fmt_fixed(xmin, 0), 10, "middle");
    append_text(out, kL + plot_w, kT + plot_h + 18, fmt_fixed(xmax, 0), 10, "middle");
    append_text(out, kL - 6, py(ymin) + 4, fmt_fixed(ymin, 3), 10, "end");
    append_text(out, kL - 6, py(ymax) + 4, fmt_fixed(ymax, 3), 10, "end");
    append_text(out, kL + plot_w / 2.0, kH - 12, spec.x_label, 12, "middle");

    for (std::size_t s = 0; s < spec.series.size(); ++s) {
        const char* color = palette[s % 6];
        std::string points;
        for (std::size_t i = 0; i < len; ++i) {
            if (std::isnan(spec.series[s][i])) continue;
            points += fmt_double(px(xs[i])) + "," + fmt_double(py(spec.series[s][i])) + " ";
        }
        out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
        const std::string name = s < spec.series_names.size() ? spec.series_names[s] : "series " + std::to_string(s);
        const double ly = kT + 14.0 * static_cast<double>(s);
        out += "<line x1=\"" + fmt_double(kL + plot_w + 10) + "\" y1=\"" + fmt_double(ly) + "\" x2=\"" +
               fmt_double(kL + plot_w + 26) + "\" y2=\"" + fmt_double(ly) + "\" stroke=\"" + color +
               "\" stroke-width=\"2\"/>\n";
        append_text(out, kL + plot_w + 30, ly + 4, name, 10, "start");
    }
    if (!spec.y_label.empty()) {
        const double cx = 16, cy = kT + plot_h / 2.0;
        out += "<text x=\"" + fmt_double(cx) + "\" y=\"" + fmt_double(cy) +
               "\" font-size=\"12\" font-family=\"monospace\" text-anchor=\"middle\" fill=\"#222222\" "
               "transform=\"rotate(-90 " +
               fmt_double(cx) + " " + fmt_double(cy) + ")\">" + spec.y_label + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace mhc
