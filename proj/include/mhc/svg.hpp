#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace mhc {

// Heatmap rendered as a plain rect grid with a single-hue linear color ramp.
// NaN cells are drawn hatched gray (undefined, visually distinct from zero).
// No timestamps or other run-varying content: identical inputs give identical
// bytes.
struct HeatmapSpec {
    Eigen::MatrixXd values;
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    std::string title;
    std::string row_axis;
    std::string col_axis;
    double vmin = 0.0;
    double vmax = 1.0;
    int cell_precision = 2;  // decimals printed inside each cell; < 0 disables
};

std::string render_heatmap_svg(const HeatmapSpec& spec);

struct LineChartSpec {
    std::vector<std::string> series_names;
    std::vector<std::vector<double>> series;  // same length; x = index
    std::vector<double> x_values;             // optional explicit x axis
    std::string title;
    std::string x_label;
    std::string y_label;
};

std::string render_line_chart_svg(const LineChartSpec& spec);

}  // namespace mhc
