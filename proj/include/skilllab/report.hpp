#pragma once

#include <string>
#include <utility>
#include <vector>

namespace skilllab::report {

// Merge eval-report JSON files into out_dir/report.csv (one row per metric)
// plus SVG plots where the inputs carry curves or gate traces.
void merge_reports(const std::vector<std::string>& inputs,
                   const std::string& out_dir);

// Polyline plot helpers (used by merge_reports and the CLI).
struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};
std::string svg_lines(const std::vector<Series>& series, const std::string& title,
                      int width = 640, int height = 320);

}  // namespace skilllab::report
