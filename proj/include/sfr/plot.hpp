#pragma once

#include <string>
#include <vector>

namespace sfr::plot {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Standalone SVG documents. Output depends only on the arguments, so equal
// inputs give byte-identical files. Non-finite points are skipped.
std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series);

// values[g][s] is the bar of series s in group g.
std::string grouped_bar_chart(const std::string& title, const std::string& y_label,
                              const std::vector<std::string>& groups, const std::vector<std::string>& series,
                              const std::vector<std::vector<double>>& values);

}  // namespace sfr::plot
