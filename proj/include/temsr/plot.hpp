#pragma once

// Minimal static SVG line charts.

#include <filesystem>
#include <string>
#include <vector>

namespace temsr {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  int width = 640;
  int height = 400;
};

std::string render_line_chart(const ChartSpec& spec, const std::vector<Series>& series);
void write_line_chart(const std::filesystem::path& path, const ChartSpec& spec,
                      const std::vector<Series>& series);

}  // namespace temsr
