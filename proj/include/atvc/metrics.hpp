#pragma once

#include <string>
#include <vector>

#include "atvc/common.hpp"

namespace atvc {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // ContractError when absent
  double number(std::size_t row, int col) const;
};

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// Plain comma-split reader for the files this project writes; no quoting.
CsvTable read_csv(const std::string& path);

struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

// Self-contained SVG line chart with axes, ticks, and a legend. Charts are
// always rendered from data read back out of a CSV, never from in-memory
// results, so the plotted file is exactly what the table says.
void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<ChartSeries>& series);

// Square cell grid, white at 0 through blue at 1; grid[r][c] must be finite.
void write_heatmap_svg(const std::string& path, const std::string& title,
                       const std::string& x_label, const std::string& y_label,
                       const std::vector<std::vector<double>>& grid);

}  // namespace atvc
