#include "atvc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace atvc {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
constexpr int kPaletteSize = 6;

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// Round tick bounds outward to a small set of readable step sizes.
std::vector<double> nice_ticks(double lo, double hi, int want) {
  if (!(hi > lo)) {
    hi = lo + 1.0;
    lo -= 1.0;
  }
  const double raw = (hi - lo) / want;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double mult : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    if (mag * mult >= raw) {
      step = mag * mult;
      break;
    }
  }
  std::vector<double> ticks;
  for (double t = std::ceil(lo / step) * step; t <= hi + step * 1e-9; t += step) {
    ticks.push_back(std::abs(t) < step * 1e-9 ? 0.0 : t);
  }
  return ticks;
}

}  // namespace

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  throw ContractError("csv has no column '" + name + "'");
}

double CsvTable::number(std::size_t row, int col) const {
  if (row >= rows.size() || col < 0 || col >= static_cast<int>(rows[row].size())) {
    throw ContractError("csv cell out of range");
  }
  return std::stod(rows[row][col]);
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size()) throw ContractError("csv row width differs from header");
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream row(line);
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    if (first) {
      table.header = std::move(cells);
      first = false;
    } else {
      table.rows.push_back(std::move(cells));
    }
  }
  if (first) throw ContractError("csv " + path + " is empty");
  return table;
}

void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<ChartSeries>& series) {
  const int width = 720, height = 440;
  const int left = 70, right = 24, top = 42, bottom = 52;
  const int plot_w = width - left - right;
  const int plot_h = height - top - bottom;

  double xlo = 0.0, xhi = 1.0, ylo = 0.0, yhi = 1.0;
  bool any = false;
  for (const ChartSeries& s : series) {
    if (s.x.size() != s.y.size()) throw ContractError("series x/y lengths differ");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!any) {
        xlo = xhi = s.x[i];
        ylo = yhi = s.y[i];
        any = true;
      } else {
        xlo = std::min(xlo, s.x[i]);
        xhi = std::max(xhi, s.x[i]);
        ylo = std::min(ylo, s.y[i]);
        yhi = std::max(yhi, s.y[i]);
      }
    }
  }
  if (xhi == xlo) xhi = xlo + 1.0;
  if (yhi == ylo) yhi = ylo + 1.0;
  const double ypad = (yhi - ylo) * 0.05;
  ylo -= ypad;
  yhi += ypad;

  auto px = [&](double x) { return left + (x - xlo) / (xhi - xlo) * plot_w; };
  auto py = [&](double y) { return top + plot_h - (y - ylo) / (yhi - ylo) * plot_h; };

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\""
      << " font-size=\"15\">" << escape_xml(title) << "</text>\n";

  for (double t : nice_ticks(ylo, yhi, 6)) {
    const double y = py(t);
    out << "<line x1=\"" << left << "\" y1=\"" << fmt(y) << "\" x2=\"" << left + plot_w
        << "\" y2=\"" << fmt(y) << "\" stroke=\"#dddddd\"/>\n";
    out << "<text x=\"" << left - 8 << "\" y=\"" << fmt(y + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(t)
        << "</text>\n";
  }
  for (double t : nice_ticks(xlo, xhi, 8)) {
    const double x = px(t);
    out << "<line x1=\"" << fmt(x) << "\" y1=\"" << top << "\" x2=\"" << fmt(x) << "\" y2=\""
        << top + plot_h << "\" stroke=\"#eeeeee\"/>\n";
    out << "<text x=\"" << fmt(x) << "\" y=\"" << top + plot_h + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(t)
        << "</text>\n";
  }
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << plot_w << "\" height=\""
      << plot_h << "\" fill=\"none\" stroke=\"#444444\"/>\n";
  out << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << escape_xml(x_label) << "</text>\n";
  out << "<text x=\"18\" y=\"" << top + plot_h / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\""
      << "rotate(-90 18 " << top + plot_h / 2 << ")\">" << escape_xml(y_label) << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % kPaletteSize];
    std::ostringstream pts;
    for (std::size_t i = 0; i < series[s].x.size(); ++i) {
      if (!std::isfinite(series[s].x[i]) || !std::isfinite(series[s].y[i])) continue;
      pts << fmt(px(series[s].x[i])) << "," << fmt(py(series[s].y[i])) << " ";
    }
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\""
        << pts.str() << "\"/>\n";
    const int ly = top + 16 + static_cast<int>(s) * 17;
    out << "<line x1=\"" << left + plot_w - 130 << "\" y1=\"" << ly - 4 << "\" x2=\""
        << left + plot_w - 108 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + plot_w - 102 << "\" y=\"" << ly
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape_xml(series[s].name)
        << "</text>\n";
  }
  out << "</svg>\n";
}

void write_heatmap_svg(const std::string& path, const std::string& title,
                       const std::string& x_label, const std::string& y_label,
                       const std::vector<std::vector<double>>& grid) {
  if (grid.empty() || grid[0].empty()) throw ContractError("empty heatmap grid");
  const int nrows = static_cast<int>(grid.size());
  const int ncols = static_cast<int>(grid[0].size());
  const int cell = std::max(18, 360 / std::max(nrows, ncols));
  const int left = 64, top = 48, bottom = 66, right = 24;
  const int width = left + ncols * cell + right;
  const int height = top + nrows * cell + bottom;

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"26\" text-anchor=\"middle\" font-family=\"sans-serif\""
      << " font-size=\"15\">" << escape_xml(title) << "</text>\n";

  // Row 0 is drawn at the bottom so both axes increase away from the origin.
  for (int r = 0; r < nrows; ++r) {
    if (static_cast<int>(grid[r].size()) != ncols) throw ContractError("ragged heatmap grid");
    for (int c = 0; c < ncols; ++c) {
      const double v = grid[r][c];
      if (!std::isfinite(v)) throw ContractError("non-finite heatmap cell");
      const double clamped = std::clamp(v, 0.0, 1.0);
      const int rb = static_cast<int>(std::lround(255.0 * (1.0 - clamped * 0.82)));
      const int g = static_cast<int>(std::lround(255.0 * (1.0 - clamped * 0.55)));
      const int x = left + c * cell;
      const int y = top + (nrows - 1 - r) * cell;
      out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\""
          << cell << "\" fill=\"rgb(" << rb << "," << g << ",255)\" stroke=\"#cccccc\"/>\n";
      out << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
          << fmt(std::round(v * 100.0) / 100.0) << "</text>\n";
    }
  }
  for (int c = 0; c < ncols; ++c) {
    out << "<text x=\"" << left + c * cell + cell / 2 << "\" y=\"" << top + nrows * cell + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << c
        << "</text>\n";
  }
  for (int r = 0; r < nrows; ++r) {
    out << "<text x=\"" << left - 10 << "\" y=\"" << top + (nrows - 1 - r) * cell + cell / 2 + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << r
        << "</text>\n";
  }
  out << "<text x=\"" << left + ncols * cell / 2 << "\" y=\"" << height - 16
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << escape_xml(x_label) << "</text>\n";
  out << "<text x=\"20\" y=\"" << top + nrows * cell / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\""
      << "rotate(-90 20 " << top + nrows * cell / 2 << ")\">" << escape_xml(y_label)
      << "</text>\n";
  out << "</svg>\n";
}

}  // namespace atvc
