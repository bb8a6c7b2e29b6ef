#include "wtal/plot.hpp"

#include "wtal/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace wtal::plot {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

}  // namespace

Columns read_csv(const std::filesystem::path& path, std::span<const std::string> required) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open CSV: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("CSV is empty: " + path.string());
  const auto header = split_csv(line);
  for (const auto& r : required) {
    if (std::find(header.begin(), header.end(), r) == header.end())
      throw ValidationError("CSV " + path.string() + " is missing column '" + r + "'");
  }
  Columns cols;
  for (const auto& h : header) cols[h];
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      try {
        cols[header[i]].push_back(std::stod(cells[i]));
      } catch (const std::exception&) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": non-numeric '" + cells[i] + "'");
      }
    }
  }
  return cols;
}

std::string loss_curves_svg(const Columns& metrics) {
  const double W = 720, H = 400, L = 60, R = 160, T = 20, B = 40;
  auto it = metrics.find("iteration");
  if (it == metrics.end()) throw ValidationError("metrics are missing column 'iteration'");
  const auto& x = it->second;
  double xmin = x.empty() ? 0 : x.front(), xmax = x.empty() ? 1 : x.back();
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  for (const auto& [name, ys] : metrics) {
    if (name == "iteration") continue;
    for (double y : ys) {
      if (!std::isfinite(y)) continue;
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (!std::isfinite(ymin)) ymin = 0, ymax = 1;
  if (ymax <= ymin) ymax = ymin + 1;
  if (xmax <= xmin) xmax = xmin + 1;
  auto sx = [&](double v) { return L + (v - xmin) / (xmax - xmin) * (W - L - R); };
  auto sy = [&](double v) { return H - B - (v - ymin) / (ymax - ymin) * (H - T - B); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << L << "\" y=\"" << H - 10 << "\" font-size=\"12\">iteration " << num(xmin) << " .. "
      << num(xmax) << "</text>\n";
  svg << "<text x=\"5\" y=\"" << T + 10 << "\" font-size=\"12\">" << num(ymax) << "</text>\n";
  svg << "<text x=\"5\" y=\"" << H - B << "\" font-size=\"12\">" << num(ymin) << "</text>\n";
  int k = 0;
  for (const auto& [name, ys] : metrics) {
    if (name == "iteration") continue;
    const char* color = kPalette[k % 6];
    svg << "<polyline class=\"curve\" fill=\"none\" stroke=\"" << color << "\" points=\"";
    for (std::size_t i = 0; i < std::min(x.size(), ys.size()); ++i)
      if (std::isfinite(ys[i])) svg << num(sx(x[i])) << "," << num(sy(ys[i])) << " ";
    svg << "\"/>\n";
    svg << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 15 + 18 * k << "\" font-size=\"12\" fill=\"" << color
        << "\">" << name << "</text>\n";
    ++k;
  }
  svg << "</svg>\n";
  return svg.str();
}

Intervals foreground_intervals(std::span<const double> attention, double seconds_per_segment, double threshold) {
  Intervals out;
  std::size_t t = 0;
  while (t < attention.size()) {
    if (attention[t] < threshold) {
      ++t;
      continue;
    }
    std::size_t e = t;
    while (e + 1 < attention.size() && attention[e + 1] >= threshold) ++e;
    out.emplace_back(static_cast<double>(t) * seconds_per_segment, static_cast<double>(e + 1) * seconds_per_segment);
    t = e + 1;
  }
  return out;
}

std::string timeline_svg(std::span<const TimelineVideo> videos, const std::vector<std::string>& row_labels) {
  const double W = 900, label_w = 180, row_h = 16, gap = 4, video_gap = 24;
  double height = 10;
  for (const auto& v : videos) height += 18 + static_cast<double>(v.rows.size()) * (row_h + gap) + video_gap;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  double y = 10;
  for (const auto& v : videos) {
    svg << "<text x=\"4\" y=\"" << y + 12 << "\" font-size=\"13\" font-weight=\"bold\">" << v.id << "</text>\n";
    y += 18;
    const double span = v.duration > 0 ? v.duration : 1.0;
    for (std::size_t r = 0; r < v.rows.size(); ++r) {
      const char* color = r == 0 ? "#2ca02c" : kPalette[(r - 1) % 6];
      const auto label = r < row_labels.size() ? row_labels[r] : "row " + std::to_string(r);
      svg << "<g class=\"strip\" data-video=\"" << v.id << "\" data-row=\"" << label << "\">\n";
      svg << "  <text x=\"4\" y=\"" << y + 12 << "\" font-size=\"12\">" << label << "</text>\n";
      svg << "  <rect x=\"" << label_w << "\" y=\"" << y << "\" width=\"" << W - label_w - 10 << "\" height=\""
          << row_h << "\" fill=\"#eeeeee\"/>\n";
      for (const auto& [s, e] : v.rows[r]) {
        const double x0 = label_w + std::clamp(s / span, 0.0, 1.0) * (W - label_w - 10);
        const double x1 = label_w + std::clamp(e / span, 0.0, 1.0) * (W - label_w - 10);
        svg << "  <rect x=\"" << num(x0) << "\" y=\"" << y << "\" width=\"" << num(std::max(0.5, x1 - x0))
            << "\" height=\"" << row_h << "\" fill=\"" << color << "\"/>\n";
      }
      svg << "</g>\n";
      y += row_h + gap;
    }
    y += video_gap;
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace wtal::plot
