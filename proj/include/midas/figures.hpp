#pragma once

// Minimal SVG charts for the analysis and ablation reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace midas::fig {

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace detail

/// Accumulates SVG elements on a fixed canvas with a plot area and axes.
class Canvas {
 public:
  Canvas(int width, int height, std::string title) : w_(width), h_(height) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
        << "\" viewBox=\"0 0 " << w_ << ' ' << h_ << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os_ << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    text(w_ / 2.0, 18, title, "middle", 13);
  }

  void rect(double x, double y, double w, double h, const std::string& fill, const std::string& extra = "") {
    os_ << "<rect x=\"" << detail::num(x) << "\" y=\"" << detail::num(y) << "\" width=\"" << detail::num(w)
        << "\" height=\"" << detail::num(h) << "\" fill=\"" << fill << "\"" << extra << "/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1,
            const std::string& extra = "") {
    os_ << "<line x1=\"" << detail::num(x1) << "\" y1=\"" << detail::num(y1) << "\" x2=\"" << detail::num(x2)
        << "\" y2=\"" << detail::num(y2) << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\""
        << extra << "/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    os_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) os_ << detail::num(x) << ',' << detail::num(y) << ' ';
    os_ << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    os_ << "<circle cx=\"" << detail::num(x) << "\" cy=\"" << detail::num(y) << "\" r=\"" << r << "\" fill=\""
        << fill << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, const std::string& anchor = "start", int size = 11,
            const std::string& extra = "") {
    os_ << "<text x=\"" << detail::num(x) << "\" y=\"" << detail::num(y) << "\" text-anchor=\"" << anchor
        << "\" font-size=\"" << size << "\"" << extra << ">" << detail::escape(s) << "</text>\n";
  }

  std::string str() const { return os_.str() + "</svg>\n"; }
  void save(const std::filesystem::path& p) const {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write figure " + p.string());
    f << str();
  }
  int width() const { return w_; }
  int height() const { return h_; }

 private:
  int w_, h_;
  std::ostringstream os_;
};

/// Linear axis mapping data range [lo, hi] to pixel range [p0, p1].
struct Axis {
  double lo = 0, hi = 1, p0 = 0, p1 = 1;
  double operator()(double v) const { return hi == lo ? (p0 + p1) / 2 : p0 + (v - lo) / (hi - lo) * (p1 - p0); }
};

inline void draw_axes(Canvas& c, const Axis& x, const Axis& y, const std::string& xlabel, const std::string& ylabel,
                      int yticks = 5) {
  c.line(x.p0, y.p0, x.p1, y.p0, "black");
  c.line(x.p0, y.p0, x.p0, y.p1, "black");
  for (int i = 0; i <= yticks; ++i) {
    const double v = y.lo + (y.hi - y.lo) * i / yticks;
    c.line(x.p0 - 4, y(v), x.p0, y(v), "black");
    c.text(x.p0 - 6, y(v) + 4, detail::tick(v), "end", 10);
  }
  c.text((x.p0 + x.p1) / 2, y.p0 + 32, xlabel, "middle");
  c.text(14, (y.p0 + y.p1) / 2, ylabel, "middle", 11,
         " transform=\"rotate(-90 14 " + detail::num((y.p0 + y.p1) / 2) + ")\"");
}

/// Histogram of values in [lo, hi] with optional vertical reference line.
inline Canvas histogram(const std::vector<double>& values, int bins, double lo, double hi, const std::string& title,
                        const std::string& xlabel, double ref = NAN) {
  if (bins < 1 || !(hi > lo)) throw std::invalid_argument("histogram: bad bins or range");
  std::vector<int> count(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
    b = std::clamp(b, 0, bins - 1);
    ++count[static_cast<std::size_t>(b)];
  }
  const int top = std::max(1, *std::max_element(count.begin(), count.end()));
  Canvas c(520, 340, title);
  const Axis x{lo, hi, 60, 500}, y{0, static_cast<double>(top), 290, 40};
  for (int b = 0; b < bins; ++b) {
    const double x0 = x(lo + (hi - lo) * b / bins), x1 = x(lo + (hi - lo) * (b + 1) / bins);
    c.rect(x0 + 0.5, y(count[static_cast<std::size_t>(b)]), std::max(0.0, x1 - x0 - 1), y(0) - y(count[static_cast<std::size_t>(b)]),
           "#4c72b0");
  }
  draw_axes(c, x, y, xlabel, "count");
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4;
    c.text(x(v), y.p0 + 14, detail::tick(v), "middle", 10);
  }
  if (std::isfinite(ref)) {
    c.line(x(ref), y.p0, x(ref), y.p1, "#c44e52", 1.5, " stroke-dasharray=\"5,3\"");
    c.text(x(ref) + 4, y.p1 + 10, "p = " + detail::tick(ref), "start", 10, " fill=\"#c44e52\"");
  }
  return c;
}

/// Square heatmap of a matrix with values in [-1, 1] (blue negative, red positive).
inline Canvas heatmap(const std::vector<std::vector<double>>& m, const std::vector<std::string>& labels,
                      const std::string& title) {
  const int K = static_cast<int>(m.size());
  const int cell = std::max(24, 240 / std::max(1, K));
  const int ox = 90, oy = 50;
  Canvas c(ox + cell * K + 40, oy + cell * K + 40, title);
  for (int a = 0; a < K; ++a) {
    c.text(ox - 6, oy + cell * a + cell / 2.0 + 4, labels.at(static_cast<std::size_t>(a)), "end", 10);
    c.text(ox + cell * a + cell / 2.0, oy + cell * K + 14, labels.at(static_cast<std::size_t>(a)), "middle", 10);
    for (int b = 0; b < K; ++b) {
      const double v = std::clamp(m[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)], -1.0, 1.0);
      const int r = v > 0 ? 255 : static_cast<int>(255 * (1 + v));
      const int g = static_cast<int>(255 * (1 - std::abs(v)));
      const int bl = v < 0 ? 255 : static_cast<int>(255 * (1 - v));
      char col[16];
      std::snprintf(col, sizeof col, "#%02x%02x%02x", r, g, bl);
      c.rect(ox + cell * b, oy + cell * a, cell, cell, col, " stroke=\"white\"");
      c.text(ox + cell * b + cell / 2.0, oy + cell * a + cell / 2.0 + 4, detail::tick(v), "middle", 9);
    }
  }
  return c;
}

struct Series {
  std::string name;
  std::vector<double> x, y;
  std::string color = "#4c72b0";
};

inline Canvas line_chart(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                         const std::string& ylabel) {
  double xl = 1e300, xh = -1e300, yl = 1e300, yh = -1e300;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("line_chart: x/y length mismatch");
    for (double v : s.x) xl = std::min(xl, v), xh = std::max(xh, v);
    for (double v : s.y) yl = std::min(yl, v), yh = std::max(yh, v);
  }
  if (xl > xh) xl = 0, xh = 1;
  if (yl > yh) yl = 0, yh = 1;
  yl = std::min(yl, 0.0);
  if (yh == yl) yh = yl + 1;
  Canvas c(560, 340, title);
  const Axis x{xl, xh, 60, 420}, y{yl, yh * 1.05, 290, 40};
  draw_axes(c, x, y, xlabel, ylabel);
  for (int i = 0; i <= 4; ++i) {
    const double v = xl + (xh - xl) * i / 4;
    c.text(x(v), y.p0 + 14, detail::tick(v), "middle", 10);
  }
  int legend = 0;
  for (const auto& s : series) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts.emplace_back(x(s.x[i]), y(s.y[i]));
    c.polyline(pts, s.color);
    for (const auto& [px, py] : pts) c.circle(px, py, 2.5, s.color);
    c.line(430, 50 + 16 * legend, 450, 50 + 16 * legend, s.color, 2);
    c.text(455, 54 + 16 * legend, s.name, "start", 10);
    ++legend;
  }
  return c;
}

/// Grouped bar chart: groups[g][b] is bar b of group g, with an optional
/// horizontal reference line.
inline Canvas grouped_bars(const std::vector<std::vector<double>>& groups, const std::vector<std::string>& group_names,
                           const std::vector<std::string>& bar_names, const std::string& title,
                           const std::string& ylabel, double ref = NAN) {
  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3"};
  double top = std::isfinite(ref) ? ref : 0.0;
  for (const auto& g : groups)
    for (double v : g) top = std::max(top, v);
  if (top <= 0) top = 1;
  const int G = static_cast<int>(groups.size());
  const int nb = static_cast<int>(bar_names.size());
  Canvas c(std::max(480, 90 + G * (nb * 14 + 30) + 140), 360, title);
  const double plot_right = c.width() - 140;
  const Axis y{0, top * 1.1, 300, 40};
  const Axis x{0, static_cast<double>(G), 60, plot_right};
  draw_axes(c, x, y, "", ylabel);
  const double gw = (plot_right - 60) / std::max(1, G);
  const double bw = std::max(3.0, (gw - 20) / std::max(1, nb));
  for (int g = 0; g < G; ++g) {
    const double gx = 60 + gw * g + 10;
    for (int b = 0; b < nb && b < static_cast<int>(groups[static_cast<std::size_t>(g)].size()); ++b) {
      const double v = groups[static_cast<std::size_t>(g)][static_cast<std::size_t>(b)];
      c.rect(gx + bw * b, y(v), bw - 1, y(0) - y(v), palette[b % 7]);
    }
    c.text(gx + bw * nb / 2, y.p0 + 16, group_names.at(static_cast<std::size_t>(g)), "middle", 10);
  }
  for (int b = 0; b < nb; ++b) {
    c.rect(plot_right + 12, 44 + 16 * b, 10, 10, palette[b % 7]);
    c.text(plot_right + 26, 53 + 16 * b, bar_names[static_cast<std::size_t>(b)], "start", 10);
  }
  if (std::isfinite(ref)) {
    c.line(60, y(ref), plot_right, y(ref), "black", 1, " stroke-dasharray=\"5,3\"");
    c.text(plot_right - 2, y(ref) - 4, "uniform " + detail::tick(ref), "end", 10);
  }
  return c;
}

}  // namespace midas::fig
