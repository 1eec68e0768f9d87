#include "sfr/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace sfr::plot {
namespace {

constexpr double kWidth = 720.0;
constexpr double kHeight = 440.0;
constexpr double kLeft = 70.0;
constexpr double kRight = 170.0;  // legend column
constexpr double kTop = 40.0;
constexpr double kBottom = 55.0;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

const char* color(std::size_t i) { return kPalette[i % (sizeof kPalette / sizeof kPalette[0])]; }

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void settle() {
    if (!(lo <= hi)) {
      lo = 0.0;
      hi = 1.0;
    }
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

// 1-2-5 tick step giving roughly `target` intervals.
std::vector<double> ticks(Range& r, int target = 6) {
  const double raw = (r.hi - r.lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double f : {1.0, 2.0, 5.0, 10.0}) {
    step = f * mag;
    if (raw <= step) break;
  }
  r.lo = std::floor(r.lo / step) * step;
  r.hi = std::ceil(r.hi / step) * step;
  std::vector<double> out;
  const int n = static_cast<int>(std::llround((r.hi - r.lo) / step));
  for (int i = 0; i <= n; ++i) out.push_back(r.lo + i * step);
  return out;
}

class Canvas {
 public:
  Canvas(const std::string& title) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os_ << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os_ << "<text x=\"" << px(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
        << escape(title) << "</text>\n";
  }

  double plot_w() const { return kWidth - kLeft - kRight; }
  double plot_h() const { return kHeight - kTop - kBottom; }

  void y_axis(Range& yr, const std::string& label) {
    y_ = yr;
    for (double t : ticks(y_)) {
      const double y = ymap(t);
      os_ << "<line x1=\"" << px(kLeft) << "\" y1=\"" << px(y) << "\" x2=\"" << px(kLeft + plot_w())
          << "\" y2=\"" << px(y) << "\" stroke=\"#e0e0e0\"/>\n";
      os_ << "<text x=\"" << px(kLeft - 6) << "\" y=\"" << px(y + 4) << "\" text-anchor=\"end\">" << num(t)
          << "</text>\n";
    }
    os_ << "<text transform=\"translate(16 " << px(kTop + plot_h() / 2)
        << ") rotate(-90)\" text-anchor=\"middle\">" << escape(label) << "</text>\n";
  }

  void x_axis(Range& xr, const std::string& label) {
    x_ = xr;
    for (double t : ticks(x_)) {
      const double x = xmap(t);
      os_ << "<text x=\"" << px(x) << "\" y=\"" << px(kTop + plot_h() + 18)
          << "\" text-anchor=\"middle\">" << num(t) << "</text>\n";
    }
    x_label(label);
  }

  void x_label(const std::string& label) {
    os_ << "<text x=\"" << px(kLeft + plot_w() / 2) << "\" y=\"" << px(kHeight - 12)
        << "\" text-anchor=\"middle\">" << escape(label) << "</text>\n";
  }

  void frame() {
    os_ << "<rect x=\"" << px(kLeft) << "\" y=\"" << px(kTop) << "\" width=\"" << px(plot_w())
        << "\" height=\"" << px(plot_h()) << "\" fill=\"none\" stroke=\"black\"/>\n";
  }

  void legend(const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      const double y = kTop + 10 + 18.0 * static_cast<double>(i);
      os_ << "<rect x=\"" << px(kWidth - kRight + 14) << "\" y=\"" << px(y - 9)
          << "\" width=\"12\" height=\"12\" fill=\"" << color(i) << "\"/>\n";
      os_ << "<text x=\"" << px(kWidth - kRight + 32) << "\" y=\"" << px(y + 1) << "\">" << escape(names[i])
          << "</text>\n";
    }
  }

  double xmap(double v) const { return kLeft + (v - x_.lo) / (x_.hi - x_.lo) * plot_w(); }
  double ymap(double v) const { return kTop + (y_.hi - v) / (y_.hi - y_.lo) * plot_h(); }

  std::ostringstream& out() { return os_; }

  std::string finish() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  std::ostringstream os_;
  Range x_, y_;
};

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series) {
  Range xr, yr;
  for (const auto& s : series) {
    const std::size_t n = std::min(s.x.size(), s.y.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
        xr.add(s.x[i]);
        yr.add(s.y[i]);
      }
    }
  }
  xr.settle();
  yr.settle();

  Canvas c(title);
  c.y_axis(yr, y_label);
  c.x_axis(xr, x_label);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    names.push_back(s.label);
    std::string points;
    const std::size_t n = std::min(s.x.size(), s.y.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!points.empty()) points += ' ';
      points += px(c.xmap(s.x[i])) + ',' + px(c.ymap(s.y[i]));
    }
    c.out() << "<polyline fill=\"none\" stroke=\"" << color(k) << "\" stroke-width=\"1.5\" points=\""
            << points << "\"/>\n";
  }
  c.frame();
  c.legend(names);
  return c.finish();
}

std::string grouped_bar_chart(const std::string& title, const std::string& y_label,
                              const std::vector<std::string>& groups, const std::vector<std::string>& series,
                              const std::vector<std::vector<double>>& values) {
  Range yr;
  yr.add(0.0);
  for (const auto& row : values) {
    for (double v : row) yr.add(v);
  }
  yr.settle();

  Canvas c(title);
  c.y_axis(yr, y_label);
  c.x_label("");
  const double group_w = c.plot_w() / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double bar_w = 0.8 * group_w / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  const double zero = c.ymap(0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double x0 = kLeft + group_w * static_cast<double>(g) + 0.1 * group_w;
    for (std::size_t s = 0; s < series.size(); ++s) {
      if (g >= values.size() || s >= values[g].size() || !std::isfinite(values[g][s])) continue;
      const double y = c.ymap(values[g][s]);
      c.out() << "<rect x=\"" << px(x0 + bar_w * static_cast<double>(s)) << "\" y=\""
              << px(std::min(y, zero)) << "\" width=\"" << px(bar_w) << "\" height=\""
              << px(std::abs(zero - y)) << "\" fill=\"" << color(s) << "\"><title>" << escape(groups[g])
              << ' ' << escape(series[s]) << ": " << num(values[g][s]) << "</title></rect>\n";
    }
    c.out() << "<text x=\"" << px(x0 + 0.4 * group_w) << "\" y=\"" << px(kTop + c.plot_h() + 18)
            << "\" text-anchor=\"middle\">" << escape(groups[g]) << "</text>\n";
  }
  c.frame();
  c.legend(series);
  return c.finish();
}

}  // namespace sfr::plot
