#include "refusalguard/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "refusalguard/io.hpp"

namespace rg {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t CsvTable::index(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw Error(ErrorCode::InvalidConfig, "CSV has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> CsvTable::column(const std::string& name) const {
  const std::size_t i = index(name);
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(i < r.size() ? r[i] : std::numeric_limits<double>::quiet_NaN());
  return out;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string strip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

struct Frame {
  double width = 640, height = 400, left = 60, right = 160, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double sx(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double sy(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

void fit_range(double& lo, double& hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
}

void axes(std::ostringstream& os, const Frame& f, const std::string& title, const std::string& x_label,
          const std::string& y_label) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << px(f.width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
     << "</text>\n";
  const double xa = f.left, xb = f.width - f.right, ya = f.height - f.bottom, yb = f.top;
  os << "<line x1=\"" << xa << "\" y1=\"" << ya << "\" x2=\"" << xb << "\" y2=\"" << ya << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << xa << "\" y1=\"" << ya << "\" x2=\"" << xa << "\" y2=\"" << yb << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double tx = f.x0 + (f.x1 - f.x0) * i / 4.0, ty = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << px(f.sx(tx)) << "\" y=\"" << px(ya + 16) << "\" text-anchor=\"middle\">" << num(tx)
       << "</text>\n";
    os << "<text x=\"" << px(xa - 6) << "\" y=\"" << px(f.sy(ty) + 4) << "\" text-anchor=\"end\">" << num(ty)
       << "</text>\n";
  }
  os << "<text x=\"" << px((xa + xb) / 2) << "\" y=\"" << px(f.height - 12) << "\" text-anchor=\"middle\">"
     << x_label << "</text>\n";
  if (!y_label.empty())
    os << "<text x=\"14\" y=\"" << px((ya + yb) / 2) << "\" transform=\"rotate(-90 14 " << px((ya + yb) / 2)
       << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
}

}  // namespace

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::stringstream ss(text);
  std::string line;
  bool first = true;
  while (std::getline(ss, line)) {
    line = strip(line);
    if (line.empty()) continue;
    const auto cells = split(line);
    if (first) {
      t.header = cells;
      first = false;
      continue;
    }
    if (cells.size() != t.header.size()) throw Error(ErrorCode::InvalidConfig, "CSV row width differs from header");
    std::vector<double> row;
    for (const auto& c : cells) {
      char* end = nullptr;
      const double v = std::strtod(c.c_str(), &end);
      row.push_back(end != c.c_str() && *end == '\0' ? v : std::numeric_limits<double>::quiet_NaN());
    }
    t.rows.push_back(std::move(row));
  }
  if (first) throw Error(ErrorCode::InvalidConfig, "CSV is empty");
  return t;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::vector<double>& x,
                           const std::vector<Series>& series) {
  Frame f;
  f.x0 = x.empty() ? 0 : *std::min_element(x.begin(), x.end());
  f.x1 = x.empty() ? 1 : *std::max_element(x.begin(), x.end());
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : series)
    for (double v : s.second)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  fit_range(f.x0, f.x1);
  fit_range(lo, hi);
  f.y0 = lo;
  f.y1 = hi;
  std::ostringstream os;
  axes(os, f, title, x_label, "");
  for (std::size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < x.size() && i < series[si].second.size(); ++i)
      if (std::isfinite(series[si].second[i]))
        os << px(f.sx(x[i])) << ',' << px(f.sy(series[si].second[i])) << ' ';
    os << "\"/>\n";
    const double ly = f.top + 16.0 * double(si);
    os << "<line x1=\"" << px(f.width - f.right + 12) << "\" y1=\"" << px(ly) << "\" x2=\""
       << px(f.width - f.right + 32) << "\" y2=\"" << px(ly) << "\" stroke=\"" << color
       << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << px(f.width - f.right + 38) << "\" y=\"" << px(ly + 4) << "\">" << series[si].first
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string frontier_svg(const CsvTable& ablation) {
  const auto lambda = ablation.column("lambda");
  const auto safety = ablation.column("safety_proxy");
  const auto utility = ablation.column("utility_proxy");
  Frame f;
  f.right = 40;
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    if (!std::isfinite(safety[i]) || !std::isfinite(utility[i])) continue;
    xlo = std::min(xlo, safety[i]), xhi = std::max(xhi, safety[i]);
    ylo = std::min(ylo, utility[i]), yhi = std::max(yhi, utility[i]);
  }
  fit_range(xlo, xhi);
  fit_range(ylo, yhi);
  f.x0 = xlo, f.x1 = xhi, f.y0 = ylo, f.y1 = yhi;
  std::ostringstream os;
  axes(os, f, "lambda frontier", "safety proxy (align drop)", "utility proxy (held-out task loss)");
  os << "<polyline fill=\"none\" stroke=\"#999\" stroke-dasharray=\"4 3\" points=\"";
  for (std::size_t i = 0; i < lambda.size(); ++i)
    if (std::isfinite(safety[i]) && std::isfinite(utility[i]))
      os << px(f.sx(safety[i])) << ',' << px(f.sy(utility[i])) << ' ';
  os << "\"/>\n";
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    if (!std::isfinite(safety[i]) || !std::isfinite(utility[i])) continue;
    os << "<circle cx=\"" << px(f.sx(safety[i])) << "\" cy=\"" << px(f.sy(utility[i]))
       << "\" r=\"4\" fill=\"#1f77b4\"/>\n";
    os << "<text x=\"" << px(f.sx(safety[i]) + 6) << "\" y=\"" << px(f.sy(utility[i]) - 6) << "\">&#955;="
       << num(lambda[i]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string ablation_json(const AblationResult& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json j = {{"lambda", row.lambda}, {"ok", row.ok}};
    if (row.ok) {
      j.update({{"align", row.align},
                {"projmag", row.projmag},
                {"drift", row.drift},
                {"interference", row.interference},
                {"entropy", row.entropy},
                {"top1", row.top1},
                {"safety_proxy", row.safety_proxy},
                {"utility_proxy", row.utility_proxy},
                {"mech_score", row.mech_score}});
    } else {
      j["error"] = row.error;
    }
    rows.push_back(std::move(j));
  }
  json frontier = json::array();
  for (const auto& [s, u] : r.frontier) frontier.push_back({{"safety_proxy", s}, {"utility_proxy", u}});
  const json base = {{"align", r.base.align_mean},   {"projmag", r.base.projmag_mean},
                     {"drift", r.base.drift},        {"interference", r.base.interference_mean},
                     {"entropy", r.base.entropy_mean}, {"top1", r.base.top1_mean}};
  return json{{"base", base}, {"rows", rows}, {"frontier", frontier}}.dump(2) + "\n";
}

std::vector<fs::path> render_report(const std::vector<fs::path>& metric_csvs, const fs::path& ablation_csv,
                                    const fs::path& out_dir) {
  std::vector<fs::path> written;
  json summary = {{"metrics", json::array()}};
  for (const auto& path : metric_csvs) {
    const CsvTable t = parse_csv(read_text(path));
    const auto step = t.column("step");
    const std::string stem = path.stem().string();
    std::vector<Series> geometry{{"align", t.column("align")},
                                 {"drift", t.column("drift")},
                                 {"interference", t.column("interference")},
                                 {"top1", t.column("top1")},
                                 {"mech_score", t.column("mech_score")}};
    const fs::path svg = out_dir / (stem + "_geometry.svg");
    write_text(svg, line_chart_svg(stem + ": geometry over checkpoints", "step", step, geometry));
    written.push_back(svg);
    std::vector<Series> scale{{"projmag", t.column("projmag")},
                              {"entropy", t.column("entropy")},
                              {"task_loss", t.column("task_loss")}};
    const fs::path svg2 = out_dir / (stem + "_magnitudes.svg");
    write_text(svg2, line_chart_svg(stem + ": magnitudes over checkpoints", "step", step, scale));
    written.push_back(svg2);

    json entry = {{"source", path.filename().string()}, {"checkpoints", t.rows.size()}};
    for (const char* name : {"align", "projmag", "drift", "interference", "entropy", "top1", "task_loss",
                             "mech_score"}) {
      const auto col = t.column(name);
      if (!col.empty()) entry[name] = {{"first", col.front()}, {"last", col.back()}};
    }
    summary["metrics"].push_back(std::move(entry));
  }
  if (!ablation_csv.empty()) {
    const CsvTable t = parse_csv(read_text(ablation_csv));
    const fs::path svg = out_dir / "lambda_frontier.svg";
    write_text(svg, frontier_svg(t));
    written.push_back(svg);
    const auto lambda = t.column("lambda");
    std::vector<Series> curves{{"align", t.column("align")},
                               {"drift", t.column("drift")},
                               {"mech_score", t.column("mech_score")}};
    const fs::path svg2 = out_dir / "lambda_metrics.svg";
    write_text(svg2, line_chart_svg("final metrics across lambda", "lambda", lambda, curves));
    written.push_back(svg2);
    json rows = json::array();
    for (const auto& r : t.rows) {
      json row;
      for (std::size_t i = 0; i < t.header.size(); ++i)
        row[t.header[i]] = std::isfinite(r[i]) ? json(r[i]) : json(nullptr);
      rows.push_back(std::move(row));
    }
    summary["ablation"] = std::move(rows);
  }
  const fs::path sj = out_dir / "summary.json";
  write_text(sj, summary.dump(2) + "\n");
  written.push_back(sj);
  return written;
}

}  // namespace rg
