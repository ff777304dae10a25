#pragma once

// Static report rendering: SVG curves from metric CSVs, the lambda frontier,
// and a JSON summary.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "refusalguard/analysis.hpp"

namespace rg {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  // Index of a named column; throws InvalidConfig when absent.
  std::size_t index(const std::string& name) const;
  std::vector<double> column(const std::string& name) const;
};

// Numeric CSV with one header line; non-numeric cells read as NaN.
CsvTable parse_csv(const std::string& text);

using Series = std::pair<std::string, std::vector<double>>;

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::vector<double>& x,
                           const std::vector<Series>& series);

// Utility proxy against safety proxy, one labelled point per lambda.
std::string frontier_svg(const CsvTable& ablation);

std::string ablation_json(const AblationResult& r);

// Writes one SVG per metrics CSV, a frontier SVG when an ablation CSV is
// given, and summary.json. Returns the written paths.
std::vector<std::filesystem::path> render_report(const std::vector<std::filesystem::path>& metric_csvs,
                                                 const std::filesystem::path& ablation_csv,
                                                 const std::filesystem::path& out_dir);

}  // namespace rg
