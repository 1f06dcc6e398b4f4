#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cpcser {

/// Concordance correlation coefficient with population moments:
/// 2 cov / (var_x + var_y + (mean_x - mean_y)^2). Two equal constant
/// vectors give 1. Throws std::invalid_argument for n < 2 or a length mismatch.
double ccc(std::span<const double> x, std::span<const double> y);

/// Pearson correlation. Throws if n < 2 or either input is constant.
double pearson(std::span<const double> x, std::span<const double> y);

struct CccReport {
  double act = 0.0;
  double val = 0.0;
  double dom = 0.0;
  double avg = 0.0;
  std::size_t n = 0;
};

/// Per-dimension CCC over rows of [activation, valence, dominance].
CccReport evaluate(std::span<const std::array<double, 3>> preds, std::span<const std::array<double, 3>> labels);

/// Averages the per-dimension scores of several reports (n is summed).
CccReport average_reports(std::span<const CccReport> reports);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std; 0 for a single run
};

struct RunSummary {
  MeanStd avg, act, val, dom;
  std::size_t runs = 0;
};

/// Throws std::invalid_argument on an empty list.
RunSummary aggregate_runs(std::span<const CccReport> reports);

/// ".664 ± .007": three decimals, leading zero dropped.
std::string format_score(double value);
std::string format_mean_std(const MeanStd& v);

struct ReportRow {
  std::string method;
  RunSummary summary;
};

/// Fixed-width table with columns CCC_avg, CCC_act, CCC_val, CCC_dom.
std::string render_table(std::span<const ReportRow> rows);

/// Columns: method, ccc_avg_mean, ccc_avg_std, ccc_act_mean, ccc_act_std,
/// ccc_val_mean, ccc_val_std, ccc_dom_mean, ccc_dom_std, runs.
void write_report_csv(const std::filesystem::path& path, std::span<const ReportRow> rows);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);

}  // namespace cpcser
