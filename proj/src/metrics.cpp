#include "cpcser/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cpcser {

namespace {

struct Moments {
  double mean_x = 0.0, mean_y = 0.0, var_x = 0.0, var_y = 0.0, cov = 0.0;
};

Moments moments(std::span<const double> x, std::span<const double> y, const char* who) {
  if (x.size() != y.size()) {
    throw std::invalid_argument(std::string(who) + ": length mismatch (" + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw std::invalid_argument(std::string(who) + ": needs at least 2 samples");
  const double n = static_cast<double>(x.size());
  Moments m;
  for (std::size_t i = 0; i < x.size(); ++i) {
    m.mean_x += x[i];
    m.mean_y += y[i];
  }
  m.mean_x /= n;
  m.mean_y /= n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - m.mean_x, dy = y[i] - m.mean_y;
    m.var_x += dx * dx;
    m.var_y += dy * dy;
    m.cov += dx * dy;
  }
  m.var_x /= n;
  m.var_y /= n;
  m.cov /= n;
  return m;
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return out;
}

}  // namespace

double ccc(std::span<const double> x, std::span<const double> y) {
  const Moments m = moments(x, y, "ccc");
  const double gap = m.mean_x - m.mean_y;
  const double denom = m.var_x + m.var_y + gap * gap;
  if (denom == 0.0) return 1.0;
  return 2.0 * m.cov / denom;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const Moments m = moments(x, y, "pearson");
  if (m.var_x == 0.0 || m.var_y == 0.0) throw std::invalid_argument("pearson: constant input");
  return m.cov / std::sqrt(m.var_x * m.var_y);
}

CccReport evaluate(std::span<const std::array<double, 3>> preds, std::span<const std::array<double, 3>> labels) {
  if (preds.size() != labels.size()) throw std::invalid_argument("evaluate: prediction and label counts differ");
  std::array<double, 3> score{};
  for (std::size_t d = 0; d < 3; ++d) {
    std::vector<double> p(preds.size()), y(labels.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
      p[i] = preds[i][d];
      y[i] = labels[i][d];
    }
    score[d] = ccc(p, y);
  }
  return {score[0], score[1], score[2], (score[0] + score[1] + score[2]) / 3.0, preds.size()};
}

CccReport average_reports(std::span<const CccReport> reports) {
  if (reports.empty()) throw std::invalid_argument("average_reports: no reports");
  CccReport out;
  for (const auto& r : reports) {
    out.act += r.act;
    out.val += r.val;
    out.dom += r.dom;
    out.n += r.n;
  }
  const double k = static_cast<double>(reports.size());
  out.act /= k;
  out.val /= k;
  out.dom /= k;
  out.avg = (out.act + out.val + out.dom) / 3.0;
  return out;
}

RunSummary aggregate_runs(std::span<const CccReport> reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate_runs: no reports");
  std::vector<double> avg, act, val, dom;
  for (const auto& r : reports) {
    avg.push_back(r.avg);
    act.push_back(r.act);
    val.push_back(r.val);
    dom.push_back(r.dom);
  }
  return {mean_std(avg), mean_std(act), mean_std(val), mean_std(dom), reports.size()};
}

std::string format_score(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", value);
  std::string s = buf;
  if (s == "-0.000") s = "0.000";
  if (s.rfind("0.", 0) == 0) s.erase(0, 1);
  else if (s.rfind("-0.", 0) == 0) s.erase(1, 1);
  return s;
}

std::string format_mean_std(const MeanStd& v) { return format_score(v.mean) + " ± " + format_score(v.std); }

std::string render_table(std::span<const ReportRow> rows) {
  std::size_t method_width = 6;
  for (const auto& r : rows) method_width = std::max(method_width, r.method.size());
  auto pad = [](std::string s, std::size_t w) {
    // "±" is two bytes but one column.
    std::size_t cols = 0;
    for (unsigned char ch : s) cols += (ch & 0xC0) != 0x80;
    if (cols < w) s.append(w - cols, ' ');
    return s;
  };
  std::ostringstream out;
  const std::size_t col = 16;
  out << pad("Method", method_width) << "  " << pad("CCC_avg", col) << pad("CCC_act", col) << pad("CCC_val", col)
      << "CCC_dom\n";
  for (const auto& r : rows) {
    out << pad(r.method, method_width) << "  " << pad(format_mean_std(r.summary.avg), col)
        << pad(format_mean_std(r.summary.act), col) << pad(format_mean_std(r.summary.val), col)
        << format_mean_std(r.summary.dom) << "\n";
  }
  return out.str();
}

void write_report_csv(const std::filesystem::path& path, std::span<const ReportRow> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("report: cannot write " + path.string());
  out << "method,ccc_avg_mean,ccc_avg_std,ccc_act_mean,ccc_act_std,ccc_val_mean,ccc_val_std,ccc_dom_mean,"
         "ccc_dom_std,runs\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    if (r.method.find_first_of(",\"\n") != std::string::npos) {
      throw std::invalid_argument("report: method name '" + r.method + "' contains a CSV delimiter");
    }
    const auto& s = r.summary;
    out << r.method << ',' << num(s.avg.mean) << ',' << num(s.avg.std) << ',' << num(s.act.mean) << ','
        << num(s.act.std) << ',' << num(s.val.mean) << ',' << num(s.val.std) << ',' << num(s.dom.mean) << ','
        << num(s.dom.std) << ',' << s.runs << '\n';
  }
  if (!out) throw std::runtime_error("report: write failed for " + path.string());
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("report: cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("method,", 0) != 0) {
    throw std::runtime_error("report: " + path.string() + " has no report header");
  }
  std::vector<ReportRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 10) {
      throw std::runtime_error("report: " + path.string() + ":" + std::to_string(line_no) + " expected 10 columns");
    }
    ReportRow r;
    r.method = cells[0];
    try {
      r.summary.avg = {std::stod(cells[1]), std::stod(cells[2])};
      r.summary.act = {std::stod(cells[3]), std::stod(cells[4])};
      r.summary.val = {std::stod(cells[5]), std::stod(cells[6])};
      r.summary.dom = {std::stod(cells[7]), std::stod(cells[8])};
      r.summary.runs = std::stoul(cells[9]);
    } catch (const std::logic_error&) {
      throw std::runtime_error("report: " + path.string() + ":" + std::to_string(line_no) + " has a bad number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace cpcser
