#include "cpcser/embeddings.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cpcser {

std::vector<std::vector<double>> utterance_embeddings(const CpcModel& model, const std::vector<Utterance>& data) {
  std::vector<std::vector<double>> out;
  out.reserve(data.size());
  for (const auto& u : data) {
    const Tensor c = model.extract_features(u.clip);
    const std::size_t len = c.size(0), dim = c.size(1);
    std::vector<double> mean(dim, 0.0);
    const auto v = c.data();
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t d = 0; d < dim; ++d) mean[d] += v[t * dim + d];
    }
    for (double& m : mean) m /= static_cast<double>(len);
    out.push_back(std::move(mean));
  }
  return out;
}

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<Utterance>& data,
                          const std::vector<std::vector<double>>& embeddings) {
  if (data.size() != embeddings.size()) throw std::invalid_argument("embeddings: row count mismatch");
  if (data.empty()) throw std::invalid_argument("embeddings: nothing to export");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("embeddings: cannot write " + path.string());
  const std::size_t dim = embeddings.front().size();
  out << "id";
  for (std::size_t d = 0; d < dim; ++d) out << ",e" << d;
  out << ",activation,valence,dominance,tag\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].id.find_first_of(",\"\n") != std::string::npos || data[i].tag.find_first_of(",\"\n") != std::string::npos) {
      throw std::invalid_argument("embeddings: id or tag of '" + data[i].id + "' contains a CSV delimiter");
    }
    out << data[i].id;
    for (double v : embeddings[i]) out << ',' << num(v);
    if (data[i].labels) {
      for (double v : data[i].labels->as_array()) out << ',' << num(v);
    } else {
      out << ",,,";
    }
    out << ',' << data[i].tag << '\n';
  }
  if (!out) throw std::runtime_error("embeddings: write failed for " + path.string());
}

EmbeddingTable read_embeddings_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("embeddings: cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::size_t columns = 1;
  for (char ch : line) columns += ch == ',';
  if (columns < 6) throw std::runtime_error("embeddings: " + path.string() + " has no embedding columns");
  const std::size_t dim = columns - 5;
  EmbeddingTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != columns) throw std::runtime_error("embeddings: ragged row in " + path.string());
    table.ids.push_back(cells[0]);
    std::vector<double> row(dim);
    for (std::size_t d = 0; d < dim; ++d) row[d] = std::stod(cells[1 + d]);
    table.rows.push_back(std::move(row));
    table.tags.push_back(cells.back());
  }
  return table;
}

double nearest_centroid_purity(const std::vector<std::vector<double>>& points, const std::vector<std::string>& tags) {
  if (points.size() != tags.size() || points.empty()) throw std::invalid_argument("purity: need one tag per point");
  const std::size_t dim = points.front().size();
  std::map<std::string, std::pair<std::vector<double>, std::size_t>> centroids;
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto& [sum, count] = centroids[tags[i]];
    if (sum.empty()) sum.assign(dim, 0.0);
    for (std::size_t d = 0; d < dim; ++d) sum[d] += points[i][d];
    ++count;
  }
  if (centroids.size() < 2) throw std::invalid_argument("purity: need at least two classes");
  for (auto& [tag, c] : centroids) {
    for (double& v : c.first) v /= static_cast<double>(c.second);
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::string best_tag;
    for (const auto& [tag, c] : centroids) {
      double dist = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dist += (points[i][d] - c.first[d]) * (points[i][d] - c.first[d]);
      if (dist < best) {
        best = dist;
        best_tag = tag;
      }
    }
    hits += best_tag == tags[i];
  }
  return static_cast<double>(hits) / static_cast<double>(points.size());
}

}  // namespace cpcser
