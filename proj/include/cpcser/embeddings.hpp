#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cpcser/cpc.hpp"
#include "cpcser/harness.hpp"

namespace cpcser {

/// Time-mean of the CPC context sequence, one row per utterance.
std::vector<std::vector<double>> utterance_embeddings(const CpcModel& model, const std::vector<Utterance>& data);

/// Header: id, e0..e{D-1}, activation, valence, dominance, tag. Label cells are
/// empty for unlabeled utterances. Numbers use 17 significant digits.
void write_embeddings_csv(const std::filesystem::path& path, const std::vector<Utterance>& data,
                          const std::vector<std::vector<double>>& embeddings);

struct EmbeddingTable {
  std::vector<std::string> ids, tags;
  std::vector<std::vector<double>> rows;
};
EmbeddingTable read_embeddings_csv(const std::filesystem::path& path);

/// Share of points whose nearest (Euclidean) class centroid is their own class.
/// Centroids are the class means over all points. Throws with fewer than two classes.
double nearest_centroid_purity(const std::vector<std::vector<double>>& points, const std::vector<std::string>& tags);

}  // namespace cpcser
