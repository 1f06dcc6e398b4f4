#include "cpcser/manifest.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace cpcser {

namespace fs = std::filesystem;

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest: cannot open " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  std::vector<ManifestEntry> entries;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("manifest: " + where + ": invalid JSON");
    }
    if (!row.is_object() || !row.contains("id") || !row.contains("path")) {
      throw std::runtime_error("manifest: " + where + ": row needs \"id\" and \"path\"");
    }
    ManifestEntry e;
    try {
      e.id = row.at("id").get<std::string>();
      const fs::path p = row.at("path").get<std::string>();
      e.path = p.is_absolute() ? p : base / p;
      const bool has_a = row.contains("activation"), has_v = row.contains("valence"),
                 has_d = row.contains("dominance");
      if (has_a || has_v || has_d) {
        if (!(has_a && has_v && has_d)) {
          throw std::runtime_error("manifest: " + where + ": labels need activation, valence and dominance");
        }
        e.labels = EmotionLabels{row.at("activation").get<double>(), row.at("valence").get<double>(),
                                 row.at("dominance").get<double>()};
      }
      e.split = row.value("split", std::string{});
      e.tag = row.value("tag", std::string{});
    } catch (const nlohmann::json::exception&) {
      throw std::runtime_error("manifest: " + where + ": field has the wrong type");
    }
    if (!seen.insert(e.id).second) throw std::runtime_error("manifest: " + where + ": duplicate id '" + e.id + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  const fs::path base = fs::absolute(path).parent_path();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("manifest: cannot write " + path.string());
  for (const auto& e : entries) {
    fs::path p = e.path;
    if (p.is_absolute()) {
      const fs::path rel = p.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    nlohmann::ordered_json row;
    row["id"] = e.id;
    row["path"] = p.generic_string();
    if (e.labels) {
      row["activation"] = e.labels->activation;
      row["valence"] = e.labels->valence;
      row["dominance"] = e.labels->dominance;
    }
    if (!e.split.empty()) row["split"] = e.split;
    if (!e.tag.empty()) row["tag"] = e.tag;
    out << row.dump() << '\n';
  }
  if (!out) throw std::runtime_error("manifest: write failed for " + path.string());
}

fs::path write_corpus(const fs::path& dir, const std::vector<SyntheticUtterance>& corpus, bool labeled,
                      const std::string& manifest_name) {
  fs::create_directories(dir / "audio");
  std::vector<ManifestEntry> entries;
  entries.reserve(corpus.size());
  for (const auto& u : corpus) {
    ManifestEntry e;
    e.id = u.clip.id;
    e.path = fs::absolute(dir / "audio" / (u.clip.id + ".wav"));
    write_wav(e.path, u.clip);
    if (labeled) e.labels = u.labels;
    e.split = u.split;
    e.tag = u.tag;
    entries.push_back(std::move(e));
  }
  const fs::path manifest = dir / manifest_name;
  write_manifest(manifest, entries);
  return manifest;
}

std::vector<ManifestEntry> entries_with_split(const std::vector<ManifestEntry>& entries, const std::string& split) {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

}  // namespace cpcser
