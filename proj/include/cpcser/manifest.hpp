#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cpcser/synth.hpp"

namespace cpcser {

/// One JSON line: {"id", "path", "activation", "valence", "dominance", "split", "tag"}.
/// Labels are absent in unlabeled (pre-training) manifests; "tag" is optional.
struct ManifestEntry {
  std::string id;
  std::filesystem::path path;  // absolute after reading
  std::optional<EmotionLabels> labels;
  std::string split;
  std::string tag;
};

/// Relative audio paths are resolved against the manifest's directory.
/// Throws std::runtime_error naming the file and line on malformed rows or duplicate ids.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Paths inside the manifest directory are written relative to it.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

/// Writes <dir>/audio/<id>.wav for every utterance and <dir>/<manifest_name>.
/// With `labeled` false the label fields are omitted. Returns the manifest path.
std::filesystem::path write_corpus(const std::filesystem::path& dir, const std::vector<SyntheticUtterance>& corpus,
                                   bool labeled = true, const std::string& manifest_name = "manifest.jsonl");

std::vector<ManifestEntry> entries_with_split(const std::vector<ManifestEntry>& entries, const std::string& split);

}  // namespace cpcser
