#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpcser/adam.hpp"
#include "json.hpp"

namespace cpcser {

// Layout (all integers little-endian):
//   magic "CPCSCKPT" | u32 version | u64 config length | config JSON bytes |
//   u64 tensor count | per tensor: u32 name length, name, u8 dtype (1 = float64),
//   u32 rank, u64 dims[rank], float64 data[prod(dims)]
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json config;
  std::vector<NamedTensor> tensors;

  /// Tensor by exact name; throws CheckpointError if absent.
  const Tensor& get(const std::string& name) const;
};

std::vector<unsigned char> serialize_checkpoint(const nlohmann::json& config, std::span<const NamedTensor> tensors);
Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes);

/// Writes to a temporary sibling and renames it over `path`.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     std::span<const NamedTensor> tensors);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies values of every parameter from the checkpoint tensor of the same name.
/// Throws CheckpointError on a missing name or shape mismatch.
void restore_parameters(const Checkpoint& checkpoint, std::span<const NamedTensor> params);

/// FNV-1a over parameter names and raw value bytes.
std::uint64_t parameter_checksum(std::span<const NamedTensor> params);

}  // namespace cpcser
