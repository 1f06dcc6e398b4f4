#include "cpcser/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cpcser {

namespace {

constexpr char kMagic[8] = {'C', 'P', 'C', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kFloat64 = 1;

template <class T>
void put(std::vector<unsigned char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>(value >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return value;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint: truncated while reading ") + what);
  }
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw CheckpointError("checkpoint: no tensor named '" + name + "'");
}

std::vector<unsigned char> serialize_checkpoint(const nlohmann::json& config, std::span<const NamedTensor> tensors) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string blob = config.dump();
  put<std::uint64_t>(out, blob.size());
  out.insert(out.end(), blob.begin(), blob.end());
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(kFloat64);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) put<std::uint64_t>(out, d);
    for (double v : tensor.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader in(bytes);
  if (in.bytes(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic))) {
    throw CheckpointError("checkpoint: bad magic");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto blob_size = in.get<std::uint64_t>("config length");
  try {
    ckpt.config = nlohmann::json::parse(in.bytes(blob_size, "config"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed config JSON: ") + e.what());
  }
  const auto count = in.get<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = in.bytes(in.get<std::uint32_t>("name length"), "name");
    if (in.get<std::uint8_t>("dtype") != kFloat64) throw CheckpointError("checkpoint: unsupported dtype for " + t.name);
    const auto rank = in.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint64_t>("shape");
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = std::bit_cast<double>(in.get<std::uint64_t>("tensor data"));
    t.tensor = Tensor::from_data(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw CheckpointError("checkpoint: trailing bytes after last tensor");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     std::span<const NamedTensor> tensors) {
  const auto bytes = serialize_checkpoint(config, tensors);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

void restore_parameters(const Checkpoint& checkpoint, std::span<const NamedTensor> params) {
  for (const auto& p : params) {
    const Tensor& src = checkpoint.get(p.name);
    if (src.shape() != p.tensor.shape()) {
      throw CheckpointError("checkpoint: tensor '" + p.name + "' has shape " + to_string(src.shape()) +
                            ", model expects " + to_string(p.tensor.shape()));
    }
    Tensor dst = p.tensor;
    std::ranges::copy(src.data(), dst.mutable_data().begin());
  }
}

std::uint64_t parameter_checksum(std::span<const NamedTensor> params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](unsigned char byte) {
    h ^= byte;
    h *= 1099511628211ULL;
  };
  for (const auto& p : params) {
    for (char c : p.name) mix(static_cast<unsigned char>(c));
    for (double v : p.tensor.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(bits >> (8 * i)));
    }
  }
  return h;
}

}  // namespace cpcser
