#include "pmss/numerics/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace pmss {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw CheckpointError("truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void write_entry(std::ostream& out, const std::string& name, const Tensor& t, DType dtype) {
  if (name.size() > 0xFFFF) throw CheckpointError("entry name too long: " + name.substr(0, 32));
  if (t.rank() > 0xFF) throw CheckpointError("tensor rank too large");
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) put<std::uint64_t>(out, e);
  for (double v : t.data()) {
    if (dtype == DType::f64)
      put<double>(out, v);
    else
      put<float>(out, static_cast<float>(v));
  }
}

NamedTensor read_entry(std::istream& in) {
  const auto len = get<std::uint16_t>(in);
  std::string name(len, '\0');
  if (len && !in.read(name.data(), len)) throw CheckpointError("truncated entry name");
  const auto tag = get<std::uint8_t>(in);
  if (tag > 1) throw CheckpointError("unknown dtype tag " + std::to_string(tag) + " in entry '" + name + "'");
  const auto rank = get<std::uint8_t>(in);
  if (rank == 0) throw CheckpointError("zero-rank entry '" + name + "'");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    const auto extent = get<std::uint64_t>(in);
    if (extent == 0 || extent > (1ULL << 40)) throw CheckpointError("bad extent in entry '" + name + "'");
    e = static_cast<std::size_t>(extent);
    count *= extent;
    if (count > (1ULL << 40)) throw CheckpointError("entry '" + name + "' too large");
  }
  std::vector<double> values(static_cast<std::size_t>(count));
  for (auto& v : values) v = tag == 0 ? get<double>(in) : static_cast<double>(get<float>(in));
  return {std::move(name), Tensor::from(std::move(shape), std::move(values))};
}

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& entries, DType dtype) {
  out.write(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) write_entry(out, e.name, e.tensor, dtype);
  if (!out) throw CheckpointError("failed writing checkpoint");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto count = get<std::uint32_t>(in);
  std::vector<NamedTensor> entries;
  entries.reserve(std::min<std::uint32_t>(count, 4096));
  for (std::uint32_t i = 0; i < count; ++i) entries.push_back(read_entry(in));
  return entries;
}

std::string encode_checkpoint(const std::vector<NamedTensor>& entries, DType dtype) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, entries, dtype);
  return os.str();
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_checkpoint(is);
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries, DType dtype) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, entries, dtype);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return read_checkpoint(in);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return sha256_hex(os.str());
}

}  // namespace pmss
