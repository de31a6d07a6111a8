#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "pmss/numerics/gradcheck.hpp"
#include "pmss/numerics/tensor.hpp"

namespace pmss {

// Container layout (all integers little-endian):
//   "PMSS" | version u32 | entry count u32 |
//   per entry: name length u16 | UTF-8 name | dtype u8 | rank u8 |
//              extents u64 x rank | raw element data
inline constexpr char kCheckpointMagic[4] = {'P', 'M', 'S', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_entry(std::ostream& out, const std::string& name, const Tensor& t, DType dtype = DType::f64);
NamedTensor read_entry(std::istream& in);

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& entries, DType dtype = DType::f64);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

std::string encode_checkpoint(const std::vector<NamedTensor>& entries, DType dtype = DType::f64);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries,
                     DType dtype = DType::f64);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace pmss
