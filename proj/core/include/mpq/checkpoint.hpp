#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mpq/tensor.hpp"
#include "mpq/transformer.hpp"

namespace mpq {

/// Self-describing binary container shared by every checkpoint:
///
///   magic[8] | u32 version | u64 record count | records...
///
/// Each record starts with a u8 kind. All integers and reals are
/// little-endian; strings are u32 length + bytes.
///   kind 0, tensor:  name | u8 dtype (0 = f32) | u32 rank | u64 dims[rank] | f32 payload
///   kind 1, cluster: id | u8 n_bits | f64 alpha | u32 members |
///                    members x (name | u32 rank | u64 dims | u64 bytes | packed codes)
///   kind 2, integer: name | i64 value
namespace container {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::array<char, 8> kModelMagic{'M', 'P', 'Q', 'M', 'O', 'D', 'E', 'L'};
inline constexpr std::array<char, 8> kQuantMagic{'M', 'P', 'Q', 'Q', 'U', 'A', 'N', 'T'};

enum class RecordKind : std::uint8_t { kTensor = 0, kCluster = 1, kInteger = 2 };
enum class DType : std::uint8_t { kF32 = 0 };

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct PackedMember {
    std::string name;
    Shape shape;
    std::vector<std::uint8_t> codes;
};

struct ClusterRecord {
    std::string id;
    int n_bits = 0;
    double alpha = 0.0;
    std::vector<PackedMember> members;
};

struct IntegerRecord {
    std::string name;
    std::int64_t value = 0;
};

struct Container {
    std::array<char, 8> magic{};
    std::uint32_t version = kVersion;
    std::vector<TensorRecord> tensors;
    std::vector<ClusterRecord> clusters;
    std::vector<IntegerRecord> integers;

    /// Throws FormatError naming the missing key.
    std::int64_t integer(const std::string& name) const;
};

void write(std::ostream& os, const Container& c);
/// Throws FormatError with the offending record index and field.
Container read(std::istream& is);

void write_file(const std::filesystem::path& path, const Container& c);
Container read_file(const std::filesystem::path& path);

}  // namespace container

/// Model dimensions stored as integer records ("meta.vocab", ...).
void put_model_config(container::Container& c, const ModelConfig& config);
ModelConfig get_model_config(const container::Container& c);

void save_model(const std::filesystem::path& path, const TransformerLM& model);
TransformerLM load_model(const std::filesystem::path& path);

/// Reads only the magic bytes; distinguishes full-precision from quantized files.
std::array<char, 8> peek_magic(const std::filesystem::path& path);

}  // namespace mpq
