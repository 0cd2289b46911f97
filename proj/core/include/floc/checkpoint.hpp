#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "floc/tensor.hpp"

namespace floc {

using NamedTensors = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor container layout, all integers little-endian:
///   "FLOC" | u32 version | u32 count |
///   count x ( u16 name_len | name bytes | u8 rank | rank x u64 dim | f64 values )
void write_checkpoint(std::ostream& out, const NamedTensors& tensors);
NamedTensors read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

// Little-endian primitives shared by the binary formats.
namespace le {
void put_u8(std::ostream& out, std::uint8_t v);
void put_u16(std::ostream& out, std::uint16_t v);
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
std::uint8_t get_u8(std::istream& in);
std::uint16_t get_u16(std::istream& in);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
double get_f64(std::istream& in);
}  // namespace le

}  // namespace floc
