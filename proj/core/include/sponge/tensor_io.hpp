#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sponge/tensor.hpp"

// SPTN binary tensor format:
//   magic "SPTN" | u8 version (1) | u8 dtype (0 = f64, 1 = f32) | u8 rank |
//   u32 dims[rank] (little endian) | raw little-endian values, row-major.
namespace sponge {

enum class StorageType : std::uint8_t { kF64 = 0, kF32 = 1 };

inline constexpr std::uint8_t kSptnVersion = 1;

std::vector<std::uint8_t> encode_sptn(const Tensor& t, StorageType dtype = StorageType::kF64);

/// Decodes one tensor starting at `offset`; advances `offset` past it. Throws
/// FormatError with the failing byte offset on truncation or bad headers.
Tensor decode_sptn(const std::vector<std::uint8_t>& bytes, std::size_t& offset);

void write_sptn(const std::filesystem::path& path, const Tensor& t,
                StorageType dtype = StorageType::kF64);
Tensor read_sptn(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

/// Binary PPM (P6) with maxval 255, mapped to a 3 x H x W tensor by /255.
/// Comments in the header are accepted.
Tensor decode_ppm(const std::vector<std::uint8_t>& bytes);
Tensor read_ppm(const std::filesystem::path& path);
/// Quantizes to 8 bits with rounding; the tensor must be 3 x H x W in [0, 1].
std::vector<std::uint8_t> encode_ppm(const Tensor& image);

/// Reads an image by extension: ".ppm" as PPM, anything else as SPTN.
Tensor read_image(const std::filesystem::path& path);

// Little-endian primitive helpers shared by the model file codec.
void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);
std::uint8_t get_u8(const std::vector<std::uint8_t>& in, std::size_t& offset);
std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t& offset);
std::uint64_t get_u64(const std::vector<std::uint8_t>& in, std::size_t& offset);
double get_f64(const std::vector<std::uint8_t>& in, std::size_t& offset);

}  // namespace sponge
