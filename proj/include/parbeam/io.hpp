#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "parbeam/core.hpp"

namespace parbeam::io {

/// Payload kind stored in a PBTK1 header.
enum class Kind : std::uint32_t { Image = 0, Sinogram = 1, Parameters = 2 };

/// PBTK1 layout: 8-byte magic "PBTK1\0\0\0"; u32 kind, rows, cols,
/// reserved(=0), all little-endian; rows*cols f64 payload (LE, row-major);
/// u32 CRC32 of the payload bytes.
struct Blob {
    Kind kind = Kind::Image;
    Array2 data;
};

std::vector<std::uint8_t> encode_pbtk1(Kind kind, const Array2& data);
Blob decode_pbtk1(std::span<const std::uint8_t> bytes);

void write_pbtk1(const std::filesystem::path& path, Kind kind, const Array2& data);
Blob read_pbtk1(const std::filesystem::path& path);

void write_image(const std::filesystem::path& path, const Image& img);
void write_sinogram(const std::filesystem::path& path, const Sinogram& sino);
/// Reads an image and checks it against the geometry.
Image read_image(const std::filesystem::path& path, const Geometry& geom);
Sinogram read_sinogram(const std::filesystem::path& path, const Geometry& geom);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// One CSV row per array row, values printed with round-trip precision.
std::string to_csv(const Array2& data);
void write_csv(const std::filesystem::path& path, const Array2& data);

/// 8-bit binary PGM, linear window [lo, hi] clamped.
void write_pgm(const std::filesystem::path& path, const Array2& data, double lo, double hi);

/// Shortest decimal text that parses back to the identical double.
std::string format_double(double v);

} // namespace parbeam::io
