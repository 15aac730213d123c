#include "parbeam/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "parbeam/errors.hpp"

namespace parbeam::io {

namespace {

constexpr std::array<std::uint8_t, 8> kMagic = {'P', 'B', 'T', 'K', '1', 0, 0, 0};
constexpr std::size_t kHeaderBytes = 8 + 4 * 4;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double get_f64(std::span<const std::uint8_t> b, std::size_t off) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
    return std::bit_cast<double>(bits);
}

} // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = ::crc32(crc, bytes.data() + off, chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_pbtk1(Kind kind, const Array2& data) {
    std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
    out.reserve(kHeaderBytes + data.size() * 8 + 4);
    put_u32(out, static_cast<std::uint32_t>(kind));
    put_u32(out, static_cast<std::uint32_t>(data.rows()));
    put_u32(out, static_cast<std::uint32_t>(data.cols()));
    put_u32(out, 0);
    for (double v : data.flat()) put_f64(out, v);
    const auto payload = std::span<const std::uint8_t>(out).subspan(kHeaderBytes);
    put_u32(out, crc32(payload));
    return out;
}

Blob decode_pbtk1(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderBytes + 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
        throw IoError("PBTK1: bad magic or truncated header");
    const std::uint32_t kind = get_u32(bytes, 8);
    const std::uint32_t rows = get_u32(bytes, 12);
    const std::uint32_t cols = get_u32(bytes, 16);
    if (kind > 2) throw IoError("PBTK1: unknown kind " + std::to_string(kind));
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    if (bytes.size() != kHeaderBytes + count * 8 + 4) throw IoError("PBTK1: payload size mismatch");
    const auto payload = bytes.subspan(kHeaderBytes, count * 8);
    if (crc32(payload) != get_u32(bytes, kHeaderBytes + count * 8)) throw IoError("PBTK1: CRC mismatch");
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = get_f64(payload, 8 * i);
    return {static_cast<Kind>(kind), Array2(rows, cols, std::move(values))};
}

void write_pbtk1(const std::filesystem::path& path, Kind kind, const Array2& data) {
    const auto bytes = encode_pbtk1(kind, data);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Blob read_pbtk1(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode_pbtk1(bytes);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void write_image(const std::filesystem::path& path, const Image& img) { write_pbtk1(path, Kind::Image, img.values); }

void write_sinogram(const std::filesystem::path& path, const Sinogram& sino) {
    write_pbtk1(path, Kind::Sinogram, sino.values);
}

Image read_image(const std::filesystem::path& path, const Geometry& geom) {
    auto blob = read_pbtk1(path);
    if (blob.kind != Kind::Image) throw IoError(path.string() + ": not an image");
    const auto n = static_cast<std::size_t>(geom.image_side());
    if (blob.data.rows() != n || blob.data.cols() != n) throw IoError(path.string() + ": image shape does not match geometry");
    return Image(geom, std::move(blob.data));
}

Sinogram read_sinogram(const std::filesystem::path& path, const Geometry& geom) {
    auto blob = read_pbtk1(path);
    if (blob.kind != Kind::Sinogram) throw IoError(path.string() + ": not a sinogram");
    if (blob.data.rows() != static_cast<std::size_t>(geom.num_angles()) ||
        blob.data.cols() != static_cast<std::size_t>(geom.num_bins()))
        throw IoError(path.string() + ": sinogram shape does not match geometry");
    return Sinogram(geom, std::move(blob.data));
}

std::string format_double(double v) {
    std::array<char, 32> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

std::string to_csv(const Array2& data) {
    std::string out;
    for (std::size_t r = 0; r < data.rows(); ++r) {
        for (std::size_t c = 0; c < data.cols(); ++c) {
            if (c) out += ',';
            out += format_double(data(r, c));
        }
        out += '\n';
    }
    return out;
}

void write_csv(const std::filesystem::path& path, const Array2& data) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << to_csv(data);
    if (!f) throw IoError("write failed: " + path.string());
}

void write_pgm(const std::filesystem::path& path, const Array2& data, double lo, double hi) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << "P5\n" << data.cols() << ' ' << data.rows() << "\n255\n";
    const double span = hi > lo ? hi - lo : 1.0;
    for (double v : data.flat()) {
        const double t = std::clamp((v - lo) / span, 0.0, 1.0);
        const auto byte = static_cast<unsigned char>(std::lround(t * 255.0));
        f.put(static_cast<char>(byte));
    }
    if (!f) throw IoError("write failed: " + path.string());
}

} // namespace parbeam::io
